import numpy as np
import pytest

from moe_asr.embedding import EmbeddingGrads, EmbeddingNetwork
from moe_asr.errors import EmptySequenceError, StateError
from moe_asr.gradcheck import check_embedding


def make_net(rng, d_feat=4, d_c=6, order=1, vocab=3, d_a=3, d_d=3,
             pointwise=False):
    net = EmbeddingNetwork.init(rng, "moe2", d_feat, d_c, order, vocab,
                                d_a, d_d, n_accents=3, n_domains=4)
    if not pointwise:
        net.mem0.taps[...] = rng.uniform(-0.5, 0.5, net.mem0.taps.shape)
        net.mem1.taps[...] = rng.uniform(-0.5, 0.5, net.mem1.taps.shape)
    return net


class TestEmbedForward:
    def test_accent_embedding_is_projection_of_pooled_mean(self, rng):
        net = make_net(rng)
        frames = rng.normal(size=(6, 4))
        out, _ = net.embed(frames)
        pooled = out.e_c.mean(axis=0)
        # scalar-loop oracle: explicit sum then project
        expect = np.zeros(3)
        for j in range(3):
            for i in range(6):
                expect[j] += pooled[i] * net.accent_proj.w[i, j]
        assert np.allclose(out.e_a, expect, rtol=0, atol=1e-12)
        assert out.e_a.shape == (3,) and out.e_d.shape == (3,)
        assert out.e_c.shape == (6, 6)

    def test_constant_trunk_output_makes_e_a_length_invariant(self, rng):
        # zero taps -> pointwise trunk; identical frames -> constant e_c
        net = make_net(rng, pointwise=True)
        frame = rng.normal(size=4)
        outs = [net.embed(np.tile(frame, (t, 1)))[0] for t in (1, 3, 9)]
        c = outs[0].e_c[0]
        for out in outs:
            assert np.allclose(out.e_c, c, rtol=0, atol=1e-15)
            assert np.allclose(out.e_a, outs[0].e_a, rtol=0, atol=1e-12)
            assert np.allclose(out.e_d, outs[0].e_d, rtol=0, atol=1e-12)

    def test_single_frame_pooling_is_identity(self, rng):
        net = make_net(rng)
        frames = rng.normal(size=(1, 4))
        out, _ = net.embed(frames)
        assert np.allclose(out.e_a, out.e_c[0] @ net.accent_proj.w,
                           rtol=0, atol=1e-14)

    def test_empty_sequence_rejected(self, rng):
        net = make_net(rng)
        with pytest.raises(EmptySequenceError):
            net.embed(np.zeros((0, 4)))

    def test_heads_off_skips_classifiers(self, rng):
        net = make_net(rng)
        out, _ = net.embed(rng.normal(size=(5, 4)), heads=False)
        assert out.grapheme_logits is None
        assert out.accent_logits is None and out.domain_logits is None
        assert out.e_a is not None and out.e_d is not None

    def test_moe1_variant_has_no_accent_domain_outputs(self, rng):
        net = EmbeddingNetwork.init(rng, "moe1", 4, 6, 1, 3)
        out, _ = net.embed(rng.normal(size=(5, 4)))
        assert out.e_a is None and out.e_d is None
        assert out.grapheme_logits.shape == (5, 4)


class TestPermutationInvariance:
    def test_pooled_embeddings_invariant_under_frame_permutation(self, rng):
        # pointwise trunk: permuting input frames permutes e_c rows and
        # leaves the pooled embeddings unchanged
        net = make_net(rng, pointwise=True)
        frames = rng.normal(size=(7, 4))
        perm = rng.permutation(7)
        out1, _ = net.embed(frames)
        out2, _ = net.embed(frames[perm])
        assert np.array_equal(out2.e_c, out1.e_c[perm])
        assert np.allclose(out2.e_a, out1.e_a, rtol=0, atol=1e-12)
        assert np.allclose(out2.e_d, out1.e_d, rtol=0, atol=1e-12)

    def test_pooling_stage_invariance_with_temporal_trunk(self, rng):
        # with FIR memory in the trunk the invariance lives at the pooling
        # stage: permuting e_c rows directly cannot change e_a/e_d
        net = make_net(rng)
        frames = rng.normal(size=(7, 4))
        out, _ = net.embed(frames)
        perm = rng.permutation(7)
        e_a_perm = out.e_c[perm].mean(axis=0) @ net.accent_proj.w
        assert np.allclose(e_a_perm, out.e_a, rtol=0, atol=1e-12)

    def test_uniform_repetition_invariance(self, rng):
        net = make_net(rng, pointwise=True)
        frames = rng.normal(size=(5, 4))
        doubled = np.repeat(frames, 2, axis=0)
        out1, _ = net.embed(frames)
        out2, _ = net.embed(doubled)
        assert np.allclose(out2.e_a, out1.e_a, rtol=0, atol=1e-12)
        assert np.allclose(out2.e_d, out1.e_d, rtol=0, atol=1e-12)


class TestEmbedBackward:
    def test_pooled_gradient_spreads_one_over_t(self, rng):
        # identity trunk (w=I, b=0, zero taps) over positive frames makes
        # e_c == frames, so d(loss)/d(frames) is exactly (W_a g)/T per frame
        net = make_net(rng, d_feat=6, d_c=6, pointwise=True)
        net.trunk_in.w[...] = np.eye(6)
        net.trunk_in.b[...] = 0.0
        t = 5
        frames = rng.uniform(0.5, 2.0, (t, 6))     # ReLU transparent
        out, cache = net.embed(frames)
        assert np.array_equal(out.e_c, frames)
        g = rng.normal(size=3)
        gbuf = {n: np.zeros_like(p) for n, p in net.named_params("emb.")}
        gframes = net.backward(EmbeddingGrads(e_a=g), cache, gbuf, "emb.")
        expect_row = (net.accent_proj.w @ g) / t
        for row in gframes:
            assert np.allclose(row, expect_row, rtol=0, atol=1e-15)

    def test_zero_upstream_gives_zero_grads(self, rng):
        net = make_net(rng)
        frames = rng.normal(size=(5, 4))
        _, cache = net.embed(frames)
        gbuf = {n: np.zeros_like(p) for n, p in net.named_params("emb.")}
        gframes = net.backward(EmbeddingGrads(), cache, gbuf, "emb.")
        assert not np.any(gframes)
        for name, v in gbuf.items():
            assert not np.any(v), name

    def test_backward_without_cache_is_state_error(self, rng):
        net = make_net(rng)
        with pytest.raises(StateError):
            net.backward(EmbeddingGrads(), None, {}, "emb.")

    def test_finite_difference_agreement(self):
        for seed in range(5):
            for row in check_embedding(seed):
                assert row.ok, (row.name, seed, row.max_rel_err)
