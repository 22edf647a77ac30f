import numpy as np
import pytest

from moe_asr import parallel
from moe_asr.config import ModelConfig
from moe_asr.data import SynthConfig, generate
from moe_asr.errors import (ConfigError, PartitionError, SyncError,
                            TransportError)
from moe_asr.losses import RouterBatch, mean_importance_loss
from moe_asr.model import Model, build_model
from moe_asr.parallel import (WorkerShard, gather_probabilities, make_shards,
                              partition_experts, step_parallel)
from moe_asr.train import apply_sgd, train_step


def small_config(**kw):
    base = dict(n_moe_layers=3, n_memory_layers=3, attention_every=3,
                n_experts=4, expert_hidden=16, d_feat=8, d_model=12,
                d_att=8, memory_order=1, d_c=10, d_a=4, d_d=4,
                vocab_size=4, n_domains=3, n_accents=2, batch_size=6,
                seed=0)
    base.update(kw)
    return ModelConfig(**base)


def small_batch(config, count, seed=5):
    synth = SynthConfig(n_domains=config.n_domains,
                        n_accents=config.n_accents,
                        vocab_size=config.vocab_size,
                        d_feat=config.d_feat, t_min=10, t_max=16,
                        label_min=1, label_max=4, seed=seed)
    return generate(synth, count)


class TestPartition:
    def test_even_split(self):
        assert partition_experts(4, 2) == [(0, 2), (2, 4)]
        assert partition_experts(16, 4) == [(0, 4), (4, 8), (8, 12),
                                            (12, 16)]

    def test_remainder_goes_to_lowest_workers(self):
        assert partition_experts(5, 2) == [(0, 3), (3, 5)]
        assert partition_experts(7, 3) == [(0, 3), (3, 5), (5, 7)]

    def test_more_workers_than_experts_leaves_empty_ranges(self):
        assert partition_experts(2, 4) == [(0, 1), (1, 2), (2, 2), (2, 2)]

    def test_zero_workers_rejected(self):
        with pytest.raises(ConfigError):
            partition_experts(4, 0)

    def test_bad_manual_partition_detected(self):
        cfg = small_config()
        model = Model(cfg)
        batch = small_batch(cfg, 4)
        shards = make_shards(batch, cfg.n_experts, 2)
        shards[1].expert_lo = 3            # leaves expert 2 uncovered
        with pytest.raises(PartitionError):
            step_parallel(model, shards)


class TestSingleWorkerEquivalence:
    def test_bit_exact_against_plain_step(self):
        cfg = small_config()
        batch = small_batch(cfg, 6)
        model_a = Model(cfg)
        model_b = Model(cfg)
        res_plain = train_step(model_a, batch)
        res_sim = step_parallel(model_b, make_shards(batch, cfg.n_experts,
                                                     1))
        assert res_plain.breakdown == res_sim.breakdown
        assert np.array_equal(res_plain.util, res_sim.util)
        for name in res_plain.gbuf:
            assert np.array_equal(res_plain.gbuf[name], res_sim.gbuf[name]), \
                name

    def test_logits_round_trip_is_bit_exact(self):
        # frames leave their home worker, are processed remotely, and come
        # back: the final per-utterance logits must match the plain
        # forward bit for bit
        cfg = small_config()
        batch = small_batch(cfg, 6)
        model = Model(cfg)
        runs = [model.forward_utterance(u.frames) for u in batch]
        shards = make_shards(batch, cfg.n_experts, 3)
        step_parallel(model, shards)
        states = [st for s in shards for st in s.states]
        for run, st in zip(runs, states):
            assert np.array_equal(run.logits, st.logits)


class TestMultiWorkerEquivalence:
    @pytest.mark.parametrize("n_workers", [2, 3, 4])
    def test_gradients_match_within_reassociation_tolerance(self, n_workers):
        cfg = small_config()
        batch = small_batch(cfg, 6)
        res_plain = train_step(Model(cfg), batch)
        res_sim = step_parallel(
            Model(cfg), make_shards(batch, cfg.n_experts, n_workers))
        assert res_sim.breakdown.total == pytest.approx(
            res_plain.breakdown.total, abs=1e-12)
        for name in res_plain.gbuf:
            a, b = res_plain.gbuf[name], res_sim.gbuf[name]
            assert np.max(np.abs(a - b)) < 1e-9, name

    def test_loss_trajectory_matches_over_steps(self):
        cfg = small_config(batch_size=6)
        batch = small_batch(cfg, 6)
        totals = {}
        for n_workers in (1, 2, 4):
            model = Model(cfg)
            history = []
            for _ in range(20):
                res = step_parallel(
                    model, make_shards(batch, cfg.n_experts, n_workers))
                apply_sgd(model, res.gbuf, cfg.learning_rate)
                history.append(res.breakdown.total)
            totals[n_workers] = history
        for n_workers in (2, 4):
            diffs = np.abs(np.array(totals[1]) - np.array(totals[n_workers]))
            assert np.max(diffs) < 1e-6

    def test_worker_count_exceeding_batch_size(self):
        cfg = small_config()
        batch = small_batch(cfg, 2)
        res_plain = train_step(Model(cfg), batch)
        res_sim = step_parallel(Model(cfg),
                                make_shards(batch, cfg.n_experts, 4))
        assert res_sim.breakdown.total == pytest.approx(
            res_plain.breakdown.total, abs=1e-12)


class TestGather:
    def test_single_worker_batch_unchanged(self):
        cfg = small_config()
        model = Model(cfg)
        batch = small_batch(cfg, 4)
        shards = make_shards(batch, cfg.n_experts, 1)
        step_parallel(model, shards)
        rb = gather_probabilities(shards, 0)
        runs = [model.forward_utterance(u.frames) for u in batch]
        expect = np.concatenate([r.moe_probs[0] for r in runs], axis=0)
        assert np.array_equal(rb.probs, expect)

    def test_two_workers_concatenate_in_worker_order(self):
        cfg = small_config()
        model = Model(cfg)
        batch = small_batch(cfg, 8)
        shards = make_shards(batch, cfg.n_experts, 2)
        step_parallel(model, shards)
        rb = gather_probabilities(shards, 1)
        k_local = [sum(u.t for u in s.utterances) for s in shards]
        assert rb.k == sum(k_local)
        first = np.concatenate(shards[0].layer_probs[1], axis=0)
        assert np.array_equal(rb.probs[:k_local[0]], first)

    def test_global_importance_equals_single_worker_value(self):
        cfg = small_config()
        batch = small_batch(cfg, 6)
        model = Model(cfg)
        shards2 = make_shards(batch, cfg.n_experts, 2)
        step_parallel(model, shards2)
        shards1 = make_shards(batch, cfg.n_experts, 1)
        step_parallel(model, shards1)
        for layer in range(cfg.n_moe_layers):
            v2, _ = mean_importance_loss(gather_probabilities(shards2,
                                                              layer))
            v1, _ = mean_importance_loss(gather_probabilities(shards1,
                                                              layer))
            assert v1 == v2

    def test_gather_before_routing_is_sync_error(self):
        cfg = small_config()
        batch = small_batch(cfg, 4)
        shards = make_shards(batch, cfg.n_experts, 2)
        with pytest.raises(SyncError):
            gather_probabilities(shards, 0)
        shards[0].layer_probs = [[] for _ in range(cfg.n_moe_layers)]
        shards[1].layer_probs = [[] for _ in range(cfg.n_moe_layers)]
        with pytest.raises(SyncError):
            gather_probabilities(shards, 0)


class TestGlobalVersusPerWorkerAuxLoss:
    def test_skewed_loads_make_global_importance_differ(self):
        # worker A's frames all pick expert 0, worker B's all pick expert
        # 1, with unequal frame counts: the global mean importance cannot
        # equal the per-worker average
        a = np.zeros((3, 2))
        a[:, 0] = 1.0
        b = np.zeros((5, 2))
        b[:, 1] = 1.0
        v_a, _ = mean_importance_loss(RouterBatch(a))
        v_b, _ = mean_importance_loss(RouterBatch(b))
        per_worker = (3 * v_a + 5 * v_b) / 8
        v_global, _ = mean_importance_loss(
            RouterBatch(np.concatenate([a, b], axis=0)))
        assert abs(v_global - per_worker) > 0.5

    def test_aux_scope_flag_changes_reported_loss(self):
        cfg_g = small_config(aux_scope="global")
        cfg_w = small_config(aux_scope="per_worker")
        batch = small_batch(cfg_g, 6)
        res_g = step_parallel(Model(cfg_g),
                              make_shards(batch, cfg_g.n_experts, 2))
        res_w = step_parallel(Model(cfg_w),
                              make_shards(batch, cfg_w.n_experts, 2))
        assert res_g.breakdown.l_m != res_w.breakdown.l_m


class TestTransportAndProvenance:
    def test_every_processed_frame_was_routed_to_that_expert(self):
        cfg = small_config()
        model = Model(cfg)
        batch = small_batch(cfg, 6)
        shards = make_shards(batch, cfg.n_experts, 2)
        step_parallel(model, shards)
        states = {s.worker_id: s.states for s in shards}
        seen = set()
        for s in shards:
            for (m, src, utt, frame, expert) in s.processed:
                assert states[src][utt].moe_selected[m][frame] == expert
                key = (m, src, utt, frame)
                assert key not in seen, "frame processed twice"
                seen.add(key)
        total_frames = sum(u.t for u in batch)
        assert len(seen) == total_frames * cfg.n_moe_layers

    def test_lost_message_raises_transport_error(self, monkeypatch):
        cfg = small_config()
        model = Model(cfg)
        batch = small_batch(cfg, 4)
        shards = make_shards(batch, cfg.n_experts, 2)
        real_exchange = parallel._exchange
        calls = {"n": 0}

        def lossy_exchange(shards_arg):
            real_exchange(shards_arg)
            calls["n"] += 1
            if calls["n"] == 2:          # the first reply leg
                for s in shards_arg:
                    if s.inbox:
                        s.inbox.pop()
                        return

        monkeypatch.setattr(parallel, "_exchange", lossy_exchange)
        with pytest.raises(TransportError):
            step_parallel(model, shards)


def test_empty_batch_rejected():
    cfg = small_config()
    with pytest.raises(ConfigError):
        step_parallel(Model(cfg), make_shards([], cfg.n_experts, 2))
