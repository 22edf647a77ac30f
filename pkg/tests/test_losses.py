import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from moe_asr import tensor
from moe_asr.errors import (ConfigError, DegenerateDistributionError,
                            InfeasibleAlignmentError, LabelError,
                            NumericError)
from moe_asr.gradcheck import check_losses, finite_difference, max_rel_error
from moe_asr.losses import (LossWeights, RouterBatch, combine, cross_entropy,
                            ctc_loss, ctc_min_frames, mean_importance_loss,
                            sparsity_loss)
from moe_asr.train import aux_losses_and_grads


def brute_force_ctc(log_probs, labels, blank):
    """Independent oracle: enumerate every frame-level path, collapse
    repeats, drop blanks, and sum the probability of paths matching the
    labels."""
    t_len, n_classes = log_probs.shape
    labels = list(labels)
    total = 0.0
    for path in itertools.product(range(n_classes), repeat=t_len):
        collapsed = [k for k, _ in itertools.groupby(path) if k != blank]
        if collapsed == labels:
            total += math.exp(sum(log_probs[t, path[t]]
                                  for t in range(t_len)))
    return -math.log(total) if total > 0 else math.inf


class TestCTC:
    def test_single_frame_single_label(self, rng):
        lp = tensor.log_softmax(rng.normal(size=(1, 4)))
        loss, _ = ctc_loss(lp, [2])
        assert loss == pytest.approx(-lp[0, 2], abs=1e-12)

    def test_two_frames_one_label_enumerates_three_alignments(self, rng):
        lp = tensor.log_softmax(rng.normal(size=(2, 3)))  # V=2, blank=2
        loss, _ = ctc_loss(lp, [0])
        a = np.exp(lp)
        direct = (a[0, 0] * a[1, 0] + a[0, 0] * a[1, 2]
                  + a[0, 2] * a[1, 0])
        assert loss == pytest.approx(-math.log(direct), abs=1e-12)
        assert loss == pytest.approx(brute_force_ctc(lp, [0], blank=2),
                                     abs=1e-10)

    def test_uniform_posteriors_give_log3(self):
        lp = np.full((2, 3), math.log(1.0 / 3.0))
        loss, _ = ctc_loss(lp, [0])
        assert loss == pytest.approx(math.log(3.0), abs=1e-12)

    def test_matches_brute_force_on_small_instances(self, rng):
        blank_cases = 0
        for vocab in (1, 2, 3):
            for t_len in (1, 2, 3, 4):
                for n_labels in (1, 2):
                    for labels in itertools.product(range(vocab),
                                                    repeat=n_labels):
                        if t_len < ctc_min_frames(labels):
                            continue
                        lp = tensor.log_softmax(
                            rng.normal(size=(t_len, vocab + 1)))
                        loss, _ = ctc_loss(lp, list(labels))
                        oracle = brute_force_ctc(lp, labels, blank=vocab)
                        assert loss == pytest.approx(oracle, abs=1e-10)
                        blank_cases += 1
        assert blank_cases > 30

    def test_empty_label_sequence_is_all_blanks(self, rng):
        lp = tensor.log_softmax(rng.normal(size=(3, 3)))
        loss, _ = ctc_loss(lp, [])
        assert loss == pytest.approx(-lp[:, 2].sum(), abs=1e-12)

    def test_infeasible_label_length_is_an_error(self):
        lp = np.full((2, 3), math.log(1.0 / 3.0))
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss(lp, [0, 0])          # repeat needs a blank: min T = 3
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss(lp, [0, 1, 0])

    def test_out_of_range_label(self):
        lp = np.full((3, 3), math.log(1.0 / 3.0))
        with pytest.raises(LabelError):
            ctc_loss(lp, [2])             # V=2: valid ids are 0 and 1
        with pytest.raises(LabelError):
            ctc_loss(lp, [-1])

    def test_gradient_matches_finite_differences(self, rng):
        lp = rng.uniform(-2, 0, (5, 4))
        labels = [1, 2]
        _, grad = ctc_loss(lp, labels)
        numeric = finite_difference(lambda: ctc_loss(lp, labels)[0], lp)
        assert max_rel_error(grad, numeric) < 1e-4

    def test_gradient_is_negated_posterior(self, rng):
        lp = tensor.log_softmax(rng.normal(size=(4, 3)))
        _, grad = ctc_loss(lp, [0])
        # posteriors: each frame's state posterior sums to 1
        assert np.allclose(grad.sum(axis=1), -1.0, rtol=0, atol=1e-10)
        assert np.all(grad <= 0)


class TestSparsityLoss:
    def test_one_hot_rows_reach_minimum_exactly(self):
        p = np.zeros((4, 3))
        p[np.arange(4), [0, 2, 1, 0]] = 1.0
        value, _ = sparsity_loss(RouterBatch(p))
        assert abs(value - 1.0) <= 1e-12

    def test_uniform_rows_reach_sqrt_n_exactly(self):
        value, _ = sparsity_loss(RouterBatch(np.full((3, 4), 0.25)))
        assert abs(value - 2.0) <= 1e-12

    def test_direct_formula_on_08_02_row(self):
        value, _ = sparsity_loss(RouterBatch(np.array([[0.8, 0.2]])))
        assert value == pytest.approx(1.0 / math.sqrt(0.68), abs=1e-12)

    def test_zero_row_is_degenerate(self):
        with pytest.raises(DegenerateDistributionError):
            RouterBatch(np.array([[0.0, 0.0], [1.0, 0.0]]))

    @given(st.integers(2, 6), st.integers(1, 8), st.integers(0, 1000))
    def test_bounds(self, n, k, seed):
        rng = np.random.default_rng(seed)
        probs = tensor.softmax(rng.normal(size=(k, n)) * 3)
        value, _ = sparsity_loss(RouterBatch(probs))
        assert 1.0 - 1e-9 <= value <= math.sqrt(n) + 1e-9

    def test_gradient_step_from_near_uniform_decreases_loss(self, rng):
        # exactly uniform is the (unstable) maximum where the gradient
        # vanishes; a descent step from a perturbed row must strictly
        # decrease the loss
        z = rng.normal(size=(1, 4)) * 0.01
        probs = tensor.softmax(z)
        before, gp = sparsity_loss(RouterBatch(probs))
        gz = tensor.softmax_backward(gp, probs)
        after, _ = sparsity_loss(RouterBatch(tensor.softmax(z - 0.5 * gz)))
        assert after < before


class TestMeanImportanceLoss:
    def test_balanced_batch_reaches_one_exactly(self):
        value, _ = mean_importance_loss(RouterBatch(np.full((5, 4), 0.25)))
        assert abs(value - 1.0) <= 1e-12

    def test_collapsed_batch_reaches_n_exactly(self):
        p = np.zeros((6, 4))
        p[:, 0] = 1.0
        value, _ = mean_importance_loss(RouterBatch(p))
        assert abs(value - 4.0) <= 1e-12

    def test_hand_evaluated_example(self):
        p = np.array([[1.0, 0.0], [0.5, 0.5]])
        value, _ = mean_importance_loss(RouterBatch(p))
        assert value == pytest.approx(2 * (0.75 ** 2 + 0.25 ** 2),
                                      abs=1e-12)
        assert value == pytest.approx(1.25, abs=1e-12)

    def test_invariant_under_frame_permutation(self, rng):
        probs = tensor.softmax(rng.normal(size=(7, 4)) * 2)
        v1, _ = mean_importance_loss(RouterBatch(probs))
        v2, _ = mean_importance_loss(
            RouterBatch(probs[rng.permutation(7)]))
        assert v1 == pytest.approx(v2, abs=1e-12)

    def test_invariant_under_simultaneous_expert_permutation(self, rng):
        probs = tensor.softmax(rng.normal(size=(7, 4)) * 2)
        perm = rng.permutation(4)
        v1, _ = mean_importance_loss(RouterBatch(probs))
        v2, _ = mean_importance_loss(RouterBatch(probs[:, perm]))
        assert v1 == pytest.approx(v2, abs=1e-12)

    @given(st.integers(2, 6), st.integers(1, 8), st.integers(0, 1000))
    def test_bounds(self, n, k, seed):
        rng = np.random.default_rng(seed)
        probs = tensor.softmax(rng.normal(size=(k, n)) * 3)
        value, _ = mean_importance_loss(RouterBatch(probs))
        assert 1.0 - 1e-9 <= value <= n + 1e-9


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = cross_entropy(np.zeros(4), 1)
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_saturated_target(self):
        loss, _ = cross_entropy(np.array([10.0, 0.0]), 0)
        assert loss < 1e-4

    def test_matches_direct_formula(self, rng):
        logits = rng.normal(size=6)
        loss, _ = cross_entropy(logits, 3)
        direct = -(logits[3] - np.log(np.exp(logits).sum()))
        assert loss == pytest.approx(direct, abs=1e-10)

    def test_out_of_range_target(self):
        with pytest.raises(LabelError):
            cross_entropy(np.zeros(4), 4)
        with pytest.raises(LabelError):
            cross_entropy(np.zeros(4), -1)


class TestCombine:
    def test_zero_weights_leave_only_recognition_loss(self):
        w = LossWeights(0, 0, 0, 0, 0)
        assert combine(3.7, 9, 9, 9, 9, 9, w).total == 3.7

    def test_reference_weights_with_unit_parts(self):
        b = combine(1, 1, 1, 1, 1, 1, LossWeights())
        assert b.total == pytest.approx(1.31, abs=1e-12)

    def test_disabling_accent_domain_terms_matches_reduced_objective(
            self, rng):
        parts = rng.uniform(0.1, 3.0, 6)
        w = LossWeights(eta=0.0, theta=0.0)
        b = combine(*parts, w)
        reduced = (parts[0] + w.alpha * parts[1] + w.beta * parts[2]
                   + w.gamma * parts[3])
        assert b.total == reduced

    def test_breakdown_identity_within_1e12(self, rng):
        w = LossWeights()
        for _ in range(20):
            parts = rng.uniform(0, 5, 6)
            b = combine(*parts, w)
            expect = (b.l_c + w.alpha * b.l_s + w.beta * b.l_m
                      + w.gamma * b.l_e + w.eta * b.l_a + w.theta * b.l_d)
            assert abs(b.total - expect) <= 1e-12

    def test_linear_in_each_part(self, rng):
        w = LossWeights()
        parts = rng.uniform(0.1, 2.0, 6)
        base = combine(*parts, w).total
        bumped = parts.copy()
        bumped[1] *= 3.0
        delta = combine(*bumped, w).total - base
        assert delta == pytest.approx(w.alpha * 2.0 * parts[1], abs=1e-12)

    def test_non_finite_part_is_named(self):
        with pytest.raises(NumericError, match="l_e"):
            combine(1.0, 1.0, 1.0, float("nan"), 1.0, 1.0, LossWeights())
        with pytest.raises(NumericError, match="l_c"):
            combine(float("inf"), 1, 1, 1, 1, 1, LossWeights())

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(alpha=-0.1)


def test_per_layer_auxiliary_losses_are_averaged(rng):
    probs_a = tensor.softmax(rng.normal(size=(6, 4)) * 2)
    probs_b = tensor.softmax(rng.normal(size=(6, 4)) * 2)
    w = LossWeights()
    l_s, l_m, grads = aux_losses_and_grads([probs_a, probs_b], w)
    sa, _ = sparsity_loss(RouterBatch(probs_a))
    sb, _ = sparsity_loss(RouterBatch(probs_b))
    ma, _ = mean_importance_loss(RouterBatch(probs_a))
    mb, _ = mean_importance_loss(RouterBatch(probs_b))
    assert l_s == pytest.approx((sa + sb) / 2, abs=1e-12)
    assert l_m == pytest.approx((ma + mb) / 2, abs=1e-12)
    assert len(grads) == 2


def test_all_loss_gradients_match_finite_differences():
    for seed in range(5):
        for row in check_losses(seed):
            assert row.ok, (row.name, seed, row.max_rel_err)
