"""Training and evaluation: the plain (single-process) training step used
as the reference engine, loss assembly shared with the parallel simulator,
the SGD loop driving the simulator, per-step metrics, and evaluation with
greedy CTC decoding.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .checkpoint import save_checkpoint
from .config import MOE2, ModelConfig
from .data import Utterance
from .embedding import EmbeddingGrads
from .errors import ConfigError, NumericError
from .losses import (LossBreakdown, LossWeights, RouterBatch, combine,
                     cross_entropy, ctc_loss, ctc_min_frames,
                     mean_importance_loss, sparsity_loss)
from .model import Model, UtteranceRun, build_model

log = logging.getLogger("moe_asr")

METRICS_HEADER = "step,l_c,l_s,l_m,l_e,l_a,l_d,total,util_entropy_mean"


# ----------------------------------------------------------------------
# loss assembly (shared by the plain step and the parallel simulator)

@dataclass
class TaskLosses:
    """Per-utterance task losses and the gradients needed for backward,
    already scaled by the loss weights and the 1/batch factor."""

    l_c: float
    l_e: float
    l_a: float
    l_d: float
    d_logits: np.ndarray
    emb_grads: EmbeddingGrads


def utterance_task_losses(run: UtteranceRun, utt: Utterance,
                          weights: LossWeights, batch_size: int,
                          variant: str) -> TaskLosses:
    """CTC on the backbone output, CTC on the embedding grapheme head, and
    accent/domain cross-entropy (augmented variant only)."""
    inv_b = 1.0 / batch_size
    log_probs = tensor.log_softmax(run.logits)
    l_c, g_lp = ctc_loss(log_probs, utt.labels)
    d_logits = tensor.log_softmax_backward(inv_b * g_lp, log_probs)

    emb_lp = tensor.log_softmax(run.emb.grapheme_logits)
    l_e, g_elp = ctc_loss(emb_lp, utt.labels)
    g_grapheme = tensor.log_softmax_backward(
        weights.gamma * inv_b * g_elp, emb_lp)

    l_a = l_d = 0.0
    g_accent = g_domain = None
    if variant == MOE2:
        l_a, g_a = cross_entropy(run.emb.accent_logits, utt.accent_id)
        l_d, g_d = cross_entropy(run.emb.domain_logits, utt.domain_id)
        g_accent = weights.eta * inv_b * g_a
        g_domain = weights.theta * inv_b * g_d
    return TaskLosses(l_c, l_e, l_a, l_d, d_logits,
                      EmbeddingGrads(grapheme_logits=g_grapheme,
                                     accent_logits=g_accent,
                                     domain_logits=g_domain))


def aux_losses_and_grads(layer_probs: list[np.ndarray],
                         weights: LossWeights):
    """Sparsity + mean-importance over each layer's gathered probabilities,
    averaged across layers. Returns (l_s, l_m, per-layer combined gradient
    w.r.t. the probabilities, already scaled by alpha/L and beta/L)."""
    n_layers = len(layer_probs)
    l_s_sum = 0.0
    l_m_sum = 0.0
    grads = []
    for probs in layer_probs:
        rb = RouterBatch(probs)
        v_s, g_s = sparsity_loss(rb)
        v_m, g_m = mean_importance_loss(rb)
        l_s_sum += v_s
        l_m_sum += v_m
        grads.append((weights.alpha / n_layers) * g_s
                     + (weights.beta / n_layers) * g_m)
    return l_s_sum / n_layers, l_m_sum / n_layers, grads


def utilization_histogram(selected_per_layer: list[np.ndarray],
                          n_experts: int) -> np.ndarray:
    """Counts of routed frames per (MoE layer, expert)."""
    util = np.zeros((len(selected_per_layer), n_experts), dtype=np.int64)
    for l, sel in enumerate(selected_per_layer):
        np.add.at(util[l], sel, 1)
    return util


def utilization_entropy(util: np.ndarray) -> float:
    """Mean over layers of the expert-usage entropy (nats)."""
    ents = []
    for row in util:
        total = row.sum()
        if total == 0:
            ents.append(0.0)
            continue
        p = row[row > 0] / total
        ents.append(float(-(p * np.log(p)).sum()))
    return float(np.mean(ents))


# ----------------------------------------------------------------------
# plain training step (the single-worker reference engine)

@dataclass
class StepResult:
    breakdown: LossBreakdown
    util: np.ndarray                  # (n_moe_layers, n_experts) counts
    gbuf: dict
    router_batches: list[np.ndarray]  # per layer, global (k, n) probs


def train_step(model: Model, batch: list[Utterance]) -> StepResult:
    """One forward+backward over `batch`: auxiliary losses are computed on
    the concatenation of all utterances' router probabilities, task losses
    are averaged over utterances, gradients accumulate in batch order."""
    c = model.config
    w = c.weights
    n_layers = model.n_moe_layers
    runs = [model.forward_utterance(u.frames) for u in batch]

    layer_probs = [np.concatenate([r.moe_probs[l] for r in runs], axis=0)
                   for l in range(n_layers)]
    l_s, l_m, aux_grads = aux_losses_and_grads(layer_probs, w)

    tasks = [utterance_task_losses(r, u, w, len(batch), c.router_variant)
             for r, u in zip(runs, batch)]
    l_c = sum(t.l_c for t in tasks) / len(batch)
    l_e = sum(t.l_e for t in tasks) / len(batch)
    l_a = sum(t.l_a for t in tasks) / len(batch)
    l_d = sum(t.l_d for t in tasks) / len(batch)
    breakdown = combine(l_c, l_s, l_m, l_e, l_a, l_d, w)

    gbuf = model.zero_grad_buffer()
    offset = 0
    for run, task in zip(runs, tasks):
        t = run.frames.shape[0]
        aux_slices = {l: aux_grads[l][offset:offset + t]
                      for l in range(n_layers)}
        model.backward_utterance(run, task.d_logits, gbuf,
                                 aux_prob_grads=aux_slices,
                                 emb_grads=task.emb_grads)
        offset += t

    selected = [np.concatenate([r.moe_selected[l] for r in runs])
                for l in range(n_layers)]
    util = utilization_histogram(selected, c.n_experts)
    return StepResult(breakdown, util, gbuf, layer_probs)


def apply_sgd(model: Model, gbuf: dict, lr: float,
              clip: float = 0.0) -> None:
    """Plain SGD update. `clip` > 0 rescales the whole gradient buffer to
    that global L2 norm when exceeded; rare CTC spike batches otherwise
    destroy the weights in a single step."""
    scale = 1.0
    if clip > 0:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in gbuf.values()))
        if norm > clip:
            scale = clip / norm
    for name, p in model.named_parameters():
        p -= lr * scale * gbuf[name]


# ----------------------------------------------------------------------
# training loop

@dataclass
class StepMetrics:
    step: int
    breakdown: LossBreakdown
    util: np.ndarray
    util_entropy_mean: float

    def csv_row(self) -> str:
        b = self.breakdown
        vals = [b.l_c, b.l_s, b.l_m, b.l_e, b.l_a, b.l_d, b.total,
                self.util_entropy_mean]
        return f"{self.step}," + ",".join(repr(v) for v in vals)


@dataclass
class TrainMetrics:
    flops_per_second_input: int
    steps: list[StepMetrics] = field(default_factory=list)
    wall_time: float = 0.0


@dataclass
class TrainResult:
    model: Model
    metrics: TrainMetrics
    checkpoint_path: str | None = None
    metrics_path: str | None = None


def check_corpus(config: ModelConfig, corpus: list[Utterance]) -> None:
    if not corpus:
        raise ConfigError("corpus is empty")
    for u in corpus:
        if u.frames.shape[1] != config.d_feat:
            raise ConfigError(
                f"utterance {u.utt_id}: d_feat {u.frames.shape[1]} != "
                f"config d_feat {config.d_feat}")
        if len(u.labels) and int(np.max(u.labels)) >= config.vocab_size:
            raise ConfigError(
                f"utterance {u.utt_id}: label >= vocab_size "
                f"{config.vocab_size}")
        if u.domain_id >= config.n_domains or u.accent_id >= config.n_accents:
            raise ConfigError(
                f"utterance {u.utt_id}: domain/accent id outside config "
                f"range")
        if u.t < ctc_min_frames(u.labels):
            raise ConfigError(
                f"utterance {u.utt_id}: {len(u.labels)} labels cannot "
                f"align within {u.t} frames")


def train(config: ModelConfig, corpus: list[Utterance],
          out_dir=None) -> TrainResult:
    """SGD over seeded shuffled batches, executed through the parallel
    simulator (n_workers=1 degenerates to a single worker). Writes
    metrics.csv (one row per step) and checkpoint.bin when out_dir is
    given; metric streams are byte-identical for a fixed seed."""
    from . import flops as _flops
    from .parallel import make_shards, step_parallel

    check_corpus(config, corpus)
    model = build_model(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    metrics = TrainMetrics(
        flops_per_second_input=_flops.count_flops(config).total)
    csv_file = None
    ckpt_path = metrics_path = None
    if out_dir is not None:
        import os
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        ckpt_path = os.path.join(out_dir, "checkpoint.bin")
        csv_file = open(metrics_path, "w", encoding="utf-8")
        csv_file.write(METRICS_HEADER + "\n")
    started = time.monotonic()
    order: list[int] = []
    try:
        for step in range(config.steps):
            while len(order) < config.batch_size:
                order.extend(rng.permutation(len(corpus)).tolist())
            batch = [corpus[i] for i in order[:config.batch_size]]
            order = order[config.batch_size:]
            shards = make_shards(batch, config.n_experts, config.n_workers)
            try:
                result = step_parallel(model, shards)
            except NumericError as exc:
                raise NumericError(f"divergence at step {step}: {exc}") \
                    from exc
            apply_sgd(model, result.gbuf, config.learning_rate,
                      config.grad_clip)
            sm = StepMetrics(step, result.breakdown, result.util,
                             utilization_entropy(result.util))
            metrics.steps.append(sm)
            if csv_file is not None:
                csv_file.write(sm.csv_row() + "\n")
            if step % 50 == 0:
                log.info("step %d: total %.4f (l_c %.4f)", step,
                         result.breakdown.total, result.breakdown.l_c)
    finally:
        if csv_file is not None:
            csv_file.close()
    metrics.wall_time = time.monotonic() - started
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, model, step=config.steps, rng=rng)
    return TrainResult(model, metrics, ckpt_path, metrics_path)


# ----------------------------------------------------------------------
# evaluation

def greedy_decode(logits: np.ndarray, blank: int) -> list[int]:
    """Best path decode: frame-wise argmax, collapse repeats, drop blanks."""
    best = np.argmax(logits, axis=1)
    out = []
    prev = -1
    for b in best:
        if b != prev and b != blank:
            out.append(int(b))
        prev = b
    return out


def edit_distance(a, b) -> int:
    """Levenshtein distance between two token sequences."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


@dataclass
class GroupStats:
    count: int = 0
    ctc_sum: float = 0.0
    edits: int = 0
    ref_tokens: int = 0

    @property
    def mean_ctc(self) -> float:
        return self.ctc_sum / self.count if self.count else 0.0

    @property
    def token_error_rate(self) -> float:
        return self.edits / self.ref_tokens if self.ref_tokens else 0.0

    def as_dict(self) -> dict:
        return {"count": self.count, "mean_ctc": self.mean_ctc,
                "token_error_rate": self.token_error_rate}


@dataclass
class EvalReport:
    overall: GroupStats
    by_domain: dict[int, GroupStats]
    by_accent: dict[int, GroupStats]
    util_by_domain: np.ndarray       # (layers, domains, experts) counts
    util_by_accent: np.ndarray       # (layers, accents, experts) counts

    def entropy_by_domain(self) -> np.ndarray:
        """Expert-usage entropy per (layer, domain)."""
        return _group_entropy(self.util_by_domain)

    def entropy_by_accent(self) -> np.ndarray:
        return _group_entropy(self.util_by_accent)

    def as_dict(self) -> dict:
        return {
            "overall": self.overall.as_dict(),
            "by_domain": {k: v.as_dict()
                          for k, v in sorted(self.by_domain.items())},
            "by_accent": {k: v.as_dict()
                          for k, v in sorted(self.by_accent.items())},
            "util_by_domain": self.util_by_domain.tolist(),
            "util_by_accent": self.util_by_accent.tolist(),
            "entropy_by_domain": self.entropy_by_domain().tolist(),
            "entropy_by_accent": self.entropy_by_accent().tolist(),
        }


def _group_entropy(util: np.ndarray) -> np.ndarray:
    layers, groups, _ = util.shape
    ent = np.zeros((layers, groups))
    for l in range(layers):
        for g in range(groups):
            total = util[l, g].sum()
            if total:
                p = util[l, g][util[l, g] > 0] / total
                ent[l, g] = -(p * np.log(p)).sum()
    return ent


def evaluate(model: Model, corpus: list[Utterance]) -> EvalReport:
    """Mean CTC loss and greedy-decode token error rate, broken down by
    domain and accent, plus per-layer expert-utilization by group."""
    c = model.config
    check_corpus(c, corpus)
    blank = c.vocab_size
    overall = GroupStats()
    by_domain: dict[int, GroupStats] = {}
    by_accent: dict[int, GroupStats] = {}
    util_dom = np.zeros((c.n_moe_layers, c.n_domains, c.n_experts),
                        dtype=np.int64)
    util_acc = np.zeros((c.n_moe_layers, c.n_accents, c.n_experts),
                        dtype=np.int64)
    for u in corpus:
        run = model.forward_utterance(u.frames, heads=False)
        log_probs = tensor.log_softmax(run.logits)
        loss, _ = ctc_loss(log_probs, u.labels)
        hyp = greedy_decode(run.logits, blank)
        edits = edit_distance(hyp, u.labels.tolist())
        for stats in (overall,
                      by_domain.setdefault(u.domain_id, GroupStats()),
                      by_accent.setdefault(u.accent_id, GroupStats())):
            stats.count += 1
            stats.ctc_sum += loss
            stats.edits += edits
            stats.ref_tokens += len(u.labels)
        for l, sel in enumerate(run.moe_selected):
            np.add.at(util_dom[l, u.domain_id], sel, 1)
            np.add.at(util_acc[l, u.accent_id], sel, 1)
    return EvalReport(overall, by_domain, by_accent, util_dom, util_acc)
