"""Central finite-difference verification of every hand-derived backward
pass: tensor primitives, each layer type, the embedding network, the loss
functions, and a whole tiny model through one training step. Used by the
test suite and by the `grad-check` CLI subcommand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .config import ModelConfig
from .embedding import EmbeddingGrads, EmbeddingNetwork
from .layers import AttentionLayer, Expert, Linear, MemoryLayer, MoELayer, Router
from .losses import (LossWeights, RouterBatch, cross_entropy, ctc_loss,
                     mean_importance_loss, sparsity_loss)
from .model import Model
from .train import aux_losses_and_grads, train_step

EPS = 1e-5
TOL = 1e-4


def finite_difference(fn, array: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar fn() w.r.t. `array`, perturbed in
    place element by element."""
    grad = np.zeros_like(array)
    flat = array.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        grad.flat[i] = (hi - lo) / (2 * eps)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray,
                  floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    ok: bool


def _check(name: str, analytic_arrays, fn, param_arrays,
           results: list, eps: float, tol: float) -> None:
    worst = 0.0
    for analytic, param in zip(analytic_arrays, param_arrays):
        numeric = finite_difference(fn, param, eps)
        worst = max(worst, max_rel_error(analytic, numeric))
    results.append(CheckResult(name, worst, worst < tol))


def check_primitives(seed: int, eps: float = EPS,
                     tol: float = TOL) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    a = rng.uniform(-2, 2, (3, 4))
    b = rng.uniform(-2, 2, (4, 2))
    cw = rng.uniform(-1, 1, (3, 2))
    ga, gb = tensor.matmul_backward(cw, a, b)
    _check("tensor.matmul", [ga, gb],
           lambda: float(np.sum(cw * (a @ b))), [a, b], results, eps, tol)

    x = rng.uniform(-2, 2, 6)
    cv = rng.uniform(-1, 1, 6)
    gx = tensor.softmax_backward(cv, tensor.softmax(x))
    _check("tensor.softmax", [gx],
           lambda: float(np.sum(cv * tensor.softmax(x))), [x], results,
           eps, tol)

    gx = tensor.log_softmax_backward(cv, tensor.log_softmax(x))
    _check("tensor.log_softmax", [gx],
           lambda: float(np.sum(cv * tensor.log_softmax(x))), [x], results,
           eps, tol)

    seq = rng.uniform(-2, 2, (5, 3))
    cm = rng.uniform(-1, 1, 3)
    gseq = tensor.mean_over_time_backward(cm, 5)
    _check("tensor.mean_over_time", [gseq],
           lambda: float(np.sum(cm * tensor.mean_over_time(seq))), [seq],
           results, eps, tol)

    # keep relu inputs away from the kink
    xr = rng.uniform(-2, 2, (4, 3))
    xr[np.abs(xr) < 0.05] += 0.1
    cr = rng.uniform(-1, 1, (4, 3))
    gxr = tensor.relu_backward(cr, xr)
    _check("tensor.relu", [gxr],
           lambda: float(np.sum(cr * tensor.relu(xr))), [xr], results,
           eps, tol)

    p1 = rng.uniform(-2, 2, (2, 3))
    p2 = rng.uniform(-2, 2, (2, 2))
    cc = rng.uniform(-1, 1, (2, 5))
    g1, g2 = tensor.concat_backward(cc, [3, 2], axis=1)
    _check("tensor.concat", [g1, g2],
           lambda: float(np.sum(cc * tensor.concat([p1, p2], axis=1))),
           [p1, p2], results, eps, tol)

    u = rng.uniform(-2, 2, (3, 3))
    v = rng.uniform(-2, 2, (3, 3))
    cs = rng.uniform(-1, 1, (3, 3))
    gu, gv = tensor.add_backward(cs)
    _check("tensor.add", [gu, gv],
           lambda: float(np.sum(cs * tensor.add(u, v))), [u, v], results,
           eps, tol)
    gsa, _ = tensor.scale_backward(cs, u, 1.7)
    _check("tensor.scale", [gsa],
           lambda: float(np.sum(cs * tensor.scale(u, 1.7))), [u], results,
           eps, tol)
    return results


def _layer_objective(layer_forward, coeffs) -> float:
    out = layer_forward()
    return float(np.sum(coeffs * out))


def check_layers(seed: int, eps: float = EPS,
                 tol: float = TOL) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []
    t, d, h, d_att, order = 5, 6, 8, 6, 1
    n_experts, d_c, d_a, d_d = 3, 6, 4, 4

    lin = Linear.init(rng, d, h)
    x = rng.uniform(-2, 2, (t, d))
    cw = rng.uniform(-1, 1, (t, h))
    gbuf = {"lin.w": np.zeros_like(lin.w), "lin.b": np.zeros_like(lin.b)}
    y, cache = lin.forward(x)
    gx = lin.backward(cw, cache, gbuf, "lin.")
    _check("layers.linear", [gbuf["lin.w"], gbuf["lin.b"], gx],
           lambda: _layer_objective(lambda: lin.forward(x)[0], cw),
           [lin.w, lin.b, x], results, eps, tol)

    exp = Expert.init(rng, d, h, d)
    ce = rng.uniform(-1, 1, (t, d))
    gbuf = {n: np.zeros_like(p) for n, p in exp.named_params("e.")}
    ys, cache = exp.forward(x)
    gx = exp.backward(ce, cache, gbuf, "e.")
    _check("layers.expert",
           [gbuf["e.w1"], gbuf["e.b1"], gbuf["e.w2"], gbuf["e.b2"], gx],
           lambda: _layer_objective(lambda: exp.forward(x)[0], ce),
           [exp.w1, exp.b1, exp.w2, exp.b2, x], results, eps, tol)

    mem = MemoryLayer(rng.uniform(-0.5, 0.5, (2 * order + 1, d)), order)
    cm = rng.uniform(-1, 1, (t, d))
    gbuf = {"m.taps": np.zeros_like(mem.taps)}
    y, cache = mem.forward(x)
    gx = mem.backward(cm, cache, gbuf, "m.")
    _check("layers.memory", [gbuf["m.taps"], gx],
           lambda: _layer_objective(lambda: mem.forward(x)[0], cm),
           [mem.taps, x], results, eps, tol)

    att = AttentionLayer.init(rng, d, d_att)
    ca = rng.uniform(-1, 1, (t, d))
    gbuf = {n: np.zeros_like(p) for n, p in att.named_params("a.")}
    y, cache = att.forward(x)
    gx = att.backward(ca, cache, gbuf, "a.")
    _check("layers.attention",
           [gbuf["a.wq"], gbuf["a.wk"], gbuf["a.wv"], gbuf["a.wo"], gx],
           lambda: _layer_objective(lambda: att.forward(x)[0], ca),
           [att.wq, att.wk, att.wv, att.wo, x], results, eps, tol)

    # MoE layer: objective touches both the gated output and (through an
    # extra linear term) the full probability vector, which exercises the
    # auxiliary-loss gradient path into the router.
    experts = [Expert.init(rng, d, h, d) for _ in range(n_experts)]
    router = Router.init(rng, Router.AUGMENTED, d_c, d_a, d_d, d, n_experts)
    moe = MoELayer(0, experts, router)
    e_c = rng.uniform(-2, 2, (t, d_c))
    e_a = rng.uniform(-2, 2, d_a)
    e_d = rng.uniform(-2, 2, d_d)
    cy = rng.uniform(-1, 1, (t, d))
    cp = rng.uniform(-1, 1, (t, n_experts))

    def moe_objective() -> float:
        y, _, cache = moe.forward(x, e_c, e_a, e_d)
        return float(np.sum(cy * y) + np.sum(cp * cache.probs))

    gbuf = {n: np.zeros_like(p) for n, p in moe.named_params("moe.")}
    y, _, cache = moe.forward(x, e_c, e_a, e_d)
    gx, ge_c, ge_a, ge_d = moe.backward(cy, cache, gbuf, "moe.",
                                        aux_prob_grad=cp)
    params = [router.w] + [p for e in experts
                           for p in (e.w1, e.b1, e.w2, e.b2)]
    grads = [gbuf["moe.router.w"]] + [
        gbuf[f"moe.experts.{j}.{n}"] for j in range(n_experts)
        for n in ("w1", "b1", "w2", "b2")]
    _check("layers.moe.params", grads, moe_objective, params, results,
           eps, tol)
    _check("layers.moe.inputs", [gx, ge_c, ge_a, ge_d], moe_objective,
           [x, e_c, e_a, e_d], results, eps, tol)
    return results


def check_embedding(seed: int, eps: float = EPS,
                    tol: float = TOL) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []
    t, d_feat, d_c, d_a, d_d, vocab = 5, 4, 6, 3, 3, 3
    net = EmbeddingNetwork.init(rng, "moe2", d_feat, d_c, 1, vocab,
                                d_a, d_d, n_accents=3, n_domains=4)
    # random taps so the memory layers are non-trivial
    net.mem0.taps[...] = rng.uniform(-0.5, 0.5, net.mem0.taps.shape)
    net.mem1.taps[...] = rng.uniform(-0.5, 0.5, net.mem1.taps.shape)
    frames = rng.uniform(-2, 2, (t, d_feat))
    coeffs = {
        "e_c": rng.uniform(-1, 1, (t, d_c)),
        "e_a": rng.uniform(-1, 1, d_a),
        "e_d": rng.uniform(-1, 1, d_d),
        "grapheme_logits": rng.uniform(-1, 1, (t, vocab + 1)),
        "accent_logits": rng.uniform(-1, 1, 3),
        "domain_logits": rng.uniform(-1, 1, 4),
    }

    def objective() -> float:
        out, _ = net.embed(frames)
        return float(sum(np.sum(coeffs[k] * getattr(out, k))
                         for k in coeffs))

    gbuf = {n: np.zeros_like(p) for n, p in net.named_params("embedding.")}
    out, cache = net.embed(frames)
    gframes = net.backward(EmbeddingGrads(**coeffs), cache, gbuf)
    names = [n for n, _ in net.named_params("embedding.")]
    params = [p for _, p in net.named_params("embedding.")]
    _check("embedding.params", [gbuf[n] for n in names], objective, params,
           results, eps, tol)
    _check("embedding.frames", [gframes], objective, [frames], results,
           eps, tol)
    return results


def check_losses(seed: int, eps: float = EPS,
                 tol: float = TOL) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    # CTC directly on the log-prob input
    t, vocab = 6, 3
    log_probs = rng.uniform(-2, 0, (t, vocab + 1))
    labels = [0, 2]
    _, grad = ctc_loss(log_probs, labels)
    _check("losses.ctc.log_probs", [grad],
           lambda: ctc_loss(log_probs, labels)[0], [log_probs], results,
           eps, tol)

    # CTC composed with log-softmax (finite differences on the raw logits)
    logits = rng.uniform(-2, 2, (t, vocab + 1))

    def ctc_on_logits() -> float:
        return ctc_loss(tensor.log_softmax(logits), labels)[0]

    lp = tensor.log_softmax(logits)
    _, g_lp = ctc_loss(lp, labels)
    g_logits = tensor.log_softmax_backward(g_lp, lp)
    _check("losses.ctc.logits", [g_logits], ctc_on_logits, [logits],
           results, eps, tol)

    # router losses through softmax (probabilities live on the simplex, so
    # the chain through a softmax parametrization is the meaningful check)
    z = rng.uniform(-1.5, 1.5, (4, 3))

    def aux_objective(loss_fn):
        def objective() -> float:
            return loss_fn(RouterBatch(tensor.softmax(z)))[0]
        return objective

    for name, loss_fn in (("sparsity", sparsity_loss),
                          ("mean_importance", mean_importance_loss)):
        probs = tensor.softmax(z)
        _, gp = loss_fn(RouterBatch(probs))
        gz = tensor.softmax_backward(gp, probs)
        _check(f"losses.{name}", [gz], aux_objective(loss_fn), [z],
               results, eps, tol)

    logits1 = rng.uniform(-2, 2, 5)
    _, g_ce = cross_entropy(logits1, 2)
    _check("losses.cross_entropy", [g_ce],
           lambda: cross_entropy(logits1, 2)[0], [logits1], results,
           eps, tol)
    return results


def tiny_config(seed: int, variant: str = "moe2") -> ModelConfig:
    return ModelConfig(
        n_moe_layers=2, n_memory_layers=2, attention_every=2, n_experts=3,
        expert_hidden=8, d_feat=5, d_model=6, d_att=6, memory_order=1,
        d_c=6, d_a=4, d_d=4, router_variant=variant, vocab_size=3,
        n_domains=3, n_accents=3, seed=seed, batch_size=2, steps=1)


def check_model(seed: int, eps: float = EPS, tol: float = TOL,
                variant: str = "moe2") -> list[CheckResult]:
    """End-to-end: the full combined loss of one training step against
    finite differences on every model parameter."""
    from .data import SynthConfig, generate

    config = tiny_config(seed, variant)
    model = Model(config)
    synth = SynthConfig(n_domains=3, n_accents=3, vocab_size=3, d_feat=5,
                        t_min=8, t_max=10, label_min=1, label_max=3,
                        seed=seed)
    batch = generate(synth, 2)

    def objective() -> float:
        return train_step(model, batch).breakdown.total

    result = train_step(model, batch)
    names = [n for n, _ in model.named_parameters()]
    params = [p for _, p in model.named_parameters()]
    results: list[CheckResult] = []
    _check(f"model.{variant}.total_loss", [result.gbuf[n] for n in names],
           objective, params, results, eps, tol)
    return results


def run_all_checks(seeds, eps: float = EPS, tol: float = TOL,
                   include_model: bool = True) -> list[CheckResult]:
    results: list[CheckResult] = []
    for seed in seeds:
        for row in (check_primitives(seed, eps, tol)
                    + check_layers(seed, eps, tol)
                    + check_embedding(seed, eps, tol)
                    + check_losses(seed, eps, tol)):
            results.append(CheckResult(f"{row.name}[seed={seed}]",
                                       row.max_rel_err, row.ok))
    if include_model:
        for variant in ("moe2", "moe1"):
            for row in check_model(seeds[0], eps, tol, variant):
                results.append(row)
    return results
