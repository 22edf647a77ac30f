"""Network building blocks: expert FFNs, top-1 routed MoE layers (baseline
and embedding-augmented router variants), bidirectional tap-delay memory
layers, and single-head self-attention.

Every layer follows the same contract: `forward(...)` returns its outputs
plus an explicit cache object, and `backward(...)` consumes that cache,
accumulates parameter gradients into a caller-owned dict (keyed by
`prefix` + local parameter name), and returns input gradients. Caches are
never stored on the instance, so many utterances can be in flight against
one parameter set; a forward/backward pair for one utterance is
single-threaded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flops, tensor
from .errors import ConfigError, DimensionError, StateError

def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
           gain: float = 1.0) -> np.ndarray:
    r = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


def _affine(x: np.ndarray, w: np.ndarray, b) -> np.ndarray:
    y = tensor.matmul(x, w)
    if b is not None:
        flops.add(y.size)
        y = y + b
    return y


def _require_cache(cache, what: str):
    if cache is None:
        raise StateError(f"{what}: backward called without a forward cache")
    return cache


class Linear:
    """y = x @ w (+ b). Accepts rank-1 or rank-2 inputs."""

    def __init__(self, w: np.ndarray, b=None):
        self.w = w
        self.b = b

    @classmethod
    def init(cls, rng, d_in: int, d_out: int, bias: bool = True,
             gain: float = 1.0) -> "Linear":
        w = glorot(rng, (d_in, d_out), d_in, d_out, gain)
        return cls(w, np.zeros(d_out) if bias else None)

    def named_params(self, prefix: str):
        yield prefix + "w", self.w
        if self.b is not None:
            yield prefix + "b", self.b

    def forward(self, x: np.ndarray):
        return _affine(x, self.w, self.b), x

    def backward(self, gy: np.ndarray, cache, gbuf: dict, prefix: str):
        x = _require_cache(cache, "linear")
        if x.ndim == 1:
            gbuf[prefix + "w"] += np.outer(x, gy)
            if self.b is not None:
                gbuf[prefix + "b"] += gy
            return self.w @ gy
        gbuf[prefix + "w"] += x.T @ gy
        if self.b is not None:
            gbuf[prefix + "b"] += gy.sum(axis=0)
        return gy @ self.w.T


class Expert:
    """Two-layer FFN with ReLU: d_in -> hidden -> d_out."""

    def __init__(self, w1, b1, w2, b2):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def init(cls, rng, d_in: int, hidden: int, d_out: int) -> "Expert":
        return cls(
            glorot(rng, (d_in, hidden), d_in, hidden),
            np.zeros(hidden),
            glorot(rng, (hidden, d_out), hidden, d_out),
            np.zeros(d_out),
        )

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    def named_params(self, prefix: str):
        yield prefix + "w1", self.w1
        yield prefix + "b1", self.b1
        yield prefix + "w2", self.w2
        yield prefix + "b2", self.b2

    def forward(self, xs: np.ndarray):
        """Evaluate a group of frames (m x d_in) -> (m x d_out, cache)."""
        with flops.default_category("expert"):
            pre = _affine(xs, self.w1, self.b1)
            h = tensor.relu(pre)
            ys = _affine(h, self.w2, self.b2)
        return ys, (xs, pre, h)

    def backward(self, gys: np.ndarray, cache, gbuf: dict, prefix: str):
        xs, pre, h = _require_cache(cache, "expert")
        gbuf[prefix + "w2"] += h.T @ gys
        gbuf[prefix + "b2"] += gys.sum(axis=0)
        gh = gys @ self.w2.T
        gpre = tensor.relu_backward(gh, pre)
        gbuf[prefix + "w1"] += xs.T @ gpre
        gbuf[prefix + "b1"] += gpre.sum(axis=0)
        return gpre @ self.w1.T


@dataclass
class RouterDecision:
    """Per-frame routing record: full probability vector, the argmax expert
    (lowest index on exact ties), and its probability (the gate)."""

    probs: np.ndarray
    selected: int
    gate: float


class Router:
    """Linear router over concat(grapheme emb [, accent emb, domain emb],
    previous-layer output), softmaxed into expert probabilities."""

    BASELINE = "baseline"
    AUGMENTED = "augmented"

    def __init__(self, weight: np.ndarray, variant: str,
                 dims: tuple[int, int, int, int]):
        if variant not in (self.BASELINE, self.AUGMENTED):
            raise ConfigError(f"unknown router variant: {variant!r}")
        self.w = weight
        self.variant = variant
        self.d_c, self.d_a, self.d_d, self.d_in = dims
        expect = self.d_c + self.d_in
        if variant == self.AUGMENTED:
            expect += self.d_a + self.d_d
        if weight.shape[0] != expect:
            raise DimensionError(
                f"router weight rows {weight.shape[0]} != routing input "
                f"width {expect} for variant {variant}")

    @classmethod
    def init(cls, rng, variant: str, d_c: int, d_a: int, d_d: int,
             d_in: int, n_experts: int) -> "Router":
        d_route = d_c + d_in + (d_a + d_d if variant == cls.AUGMENTED else 0)
        w = glorot(rng, (d_route, n_experts), d_route, n_experts,
                   gain=1.0)
        return cls(w, variant, (d_c, d_a, d_d, d_in))

    @property
    def n_experts(self) -> int:
        return self.w.shape[1]

    def named_params(self, prefix: str):
        yield prefix + "w", self.w

    def _check_embeddings(self, e_a, e_d):
        if self.variant == self.AUGMENTED:
            if e_a is None or e_d is None:
                raise ConfigError(
                    "augmented router requires accent and domain embeddings")
        elif e_a is not None or e_d is not None:
            raise ConfigError(
                "baseline router takes no accent/domain embeddings")

    def routing_input(self, e_c, e_a, e_d, o_prev) -> np.ndarray:
        """Concatenated per-frame router input (works on single frames and
        on T x d batches; utterance-level e_a/e_d are broadcast over T)."""
        self._check_embeddings(e_a, e_d)
        parts = [np.asarray(e_c, dtype=np.float64)]
        if self.variant == self.AUGMENTED:
            e_a = np.asarray(e_a, dtype=np.float64)
            e_d = np.asarray(e_d, dtype=np.float64)
            if parts[0].ndim == 2:
                t = parts[0].shape[0]
                e_a = np.broadcast_to(e_a, (t, e_a.shape[-1]))
                e_d = np.broadcast_to(e_d, (t, e_d.shape[-1]))
            parts.extend([e_a, e_d])
        parts.append(np.asarray(o_prev, dtype=np.float64))
        axis = parts[0].ndim - 1
        r = tensor.concat(parts, axis=axis)
        if r.shape[-1] != self.w.shape[0]:
            raise DimensionError(
                f"routing input width {r.shape[-1]} != router weight rows "
                f"{self.w.shape[0]}")
        return r

    def route(self, e_c, e_a, e_d, o_prev) -> RouterDecision:
        """Route a single frame."""
        r = self.routing_input(e_c, e_a, e_d, o_prev)
        with flops.default_category("router"):
            logits = tensor.matmul(r, self.w)
            probs = tensor.softmax(logits)
        selected = int(np.argmax(probs))
        return RouterDecision(probs, selected, float(probs[selected]))

    def route_batch(self, e_c, e_a, e_d, o_prev):
        """Route all frames of an utterance at once.

        Returns (probs T x n, selected T, gates T, cache)."""
        r = self.routing_input(e_c, e_a, e_d, o_prev)
        with flops.default_category("router"):
            logits = tensor.matmul(r, self.w)
            probs = tensor.softmax(logits)
        selected = np.argmax(probs, axis=1)
        gates = probs[np.arange(probs.shape[0]), selected]
        return probs, selected, gates, r

    def backward(self, gprobs: np.ndarray, probs: np.ndarray,
                 routing_input: np.ndarray, gbuf: dict, prefix: str):
        """From d(loss)/d(probs) back to the weight and the input slices.

        Returns (ge_c, ge_a, ge_d, go_prev); e_a/e_d gradients are summed
        over frames (they are utterance-level), None for the baseline."""
        glogits = tensor.softmax_backward(gprobs, probs)
        gbuf[prefix + "w"] += routing_input.T @ glogits
        gr = glogits @ self.w.T
        ge_c = gr[:, :self.d_c]
        col = self.d_c
        ge_a = ge_d = None
        if self.variant == self.AUGMENTED:
            ge_a = gr[:, col:col + self.d_a].sum(axis=0)
            col += self.d_a
            ge_d = gr[:, col:col + self.d_d].sum(axis=0)
            col += self.d_d
        return ge_c, ge_a, ge_d, gr[:, col:].copy()


@dataclass
class MoECache:
    x: np.ndarray
    probs: np.ndarray
    selected: np.ndarray
    gates: np.ndarray
    raw: np.ndarray                 # ungated expert outputs, frame order
    expert_groups: dict | None      # expert -> (frame indices, expert cache)
    routing_input: np.ndarray


class MoELayer:
    """n experts plus a router; each frame is processed by exactly the
    top-1 expert and the result is scaled by that expert's probability."""

    def __init__(self, layer_index: int, experts: list[Expert], router: Router):
        if not experts:
            raise ConfigError("MoE layer needs at least one expert")
        if router.n_experts != len(experts):
            raise DimensionError(
                f"router scores {router.n_experts} experts but layer has "
                f"{len(experts)}")
        self.layer_index = layer_index
        self.experts = experts
        self.router = router

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def named_params(self, prefix: str):
        yield from self.router.named_params(prefix + "router.")
        for i, e in enumerate(self.experts):
            yield from e.named_params(prefix + f"experts.{i}.")

    def forward(self, x: np.ndarray, e_c: np.ndarray, e_a=None, e_d=None):
        """Returns (outputs T x d_out, per-frame RouterDecision list, cache).

        Only the selected expert runs for each frame; frames sharing an
        expert are evaluated as one group."""
        probs, selected, gates, rin = self.router.route_batch(e_c, e_a, e_d, x)
        t = x.shape[0]
        raw = np.empty((t, self.experts[0].d_out))
        groups = {}
        for e in np.unique(selected):
            idx = np.flatnonzero(selected == e)
            ys, ec = self.experts[e].forward(x[idx])
            raw[idx] = ys
            groups[int(e)] = (idx, ec)
        with flops.default_category("gate"):
            flops.add(raw.size)
            y = gates[:, None] * raw
        decisions = [RouterDecision(probs[i], int(selected[i]), float(gates[i]))
                     for i in range(t)]
        cache = MoECache(x, probs, selected, gates, raw, groups, rin)
        return y, decisions, cache

    def backward_routing(self, gy: np.ndarray, cache: MoECache, gbuf: dict,
                         prefix: str, aux_prob_grad=None):
        """Everything except the expert FFN backward: gate and router paths.

        Returns (gx_router T x d_in, ge_c, ge_a, ge_d, graw T x d_out) where
        graw is the gradient to feed each frame's selected expert."""
        c = _require_cache(cache, "moe")
        graw = gy * c.gates[:, None]
        dgate = np.sum(gy * c.raw, axis=1)
        gp = np.zeros_like(c.probs) if aux_prob_grad is None \
            else aux_prob_grad.copy()
        gp[np.arange(gp.shape[0]), c.selected] += dgate
        ge_c, ge_a, ge_d, gx = self.router.backward(
            gp, c.probs, c.routing_input, gbuf, prefix + "router.")
        return gx, ge_c, ge_a, ge_d, graw

    def backward(self, gy: np.ndarray, cache: MoECache, gbuf: dict,
                 prefix: str, aux_prob_grad=None):
        """Full backward. Returns (gx, ge_c, ge_a, ge_d)."""
        gx, ge_c, ge_a, ge_d, graw = self.backward_routing(
            gy, cache, gbuf, prefix, aux_prob_grad)
        c = cache
        for e in sorted(c.expert_groups):
            idx, ec = c.expert_groups[e]
            gxs = self.experts[e].backward(
                graw[idx], ec, gbuf, prefix + f"experts.{e}.")
            gx[idx] += gxs
        return gx, ge_c, ge_a, ge_d


class MemoryLayer:
    """Bidirectional tap-delay FIR block with a residual connection:
    out[t] = sum_tau taps[tau] * in[t+tau] + in[t], tau in [-order, order],
    zero-padded at the sequence boundaries. taps row j holds tau = j - order.
    """

    def __init__(self, taps: np.ndarray, order: int):
        if taps.shape[0] != 2 * order + 1:
            raise DimensionError(
                f"memory taps rows {taps.shape[0]} != 2*order+1 "
                f"({2 * order + 1})")
        self.taps = taps
        self.order = order

    @classmethod
    def init(cls, d: int, order: int) -> "MemoryLayer":
        # zero taps: the layer starts as the identity (pure residual)
        return cls(np.zeros((2 * order + 1, d)), order)

    def named_params(self, prefix: str):
        yield prefix + "taps", self.taps

    def forward(self, x: np.ndarray):
        t, d = x.shape
        o = self.order
        with flops.default_category("memory"):
            pad = np.zeros((t + 2 * o, d))
            pad[o:o + t] = x
            acc = np.zeros((t, d))
            for j in range(2 * o + 1):
                flops.add(2 * t * d)
                acc += self.taps[j] * pad[j:j + t]
            flops.add(t * d)
            y = acc + x
        return y, (x, pad)

    def backward(self, gy: np.ndarray, cache, gbuf: dict, prefix: str):
        x, pad = _require_cache(cache, "memory")
        t, d = x.shape
        o = self.order
        gtaps = np.empty_like(self.taps)
        gpad = np.zeros_like(pad)
        for j in range(2 * o + 1):
            gtaps[j] = np.sum(gy * pad[j:j + t], axis=0)
            gpad[j:j + t] += self.taps[j] * gy
        gbuf[prefix + "taps"] += gtaps
        return gy + gpad[o:o + t]


class AttentionLayer:
    """Single-head scaled dot-product self-attention over the full sequence,
    with a residual connection."""

    def __init__(self, wq, wk, wv, wo):
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self.d_att = wq.shape[1]

    @classmethod
    def init(cls, rng, d: int, d_att: int) -> "AttentionLayer":
        return cls(
            glorot(rng, (d, d_att), d, d_att),
            glorot(rng, (d, d_att), d, d_att),
            glorot(rng, (d, d_att), d, d_att),
            glorot(rng, (d_att, d), d_att, d),
        )

    def named_params(self, prefix: str):
        yield prefix + "wq", self.wq
        yield prefix + "wk", self.wk
        yield prefix + "wv", self.wv
        yield prefix + "wo", self.wo

    def forward(self, x: np.ndarray):
        t = x.shape[0]
        with flops.default_category("attention"):
            q = tensor.matmul(x, self.wq)
            k = tensor.matmul(x, self.wk)
            v = tensor.matmul(x, self.wv)
            scores = tensor.matmul(q, k.T)
            flops.add(t * t)
            scaled = scores / np.sqrt(self.d_att)
            attn = tensor.softmax(scaled)
            ctx = tensor.matmul(attn, v)
            out = tensor.matmul(ctx, self.wo)
            flops.add(out.size)
            y = out + x
        return y, (x, q, k, v, attn, ctx)

    def backward(self, gy: np.ndarray, cache, gbuf: dict, prefix: str):
        x, q, k, v, attn, ctx = _require_cache(cache, "attention")
        gbuf[prefix + "wo"] += ctx.T @ gy
        gctx = gy @ self.wo.T
        gattn = gctx @ v.T
        gv = attn.T @ gctx
        gscaled = tensor.softmax_backward(gattn, attn)
        gscores = gscaled / np.sqrt(self.d_att)
        gq = gscores @ k
        gk = gscores.T @ q
        gx = gy.copy()
        gbuf[prefix + "wq"] += x.T @ gq
        gx += gq @ self.wq.T
        gbuf[prefix + "wk"] += x.T @ gk
        gx += gk @ self.wk.T
        gbuf[prefix + "wv"] += x.T @ gv
        gx += gv @ self.wv.T
        return gx
