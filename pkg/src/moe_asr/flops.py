"""FLOP accounting: a runtime trace counter fed by the tensor primitives,
and an analytic per-config count for the inference forward pass.

Convention (shared by trace and analytic sides so numbers are comparable):
a multiply-add pair costs 2 FLOPs (matmul m x k x n = 2*m*k*n), standalone
elementwise add/sub/mul/div cost 1 per element, exp/log/sqrt cost 1 per
element, comparisons/argmax/relu are free. The analytic count covers the
inference path only: embedding trunk + pooling + router projections plus
the backbone stack; training-only classification heads are excluded.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, fields

# Reference frame rate for "FLOPs per one-second input". The synthetic
# frames carry no physical rate, so one second is defined as 100 frames.
FRAMES_PER_SECOND = 100

_active_counter = None
_category_stack = ["other"]


class FlopCounter:
    """Accumulates FLOPs reported by tensor primitives, keyed by category."""

    def __init__(self):
        self.by_category: dict[str, int] = {}

    def add(self, n: int) -> None:
        cat = _category_stack[-1]
        self.by_category[cat] = self.by_category.get(cat, 0) + n

    @property
    def total(self) -> int:
        return sum(self.by_category.values())

    def get(self, category: str) -> int:
        return self.by_category.get(category, 0)


def add(n: int) -> None:
    """Report n FLOPs to the active counter, if any. Called by tensor ops."""
    if _active_counter is not None:
        _active_counter.add(n)


def active() -> bool:
    return _active_counter is not None


@contextmanager
def trace(counter: FlopCounter):
    """Activate a counter for the duration of the block."""
    global _active_counter
    prev = _active_counter
    _active_counter = counter
    try:
        yield counter
    finally:
        _active_counter = prev


@contextmanager
def category(name: str):
    """Attribute FLOPs reported inside the block to `name`."""
    _category_stack.append(name)
    try:
        yield
    finally:
        _category_stack.pop()


@contextmanager
def default_category(name: str):
    """Like `category`, but yields to an enclosing explicit label. Layers
    self-tag with this so e.g. a memory layer inside the embedding trunk is
    attributed to "embedding" while a backbone memory layer keeps its tag."""
    if _category_stack[-1] != "other":
        yield
        return
    _category_stack.append(name)
    try:
        yield
    finally:
        _category_stack.pop()


@dataclass
class FlopsReport:
    """Analytic FLOPs for one utterance of `frames` frames, by component."""

    frames: int
    expert: int
    gate: int
    router: int
    memory: int
    attention: int
    linear: int
    embedding: int

    @property
    def total(self) -> int:
        return (self.expert + self.gate + self.router + self.memory
                + self.attention + self.linear + self.embedding)

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["total"] = self.total
        return d


def matmul_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def softmax_flops(rows: int, n: int) -> int:
    # subtract max (n) + exp (n) + sum (n-1) + divide (n)
    return rows * (4 * n - 1)


def linear_flops(rows: int, d_in: int, d_out: int, bias: bool = True) -> int:
    return matmul_flops(rows, d_in, d_out) + (rows * d_out if bias else 0)


def memory_flops(frames: int, d: int, order: int) -> int:
    # per tap: multiply + accumulate over T*d, plus the residual add
    taps = 2 * order + 1
    return taps * 2 * frames * d + frames * d


def attention_flops(frames: int, d: int, d_att: int) -> int:
    t = frames
    proj = 3 * matmul_flops(t, d, d_att)
    scores = matmul_flops(t, d_att, t) + t * t          # q k^T then scale
    sm = softmax_flops(t, t)
    ctx = matmul_flops(t, t, d_att)
    out = matmul_flops(t, d_att, d) + t * d             # projection + residual
    return proj + scores + sm + ctx + out


def expert_flops(frames: int, d_in: int, hidden: int, d_out: int) -> int:
    return (linear_flops(frames, d_in, hidden)
            + linear_flops(frames, hidden, d_out))


def router_flops(frames: int, d_route: int, n_experts: int) -> int:
    return (matmul_flops(frames, d_route, n_experts)
            + softmax_flops(frames, n_experts))


def count_flops(config, frames: int = FRAMES_PER_SECOND) -> FlopsReport:
    """Analytic FLOPs to run the inference forward on one utterance of
    `frames` frames. With the default frame count this is the cost of a
    one-second input. Exactly one expert is counted per frame per MoE
    layer, so the expert component is independent of n_experts."""
    t = frames
    if config.n_moe_layers == 0:
        # A stackless config is not a buildable model; by convention its
        # analytic cost is zero.
        return FlopsReport(frames=t, expert=0, gate=0, router=0, memory=0,
                           attention=0, linear=0, embedding=0)

    emb = linear_flops(t, config.d_feat, config.d_c)             # trunk input
    emb += 2 * memory_flops(t, config.d_c, config.memory_order)  # trunk FIR x2
    if config.router_variant == "moe2":
        emb += t * config.d_c                                    # mean pool
        emb += matmul_flops(1, config.d_c, config.d_a)           # e_a
        emb += matmul_flops(1, config.d_c, config.d_d)           # e_d

    expert = config.n_moe_layers * expert_flops(
        t, config.d_model, config.expert_hidden, config.d_model)
    gate = config.n_moe_layers * t * config.d_model
    router = config.n_moe_layers * router_flops(
        t, config.d_route, config.n_experts)
    memory = config.n_memory_layers * memory_flops(
        t, config.d_model, config.memory_order)
    n_attention = config.n_moe_layers // config.attention_every
    attention = n_attention * attention_flops(t, config.d_model, config.d_att)
    linear = (linear_flops(t, config.d_feat, config.d_model)
              + linear_flops(t, config.d_model, config.vocab_size + 1))
    return FlopsReport(frames=t, expert=expert, gate=gate, router=router,
                       memory=memory, attention=attention, linear=linear,
                       embedding=emb)
