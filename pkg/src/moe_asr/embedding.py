"""Shared multi-task embedding network.

A small trunk (input linear + ReLU + two memory layers) produces the
per-frame grapheme embedding e_c. For the augmented variant, e_c is
average-pooled over time and projected into an utterance-level accent
embedding e_a and domain embedding e_d; a grapheme CTC head and
accent/domain classification heads supervise the three embeddings during
training. Routers consume the raw embeddings, not head posteriors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flops, tensor
from .errors import EmptySequenceError, StateError
from .layers import Linear, MemoryLayer


@dataclass
class EmbeddingOutputs:
    e_c: np.ndarray                  # (T, d_c)
    e_a: np.ndarray | None           # (d_a,) utterance-level
    e_d: np.ndarray | None           # (d_d,)
    grapheme_logits: np.ndarray | None   # (T, V+1)
    accent_logits: np.ndarray | None     # (n_accents,)
    domain_logits: np.ndarray | None     # (n_domains,)


@dataclass
class EmbeddingGrads:
    """Upstream gradients on any subset of the six outputs (None = zero)."""

    e_c: np.ndarray | None = None
    e_a: np.ndarray | None = None
    e_d: np.ndarray | None = None
    grapheme_logits: np.ndarray | None = None
    accent_logits: np.ndarray | None = None
    domain_logits: np.ndarray | None = None


class EmbeddingNetwork:
    MOE1 = "moe1"
    MOE2 = "moe2"

    def __init__(self, variant, trunk_in, mem0, mem1, grapheme,
                 accent_proj=None, domain_proj=None,
                 accent_cls=None, domain_cls=None):
        self.variant = variant
        self.trunk_in = trunk_in
        self.mem0 = mem0
        self.mem1 = mem1
        self.grapheme = grapheme
        self.accent_proj = accent_proj
        self.domain_proj = domain_proj
        self.accent_cls = accent_cls
        self.domain_cls = domain_cls

    @classmethod
    def init(cls, rng, variant: str, d_feat: int, d_c: int, order: int,
             vocab_size: int, d_a: int = 0, d_d: int = 0,
             n_accents: int = 0, n_domains: int = 0) -> "EmbeddingNetwork":
        trunk_in = Linear.init(rng, d_feat, d_c)
        mem0 = MemoryLayer.init(d_c, order)
        mem1 = MemoryLayer.init(d_c, order)
        grapheme = Linear.init(rng, d_c, vocab_size + 1)
        if variant == cls.MOE1:
            return cls(variant, trunk_in, mem0, mem1, grapheme)
        return cls(
            variant, trunk_in, mem0, mem1, grapheme,
            accent_proj=Linear.init(rng, d_c, d_a, bias=False),
            domain_proj=Linear.init(rng, d_c, d_d, bias=False),
            accent_cls=Linear.init(rng, d_a, n_accents),
            domain_cls=Linear.init(rng, d_d, n_domains),
        )

    @property
    def d_c(self) -> int:
        return self.trunk_in.w.shape[1]

    def named_params(self, prefix: str):
        yield from self.trunk_in.named_params(prefix + "trunk_in.")
        yield from self.mem0.named_params(prefix + "mem0.")
        yield from self.mem1.named_params(prefix + "mem1.")
        yield from self.grapheme.named_params(prefix + "grapheme.")
        if self.variant == self.MOE2:
            yield from self.accent_proj.named_params(prefix + "accent_proj.")
            yield from self.domain_proj.named_params(prefix + "domain_proj.")
            yield from self.accent_cls.named_params(prefix + "accent_cls.")
            yield from self.domain_cls.named_params(prefix + "domain_cls.")

    def embed(self, frames: np.ndarray, heads: bool = True):
        """Run the trunk (+ pooling/projections for moe2). `heads=False`
        skips the training-only classification heads (the inference path).

        Returns (EmbeddingOutputs, cache)."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise EmptySequenceError(
                f"embedding input must be T x d_feat with T >= 1, "
                f"got shape {frames.shape}")
        t = frames.shape[0]
        e_a = e_d = grapheme_logits = accent_logits = domain_logits = None
        cache = {"t": t}
        with flops.category("embedding"):
            pre, cache["trunk_in"] = self.trunk_in.forward(frames)
            act = tensor.relu(pre)
            cache["pre"] = pre
            m0, cache["mem0"] = self.mem0.forward(act)
            e_c, cache["mem1"] = self.mem1.forward(m0)
            if self.variant == self.MOE2:
                pooled = tensor.mean_over_time(e_c)
                e_a, cache["accent_proj"] = self.accent_proj.forward(pooled)
                e_d, cache["domain_proj"] = self.domain_proj.forward(pooled)
            if heads:
                grapheme_logits, cache["grapheme"] = self.grapheme.forward(e_c)
                if self.variant == self.MOE2:
                    accent_logits, cache["accent_cls"] = \
                        self.accent_cls.forward(e_a)
                    domain_logits, cache["domain_cls"] = \
                        self.domain_cls.forward(e_d)
        return EmbeddingOutputs(e_c, e_a, e_d, grapheme_logits,
                                accent_logits, domain_logits), cache

    def backward(self, grads: EmbeddingGrads, cache, gbuf: dict,
                 prefix: str = "embedding."):
        """Accumulate parameter gradients and return the gradient w.r.t.
        the input frames. Pooling spreads 1/T of the pooled gradient onto
        every frame's e_c row."""
        if cache is None:
            raise StateError("embedding backward called without a cache")
        t = cache["t"]
        ge_c = np.zeros((t, self.d_c))
        if grads.e_c is not None:
            ge_c += grads.e_c
        if grads.grapheme_logits is not None:
            if "grapheme" not in cache:
                raise StateError("grapheme head was not run in forward")
            ge_c += self.grapheme.backward(
                grads.grapheme_logits, cache["grapheme"], gbuf,
                prefix + "grapheme.")
        if self.variant == self.MOE2:
            ge_a = np.zeros(self.accent_proj.w.shape[1])
            ge_d = np.zeros(self.domain_proj.w.shape[1])
            if grads.e_a is not None:
                ge_a += grads.e_a
            if grads.e_d is not None:
                ge_d += grads.e_d
            if grads.accent_logits is not None:
                ge_a += self.accent_cls.backward(
                    grads.accent_logits, cache["accent_cls"], gbuf,
                    prefix + "accent_cls.")
            if grads.domain_logits is not None:
                ge_d += self.domain_cls.backward(
                    grads.domain_logits, cache["domain_cls"], gbuf,
                    prefix + "domain_cls.")
            gpooled = self.accent_proj.backward(
                ge_a, cache["accent_proj"], gbuf, prefix + "accent_proj.")
            gpooled += self.domain_proj.backward(
                ge_d, cache["domain_proj"], gbuf, prefix + "domain_proj.")
            ge_c += tensor.mean_over_time_backward(gpooled, t)
        gm0 = self.mem1.backward(ge_c, cache["mem1"], gbuf, prefix + "mem1.")
        gact = self.mem0.backward(gm0, cache["mem0"], gbuf, prefix + "mem0.")
        gpre = tensor.relu_backward(gact, cache["pre"])
        return self.trunk_in.backward(gpre, cache["trunk_in"], gbuf,
                                      prefix + "trunk_in.")
