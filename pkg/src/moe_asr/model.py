"""Full model assembly: the embedding network plus a backbone of repeated
(MoE -> memory) pairs with a self-attention layer inserted after every
`attention_every` pairs, between an input projection and a CTC output head.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import flops
from .config import MOE2, ModelConfig
from .embedding import EmbeddingGrads, EmbeddingNetwork, EmbeddingOutputs
from .layers import (AttentionLayer, Expert, Linear, MemoryLayer, MoELayer,
                     Router)

log = logging.getLogger("moe_asr")


@dataclass
class UtteranceRun:
    """Forward-pass state for one utterance, kept so the backward pass (and
    the loss stage) can run later; many runs may be alive at once."""

    frames: np.ndarray
    emb: EmbeddingOutputs
    emb_cache: dict
    input_cache: object
    stack_caches: list
    decisions: list                  # per MoE layer: list[RouterDecision]
    moe_probs: list                  # per MoE layer: (T, n) probabilities
    moe_selected: list               # per MoE layer: (T,) expert indices
    logits: np.ndarray
    head_cache: object


class Model:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
        c = config
        variant = Router.AUGMENTED if c.router_variant == MOE2 \
            else Router.BASELINE
        if c.router_variant == MOE2:
            self.embedding = EmbeddingNetwork.init(
                rng, c.router_variant, c.d_feat, c.d_c, c.memory_order,
                c.vocab_size, c.d_a, c.d_d, c.n_accents, c.n_domains)
        else:
            self.embedding = EmbeddingNetwork.init(
                rng, c.router_variant, c.d_feat, c.d_c, c.memory_order,
                c.vocab_size)
        self.input_proj = Linear.init(rng, c.d_feat, c.d_model)
        self.stack = []
        for pair in range(c.n_moe_layers):
            experts = [Expert.init(rng, c.d_model, c.expert_hidden, c.d_model)
                       for _ in range(c.n_experts)]
            router = Router.init(rng, variant, c.d_c, c.d_a, c.d_d,
                                 c.d_model, c.n_experts)
            self.stack.append(MoELayer(pair, experts, router))
            self.stack.append(MemoryLayer.init(c.d_model, c.memory_order))
            if (pair + 1) % c.attention_every == 0:
                self.stack.append(AttentionLayer.init(rng, c.d_model, c.d_att))
        self.output_head = Linear.init(rng, c.d_model, c.vocab_size + 1)

    # ------------------------------------------------------------------
    # parameters

    def named_parameters(self):
        """(name, array) pairs in the canonical (checkpoint) order."""
        yield from self.embedding.named_params("embedding.")
        yield from self.input_proj.named_params("input_proj.")
        for i, layer in enumerate(self.stack):
            yield from layer.named_params(f"stack.{i}.")
        yield from self.output_head.named_params("output_head.")

    @property
    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def zero_grad_buffer(self) -> dict:
        return {name: np.zeros_like(p) for name, p in self.named_parameters()}

    @property
    def moe_layers(self) -> list[MoELayer]:
        return [l for l in self.stack if isinstance(l, MoELayer)]

    @property
    def n_moe_layers(self) -> int:
        return self.config.n_moe_layers

    # ------------------------------------------------------------------
    # forward / backward over one utterance

    def forward_utterance(self, frames: np.ndarray,
                          heads: bool = True) -> UtteranceRun:
        """Full forward pass. `heads=False` is the inference path (skips
        the training-only embedding heads)."""
        emb, emb_cache = self.embedding.embed(frames, heads=heads)
        with flops.category("linear"):
            x, input_cache = self.input_proj.forward(frames)
        stack_caches = []
        decisions = []
        moe_probs = []
        moe_selected = []
        for layer in self.stack:
            if isinstance(layer, MoELayer):
                x, dec, cache = layer.forward(x, emb.e_c, emb.e_a, emb.e_d)
                decisions.append(dec)
                moe_probs.append(cache.probs)
                moe_selected.append(cache.selected)
            else:
                x, cache = layer.forward(x)
            stack_caches.append(cache)
        with flops.category("linear"):
            logits, head_cache = self.output_head.forward(x)
        return UtteranceRun(frames, emb, emb_cache, input_cache,
                            stack_caches, decisions, moe_probs, moe_selected,
                            logits, head_cache)

    def backward_utterance(self, run: UtteranceRun, d_logits: np.ndarray,
                           gbuf: dict, aux_prob_grads=None,
                           emb_grads: EmbeddingGrads | None = None) -> None:
        """Accumulate gradients for one utterance into `gbuf`.

        `aux_prob_grads` maps MoE ordinal -> (T, n) gradient w.r.t. that
        layer's router probabilities (the auxiliary-loss path);
        `emb_grads` carries upstream gradients on the embedding heads.
        Router gradients into e_c/e_a/e_d are accumulated across all MoE
        layers and flow into the embedding network unless the config says
        to detach it."""
        t = run.frames.shape[0]
        c = self.config
        gx = self.output_head.backward(d_logits, run.head_cache, gbuf,
                                       "output_head.")
        ge_c = np.zeros((t, c.d_c))
        ge_a = np.zeros(c.d_a) if c.router_variant == MOE2 else None
        ge_d = np.zeros(c.d_d) if c.router_variant == MOE2 else None
        for i in range(len(self.stack) - 1, -1, -1):
            layer = self.stack[i]
            cache = run.stack_caches[i]
            prefix = f"stack.{i}."
            if isinstance(layer, MoELayer):
                aux = None
                if aux_prob_grads is not None:
                    aux = aux_prob_grads.get(layer.layer_index)
                gx, gc, ga, gd = layer.backward(gx, cache, gbuf, prefix, aux)
                ge_c += gc
                if ga is not None:
                    ge_a += ga
                if gd is not None:
                    ge_d += gd
            else:
                gx = layer.backward(gx, cache, gbuf, prefix)
        self.input_proj.backward(gx, run.input_cache, gbuf, "input_proj.")
        eg = emb_grads if emb_grads is not None else EmbeddingGrads()
        if not c.detach_embeddings:
            eg.e_c = ge_c if eg.e_c is None else eg.e_c + ge_c
            if ge_a is not None:
                eg.e_a = ge_a if eg.e_a is None else eg.e_a + ge_a
            if ge_d is not None:
                eg.e_d = ge_d if eg.e_d is None else eg.e_d + ge_d
        self.embedding.backward(eg, run.emb_cache, gbuf)


def build_model(config: ModelConfig) -> Model:
    """Construct and initialize the model; logs the parameter count and the
    stack composition."""
    model = Model(config)
    n_att = config.n_moe_layers // config.attention_every
    log.info(
        "built %s model: %d MoE + %d memory + %d attention layers, "
        "%d experts/layer, %d parameters",
        config.router_variant, config.n_moe_layers, config.n_memory_layers,
        n_att, config.n_experts, model.param_count)
    return model
