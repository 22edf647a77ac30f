"""Deterministic simulation of multi-worker expert parallelism.

Experts are partitioned across simulated workers; non-expert layers,
routers, and the embedding network are replicated (shared parameter
arrays, per-worker gradient buffers). Workers execute a fixed schedule —
route-all, exchange-all, compute-all, return-all, reduce — exchanging
in-memory messages with (source worker, utterance, frame, layer)
provenance. Auxiliary losses are computed on the concatenation of all
workers' router probabilities by default (the global batch), and
per-parameter gradients are reduced in ascending worker order, so a run is
bit-reproducible and matches the plain single-process step up to
floating-point reassociation (exactly, for one worker).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import MOE2
from .data import Utterance
from .errors import ConfigError, PartitionError, SyncError, TransportError
from .layers import MoECache, MoELayer
from .losses import RouterBatch, combine
from .model import Model
from .train import (StepResult, aux_losses_and_grads, utilization_histogram,
                    utterance_task_losses)


@dataclass
class Message:
    """One frame (or its gradient) in flight between workers. `src_worker`,
    `utt`, and `frame` always name the frame's home coordinates, also on
    the reply leg."""

    src_worker: int
    utt: int
    frame: int
    moe_index: int
    expert: int
    payload: np.ndarray


class _UttState:
    """Per-utterance forward/backward state held by its home worker."""

    __slots__ = ("utt", "emb", "emb_cache", "input_cache", "x",
                 "stack_caches", "moe_probs", "moe_selected", "logits",
                 "head_cache", "task", "gx", "gx_router", "ge_c", "ge_a",
                 "ge_d")

    def __init__(self, utt: Utterance):
        self.utt = utt
        self.stack_caches = []
        self.moe_probs = []
        self.moe_selected = []


@dataclass
class WorkerShard:
    worker_id: int
    expert_lo: int
    expert_hi: int
    utterances: list[Utterance]
    outbox: dict[int, list[Message]] = field(default_factory=dict)
    inbox: list[Message] = field(default_factory=list)
    grad_buf: dict | None = None
    layer_probs: list | None = None      # per MoE ordinal: per-utt (T, n)
    states: list | None = None
    expert_caches: dict = field(default_factory=dict)
    processed: list = field(default_factory=list)   # provenance records

    def owns(self, expert: int) -> bool:
        return self.expert_lo <= expert < self.expert_hi

    def send(self, dest: int, msg: Message) -> None:
        self.outbox.setdefault(dest, []).append(msg)


def partition_experts(n_experts: int, n_workers: int):
    """Contiguous ranges with sizes differing by at most one; lower worker
    ids take the remainder."""
    if n_workers < 1:
        raise ConfigError("n_workers must be >= 1")
    if n_experts < 1:
        raise ConfigError("n_experts must be >= 1")
    base, rem = divmod(n_experts, n_workers)
    ranges = []
    lo = 0
    for w in range(n_workers):
        hi = lo + base + (1 if w < rem else 0)
        ranges.append((lo, hi))
        lo = hi
    return ranges


def partition_batch(items: list, n_workers: int):
    base, rem = divmod(len(items), n_workers)
    parts = []
    lo = 0
    for w in range(n_workers):
        hi = lo + base + (1 if w < rem else 0)
        parts.append(items[lo:hi])
        lo = hi
    return parts


def make_shards(batch: list[Utterance], n_experts: int,
                n_workers: int) -> list[WorkerShard]:
    ranges = partition_experts(n_experts, n_workers)
    parts = partition_batch(batch, n_workers)
    return [WorkerShard(w, lo, hi, part)
            for w, ((lo, hi), part) in enumerate(zip(ranges, parts))]


def validate_partition(shards: list[WorkerShard], n_experts: int) -> None:
    ranges = sorted((s.expert_lo, s.expert_hi) for s in shards)
    pos = 0
    for lo, hi in ranges:
        if lo != pos or hi < lo:
            raise PartitionError(
                f"expert ranges {ranges} do not partition [0, {n_experts})")
        pos = hi
    if pos != n_experts:
        raise PartitionError(
            f"expert ranges {ranges} do not cover [0, {n_experts})")


def gather_probabilities(shards: list[WorkerShard],
                         moe_index: int | None = None) -> RouterBatch:
    """Concatenate one layer's router probabilities across workers in
    (worker id, local utterance) order; global k is the sum of local ks."""
    for s in shards:
        if s.layer_probs is None:
            raise SyncError(f"worker {s.worker_id} has not started routing")
    if moe_index is None:
        moe_index = len(shards[0].layer_probs) - 1
    parts = []
    for s in shards:
        utt_probs = s.layer_probs[moe_index]
        if len(utt_probs) != len(s.utterances):
            raise SyncError(
                f"worker {s.worker_id} has routed {len(utt_probs)} of "
                f"{len(s.utterances)} utterances at layer {moe_index}")
        parts.extend(utt_probs)
    return RouterBatch(np.concatenate(parts, axis=0))


def _exchange(shards: list[WorkerShard]) -> None:
    """Deliver all outboxes: each destination receives sources in ascending
    worker order, each source's messages in send order."""
    for dest in shards:
        dest.inbox = []
    for dest in shards:
        for src in shards:
            msgs = src.outbox.get(dest.worker_id)
            if msgs:
                dest.inbox.extend(msgs)
    for src in shards:
        src.outbox = {}


def _grouped_inbox(inbox: list[Message]):
    """Group messages by (src worker, utterance) preserving arrival order,
    then by expert (ascending) inside each group."""
    groups: dict[tuple, dict[int, list[Message]]] = {}
    for msg in inbox:
        key = (msg.src_worker, msg.utt)
        groups.setdefault(key, {}).setdefault(msg.expert, []).append(msg)
    return groups


def step_parallel(model: Model, shards: list[WorkerShard]) -> StepResult:
    """One simulated training step (forward + global loss + backward +
    gradient reduction) over the shards' combined batch."""
    c = model.config
    w = c.weights
    shards = sorted(shards, key=lambda s: s.worker_id)
    validate_partition(shards, c.n_experts)
    n_layers = model.n_moe_layers
    batch_size = sum(len(s.utterances) for s in shards)
    if batch_size == 0:
        raise ConfigError("empty batch across all shards")
    owner_of = np.empty(c.n_experts, dtype=np.int64)
    for s in shards:
        owner_of[s.expert_lo:s.expert_hi] = s.worker_id

    # ---- local preamble: embedding + input projection ----
    for s in shards:
        s.grad_buf = model.zero_grad_buffer()
        s.layer_probs = [[] for _ in range(n_layers)]
        s.expert_caches = {}
        s.processed = []
        s.states = []
        for u in s.utterances:
            st = _UttState(u)
            st.emb, st.emb_cache = model.embedding.embed(u.frames)
            st.x, st.input_cache = model.input_proj.forward(u.frames)
            s.states.append(st)

    # ---- forward through the stack ----
    for i, layer in enumerate(model.stack):
        if isinstance(layer, MoELayer):
            m = layer.layer_index
            d_out = layer.experts[0].d_out
            # route-all: replicated routers run at home, frames go to the
            # owner of their selected expert
            for s in shards:
                for ui, st in enumerate(s.states):
                    probs, selected, gates, rin = layer.router.route_batch(
                        st.emb.e_c, st.emb.e_a, st.emb.e_d, st.x)
                    st.stack_caches.append(MoECache(
                        st.x, probs, selected, gates, None, None, rin))
                    st.moe_probs.append(probs)
                    st.moe_selected.append(selected)
                    s.layer_probs[m].append(probs)
                    for t, e in enumerate(selected):
                        s.send(int(owner_of[e]), Message(
                            s.worker_id, ui, t, m, int(e), st.x[t]))
            _exchange(shards)
            # compute-all: owners evaluate their local experts per
            # (source utterance, expert) group, preserving frame order
            for s in shards:
                for (src, utt), by_expert in _grouped_inbox(s.inbox).items():
                    for e in sorted(by_expert):
                        if not s.owns(e):
                            raise PartitionError(
                                f"worker {s.worker_id} received frames for "
                                f"expert {e} outside [{s.expert_lo}, "
                                f"{s.expert_hi})")
                        msgs = by_expert[e]
                        xs = np.stack([msg.payload for msg in msgs])
                        ys, cache = layer.experts[e].forward(xs)
                        frames = np.array([msg.frame for msg in msgs])
                        s.expert_caches[(m, src, utt, e)] = (frames, cache)
                        for row, msg in zip(ys, msgs):
                            s.processed.append((m, src, utt, msg.frame, e))
                            s.send(src, Message(src, utt, msg.frame, m, e,
                                                row))
            _exchange(shards)
            # return-all: homes rebuild frame order and apply the gate
            for s in shards:
                raws = [np.empty((st.utt.t, d_out)) for st in s.states]
                seen = [np.zeros(st.utt.t, dtype=bool) for st in s.states]
                for msg in s.inbox:
                    if msg.src_worker != s.worker_id:
                        raise TransportError(
                            f"worker {s.worker_id} received a reply for "
                            f"worker {msg.src_worker}")
                    if seen[msg.utt][msg.frame]:
                        raise TransportError(
                            f"frame {msg.frame} of utterance {msg.utt} "
                            f"returned twice at layer {m}")
                    seen[msg.utt][msg.frame] = True
                    raws[msg.utt][msg.frame] = msg.payload
                for ui, st in enumerate(s.states):
                    if not seen[ui].all():
                        lost = int(np.flatnonzero(~seen[ui])[0])
                        raise TransportError(
                            f"frame {lost} of utterance {ui} on worker "
                            f"{s.worker_id} never returned at layer {m}")
                    cache = st.stack_caches[i]
                    cache.raw = raws[ui]
                    st.x = cache.gates[:, None] * raws[ui]
        else:
            for s in shards:
                for st in s.states:
                    st.x, cache = layer.forward(st.x)
                    st.stack_caches.append(cache)

    # ---- output head + per-utterance task losses ----
    for s in shards:
        for st in s.states:
            st.logits, st.head_cache = model.output_head.forward(st.x)
            st.task = utterance_task_losses(st, st.utt, w, batch_size,
                                            c.router_variant)
    all_states = [st for s in shards for st in s.states]
    l_c = sum(st.task.l_c for st in all_states) / batch_size
    l_e = sum(st.task.l_e for st in all_states) / batch_size
    l_a = sum(st.task.l_a for st in all_states) / batch_size
    l_d = sum(st.task.l_d for st in all_states) / batch_size

    # ---- auxiliary losses on gathered router probabilities ----
    layer_probs_global = [gather_probabilities(shards, m).probs
                          for m in range(n_layers)]
    aux_slices: dict[tuple, dict[int, np.ndarray]] = {}
    if c.aux_scope == "global":
        l_s, l_m, aux_grads = aux_losses_and_grads(layer_probs_global, w)
        offset = 0
        for s in shards:
            for ui, st in enumerate(s.states):
                t = st.utt.t
                aux_slices[(s.worker_id, ui)] = {
                    ml: aux_grads[ml][offset:offset + t]
                    for ml in range(n_layers)}
                offset += t
    else:
        # per-worker alternative: each worker penalizes only its own batch;
        # reported values are frame-weighted means over workers
        l_s_num = l_m_num = frames_total = 0.0
        for s in shards:
            if not s.states:
                continue
            local = [np.concatenate(s.layer_probs[ml], axis=0)
                     for ml in range(n_layers)]
            ls_w, lm_w, grads_w = aux_losses_and_grads(local, w)
            k_w = local[0].shape[0]
            l_s_num += ls_w * k_w
            l_m_num += lm_w * k_w
            frames_total += k_w
            offset = 0
            for ui, st in enumerate(s.states):
                t = st.utt.t
                aux_slices[(s.worker_id, ui)] = {
                    ml: grads_w[ml][offset:offset + t]
                    for ml in range(n_layers)}
                offset += t
        l_s = l_s_num / frames_total
        l_m = l_m_num / frames_total
    breakdown = combine(l_c, l_s, l_m, l_e, l_a, l_d, w)

    # ---- backward through the stack (reverse layer order) ----
    for s in shards:
        for st in s.states:
            st.gx = model.output_head.backward(
                st.task.d_logits, st.head_cache, s.grad_buf, "output_head.")
            st.ge_c = np.zeros((st.utt.t, c.d_c))
            st.ge_a = np.zeros(c.d_a) if c.router_variant == MOE2 else None
            st.ge_d = np.zeros(c.d_d) if c.router_variant == MOE2 else None
    for i in range(len(model.stack) - 1, -1, -1):
        layer = model.stack[i]
        prefix = f"stack.{i}."
        if isinstance(layer, MoELayer):
            m = layer.layer_index
            d_in = layer.experts[0].d_in
            for s in shards:
                for ui, st in enumerate(s.states):
                    cache = st.stack_caches[i]
                    aux = aux_slices[(s.worker_id, ui)][m]
                    gx_router, gc, ga, gd, graw = layer.backward_routing(
                        st.gx, cache, s.grad_buf, prefix, aux)
                    st.gx_router = gx_router
                    st.ge_c += gc
                    if ga is not None:
                        st.ge_a += ga
                    if gd is not None:
                        st.ge_d += gd
                    for t, e in enumerate(cache.selected):
                        s.send(int(owner_of[e]), Message(
                            s.worker_id, ui, t, m, int(e), graw[t]))
            _exchange(shards)
            for s in shards:
                for (src, utt), by_expert in _grouped_inbox(s.inbox).items():
                    for e in sorted(by_expert):
                        msgs = by_expert[e]
                        key = (m, src, utt, e)
                        if key not in s.expert_caches:
                            raise TransportError(
                                f"worker {s.worker_id} has no forward cache "
                                f"for layer {m} utterance {utt} expert {e}")
                        frames, cache = s.expert_caches.pop(key)
                        if [msg.frame for msg in msgs] != frames.tolist():
                            raise TransportError(
                                f"gradient frames for layer {m} expert {e} "
                                f"do not match the dispatched frames")
                        gys = np.stack([msg.payload for msg in msgs])
                        gxs = layer.experts[e].backward(
                            gys, cache, s.grad_buf, prefix + f"experts.{e}.")
                        for row, msg in zip(gxs, msgs):
                            s.send(src, Message(src, utt, msg.frame, m, e,
                                                row))
            _exchange(shards)
            for s in shards:
                gxe = [np.empty((st.utt.t, d_in)) for st in s.states]
                seen = [np.zeros(st.utt.t, dtype=bool) for st in s.states]
                for msg in s.inbox:
                    if seen[msg.utt][msg.frame]:
                        raise TransportError(
                            f"gradient for frame {msg.frame} returned twice")
                    seen[msg.utt][msg.frame] = True
                    gxe[msg.utt][msg.frame] = msg.payload
                for ui, st in enumerate(s.states):
                    if not seen[ui].all():
                        raise TransportError(
                            f"expert input gradients lost at layer {m}")
                    st.gx = st.gx_router + gxe[ui]
        else:
            for s in shards:
                for st in s.states:
                    st.gx = layer.backward(st.gx, st.stack_caches[i],
                                           s.grad_buf, prefix)

    # ---- input projection + embedding backward (home workers) ----
    for s in shards:
        for st in s.states:
            model.input_proj.backward(st.gx, st.input_cache, s.grad_buf,
                                      "input_proj.")
            eg = st.task.emb_grads
            if not c.detach_embeddings:
                eg.e_c = st.ge_c if eg.e_c is None else eg.e_c + st.ge_c
                if st.ge_a is not None:
                    eg.e_a = st.ge_a if eg.e_a is None else eg.e_a + st.ge_a
                if st.ge_d is not None:
                    eg.e_d = st.ge_d if eg.e_d is None else eg.e_d + st.ge_d
            model.embedding.backward(eg, st.emb_cache, s.grad_buf)

    # ---- reduce per-worker gradients in ascending worker order ----
    reduced = model.zero_grad_buffer()
    for s in shards:
        for name, g in s.grad_buf.items():
            reduced[name] += g

    selected_global = [
        np.concatenate([st.moe_selected[ml] for s in shards
                        for st in s.states])
        for ml in range(n_layers)]
    util = utilization_histogram(selected_global, c.n_experts)
    return StepResult(breakdown, util, reduced, layer_probs_global)
