"""Simulated expert parallelism: the same batch, one to four workers.

Experts live on different (simulated) workers; frames travel to their
selected expert's owner and back. The run shows that worker count is pure
execution partitioning: one worker reproduces the plain step bit for bit,
more workers agree to floating-point reassociation, and the auxiliary
losses are computed on the router probabilities gathered across all
workers (global batch), which matters whenever worker loads are skewed.
"""

import numpy as np

from moe_asr.config import ModelConfig
from moe_asr.data import SynthConfig, generate
from moe_asr.losses import RouterBatch, mean_importance_loss
from moe_asr.model import Model
from moe_asr.parallel import gather_probabilities, make_shards, step_parallel
from moe_asr.train import train_step

config = ModelConfig(n_moe_layers=3, n_memory_layers=3, attention_every=3,
                     n_experts=4, expert_hidden=16, d_feat=8, d_model=12,
                     d_att=8, memory_order=1, d_c=10, d_a=4, d_d=4,
                     vocab_size=4, n_domains=3, n_accents=2, batch_size=6)
synth = SynthConfig(n_domains=3, n_accents=2, vocab_size=4, d_feat=8,
                    t_min=10, t_max=16, label_min=1, label_max=4, seed=5)
batch = generate(synth, 6)

plain = train_step(Model(config), batch)
print(f"plain single-process step:    total loss {plain.breakdown.total:.12f}")

for n_workers in (1, 2, 4):
    shards = make_shards(batch, config.n_experts, n_workers)
    for s in shards:
        print(f"  worker {s.worker_id}: experts [{s.expert_lo}, "
              f"{s.expert_hi}), {len(s.utterances)} utterances")
    result = step_parallel(Model(config), shards)
    worst = max(np.max(np.abs(plain.gbuf[k] - result.gbuf[k]))
                for k in plain.gbuf)
    print(f"{n_workers} worker(s): total loss {result.breakdown.total:.12f}"
          f"  max gradient deviation {worst:.2e}")

# global vs per-worker auxiliary loss: with skewed expert usage across
# workers the globally-gathered mean importance differs from averaging
# per-worker values
a = np.zeros((3, 2))
a[:, 0] = 1.0                       # worker 0: 3 frames, all expert 0
b = np.zeros((5, 2))
b[:, 1] = 1.0                       # worker 1: 5 frames, all expert 1
v_a, _ = mean_importance_loss(RouterBatch(a))
v_b, _ = mean_importance_loss(RouterBatch(b))
v_global, _ = mean_importance_loss(RouterBatch(np.concatenate([a, b])))
print("\nskewed-load example, mean importance loss:")
print(f"  per-worker values: {v_a:.4f} and {v_b:.4f} "
      f"(frame-weighted mean {(3 * v_a + 5 * v_b) / 8:.4f})")
print(f"  on the gathered global batch: {v_global:.4f}")

shards = make_shards(batch, config.n_experts, 2)
step_parallel(Model(config), shards)
rb = gather_probabilities(shards, moe_index=0)
print(f"\ngathered router batch at layer 0: k = {rb.k} frames "
      f"across {len(shards)} workers")
