"""Top-1 routing in a single MoE layer, step by step.

Builds a small layer, routes a handful of frames, and shows the three
facts that make the layer "sparse": the router's probability vector, the
single expert actually evaluated per frame (checked against a dense
evaluation of all experts), and the FLOP count, which stays flat in the
expert term as the expert count grows.
"""

import numpy as np

from moe_asr import flops
from moe_asr.layers import Expert, MoELayer, Router

rng = np.random.default_rng(0)

D_IN, HIDDEN, D_C, D_A, D_D = 8, 16, 6, 4, 4
N_EXPERTS, T = 4, 6

experts = [Expert.init(rng, D_IN, HIDDEN, D_IN) for _ in range(N_EXPERTS)]
router = Router.init(rng, Router.AUGMENTED, D_C, D_A, D_D, D_IN, N_EXPERTS)
layer = MoELayer(0, experts, router)

frames = rng.normal(size=(T, D_IN))
e_c = rng.normal(size=(T, D_C))       # per-frame grapheme embedding
e_a = rng.normal(size=D_A)            # utterance-level accent embedding
e_d = rng.normal(size=D_D)            # utterance-level domain embedding

outputs, decisions, cache = layer.forward(frames, e_c, e_a, e_d)

print("frame  probabilities                     selected  gate")
for t, dec in enumerate(decisions):
    probs = " ".join(f"{p:.3f}" for p in dec.probs)
    print(f"{t:>5}  [{probs}]   e{dec.selected}        {dec.gate:.3f}")

# dense-evaluation oracle: run every expert on every frame, keep only the
# argmax expert's output scaled by its probability; must match bit for bit
print("\ndense-evaluation oracle check (exact equality):")
for t, dec in enumerate(decisions):
    dense = [e.forward(frames[t:t + 1])[0][0] for e in experts]
    exact = np.array_equal(outputs[t], dec.gate * dense[dec.selected])
    print(f"  frame {t}: selected e{dec.selected}, exact match: {exact}")

# sparsity in compute: expert FLOPs do not grow with the expert count
print("\nexpert-compute FLOPs vs expert count (same frames):")
for n in (2, 4, 16):
    experts_n = [Expert.init(rng, D_IN, HIDDEN, D_IN) for _ in range(n)]
    router_n = Router.init(rng, Router.AUGMENTED, D_C, D_A, D_D, D_IN, n)
    layer_n = MoELayer(0, experts_n, router_n)
    counter = flops.FlopCounter()
    with flops.trace(counter):
        layer_n.forward(frames, e_c, e_a, e_d)
    print(f"  n={n:>2}: expert={counter.get('expert'):>6}  "
          f"router={counter.get('router'):>5}  gate={counter.get('gate')}")
