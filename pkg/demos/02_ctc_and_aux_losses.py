"""The training losses, on paper-sized examples.

Walks the CTC loss through a tiny instance where every alignment can be
enumerated by hand, then shows the two router penalties at their analytic
extremes: the sparsity loss (1 for one-hot routing, sqrt(n) for uniform)
and the mean importance loss (1 for balanced usage, n for collapse), and
finally the weighted combination.
"""

import math

import numpy as np

from moe_asr import tensor
from moe_asr.losses import (LossWeights, RouterBatch, combine, ctc_loss,
                            mean_importance_loss, sparsity_loss)

# --- CTC on a hand-countable case: T=2 frames, one label 'a', vocab {a,b}
# valid alignments: "aa", "a-", "-a"  (- is the blank, index 2)
log_probs = tensor.log_softmax(np.array([[1.0, 0.2, 0.5],
                                         [0.3, 0.1, 1.1]]))
p = np.exp(log_probs)
loss, grad = ctc_loss(log_probs, [0])
by_hand = -(math.log(p[0, 0] * p[1, 0]      # aa
                     + p[0, 0] * p[1, 2]    # a-
                     + p[0, 2] * p[1, 0]))  # -a
print(f"ctc loss {loss:.6f}  vs hand-enumerated {by_hand:.6f}")
print("gradient w.r.t. log-probs (negated state posterior):")
print(np.round(grad, 4))

# uniform posteriors make the closed form exact: -log(3 * (1/3)^2) = log 3
uniform = np.full((2, 3), math.log(1 / 3))
loss_u, _ = ctc_loss(uniform, [0])
print(f"\nuniform posteriors: loss {loss_u:.6f} == log 3 "
      f"{math.log(3):.6f}")

# --- router penalties at their extremes
n = 4
one_hot = np.eye(n)[[0, 1, 2, 3, 0, 1]]
uniform_rows = np.full((6, n), 1 / n)
collapsed = np.zeros((6, n))
collapsed[:, 2] = 1.0

print("\nsparsity loss  (min 1.0 at one-hot, max sqrt(n) at uniform):")
print(f"  one-hot rows: {sparsity_loss(RouterBatch(one_hot))[0]:.6f}")
print(f"  uniform rows: {sparsity_loss(RouterBatch(uniform_rows))[0]:.6f}"
      f"  (sqrt({n}) = {math.sqrt(n):.6f})")

print("mean importance loss  (min 1.0 balanced, max n collapsed):")
print(f"  balanced:  {mean_importance_loss(RouterBatch(uniform_rows))[0]:.6f}")
print(f"  collapsed: {mean_importance_loss(RouterBatch(collapsed))[0]:.6f}")

# --- the combined objective
w = LossWeights()       # alpha .05, beta .05, gamma .01, eta .1, theta .1
b = combine(l_c=2.0, l_s=1.3, l_m=1.1, l_e=2.5, l_a=1.2, l_d=0.9, w=w)
print(f"\ncombined: total = {b.total:.6f}")
print(f"  = l_c + {w.alpha}*l_s + {w.beta}*l_m + {w.gamma}*l_e"
      f" + {w.eta}*l_a + {w.theta}*l_d")
b0 = combine(l_c=2.0, l_s=1.3, l_m=1.1, l_e=2.5, l_a=1.2, l_d=0.9,
             w=LossWeights(eta=0.0, theta=0.0))
print(f"with eta=theta=0 (no accent/domain supervision): {b0.total:.6f}")
