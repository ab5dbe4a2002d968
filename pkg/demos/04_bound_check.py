"""Check the convexity bound on a random gated model by full enumeration.

The expected loss under random gates is compared with the binomial mixture of
losses of the averaged subnetwork predictions. The gap must be nonnegative.
"""

# %%
import numpy as np

from cotolab.theory import random_model, verify_bound

rng = np.random.default_rng(0)
model = random_model(rng, 4)
x = rng.normal(size=(32, model.input_dim))
y = rng.integers(0, model.output_dim, 32)

# %%
rep = verify_bound(model, x, y, np.linspace(0, 1, 11), "softmax-cross-entropy")
print(f"{'p':>5} {'lhs':>10} {'rhs':>10} {'gap':>10}")
for p, lhs, rhs, _, gap in rep.rows():
    print(f"{p:5.2f} {lhs:10.5f} {rhs:10.5f} {gap:10.2e}")
print("holds:", rep.holds, "over", rep.n_masks, "masks")
