"""Prune a trained adapter stack and attribute its gain to individual layers."""

# %%
import numpy as np

from cotolab.config import reference_run_config
from cotolab.experiment import build_base, build_task, run_training, structured_patterns
from cotolab.game import ModelGame, concentration_summary, shapley_exact, shapley_multilinear
from cotolab.prune import prune_sweep

cfg = reference_run_config().with_schedule(total_steps=800)
data = build_task(cfg)
model = run_training(cfg, data, build_base(cfg)).model
ev = data[1]

# %%
# Whole-layer patterns first, then magnitude pruning over a sparsity grid.
for setting, loss, acc in prune_sweep(model, ev, structured_patterns(model.depth),
                                      [0.0, 0.25, 0.5, 0.75, 1.0]):
    print(f"{str(setting):>12}: loss {loss:.4f} acc {acc:.3f}")

# %%
# With six adapters the game has 64 coalitions, so exact Shapley values are cheap.
game = ModelGame(model, ev)
exact = shapley_exact(game)
print("exact phi (loss units, negative helps):", np.round(exact.phi, 4))
print("efficiency residual:", exact.efficiency_residual)

# %%
# The sampling estimator should land close to the exact values.
est = shapley_multilinear(game, 11, 128, np.random.default_rng(0))
print("estimate:", np.round(est.phi, 4))
print("stderr:  ", np.round(est.stderr, 4))

# %%
summary = concentration_summary(exact, bucket=2)
for bucket, share in summary.rows():
    print(f"bucket {bucket}: share {share:.3f}")
