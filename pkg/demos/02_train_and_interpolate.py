"""Train progressive and plain adapters, then walk the line between two runs.

Uses a reduced copy of the reference task so it finishes in well under a
minute on one core.
"""

# %%
from cotolab.config import reference_run_config
from cotolab.experiment import baseline_of, build_base, build_task, run_training
from cotolab.merge import align, interpolate_sweep, midpoint_drop

cfg = reference_run_config().with_schedule(total_steps=800)
data = build_task(cfg)
base = build_base(cfg)

# %%
# Two seeds per method. The baseline is the same run with the ramp switched off.
runs = {}
for method in ("coto", "baseline"):
    c = cfg if method == "coto" else baseline_of(cfg)
    runs[method] = [run_training(c.with_seed(s), data, base) for s in (1, 2)]
    for r in runs[method]:
        m = r.metrics
        print(f"{method:>8} seed: final eval acc {m.evals[-1][2]:.3f}, "
              f"invocation fraction {m.invocation_fraction():.3f}")

# %%
# Interpolate by linear weight fusion at eleven points and report the dip.
# One short pair proves little either way; `cotolab reproduce --figure fig2`
# runs five full-length pairs per method for the comparison.
for method, (r1, r2) in runs.items():
    rows = interpolate_sweep(r1.model, r2.model, 11, data[1], "fusion")
    curve = " ".join(f"{acc:.2f}" for _, _, acc in rows)
    print(f"{method:>8}: {curve}  midpoint drop {midpoint_drop(rows):+.3f}")

# %%
# Alignment reparameterizes one adapter to close the fusion-ensemble gap.
for layer, res in enumerate(align(runs["coto"][0].model, runs["coto"][1].model), 1):
    print(f"layer {layer}: objective {res.objective_initial:.4f} -> {res.objective_final:.4f}")
