"""How the activation schedule opens adapter gates over a run.

Run with ``python3 demos/01_schedule_and_gates.py``.
"""

# %%
# Three ramp shapes on a 1000-step run whose first 75% is the ramp.
import numpy as np

from cotolab.schedule import ScheduleSpec, activation_prob, binomial_weights, gate_stream

for shape in ("linear", "exponential", "sine"):
    spec = ScheduleSpec(shape, 0.75, 1000)
    probe = [activation_prob(t, spec) for t in (1, 250, 500, 750, 1000)]
    print(f"{shape:>11}: " + "  ".join(f"{p:.3f}" for p in probe))

# %%
# Gates are drawn per step from a counter-based stream, so the same seed
# always yields the same gate matrix. Count how often each of six adapters ran.
spec = ScheduleSpec("linear", 0.75, 1000)
gates = gate_stream(spec, 6, seed=1)
print("per-adapter invocation fraction:", np.round(gates.mean(axis=0), 3))
print("overall:", round(float(gates.mean()), 4), "(a linear ramp over 3/4 of the run gives 0.625)")

# %%
# The nested samplers are deterministic: low layers switch on last or first.
for mode in ("nested-low", "nested-high"):
    rows = gate_stream(ScheduleSpec("linear", 1.0, 6), 6, mode=mode)
    print(mode, "\n", rows)

# %%
# Number of open gates at a fixed p follows a binomial law.
w = binomial_weights(6, 0.4)
print("P(j open of 6 | p=0.4):", np.round(w, 4), "sum", w.sum())
