"""Activation-probability schedules and the gate samplers driven by them."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError, ContractError

SHAPES = ("linear", "exponential", "sine")
SAMPLER_MODES = ("uniform", "nested-low", "nested-high")

# Curvature of the exponential ramp.
EXP_RATE = 3.0

# Domain tags keep the per-purpose random streams disjoint.
GATE_STREAM = 0x6A7E
BATCH_STREAM = 0xBA7C
DROPOUT_STREAM = 0xD209
INIT_STREAM = 0x1417


@dataclass(frozen=True)
class ScheduleSpec:
    """Ramp ``p(t)`` from 0 to 1 over the first ``phase1_fraction * total_steps`` steps.

    ``phase1_fraction = 0`` disables the ramp (``p == 1`` throughout), which
    is plain adapter training.
    """

    shape: str = "linear"
    phase1_fraction: float = 0.75
    total_steps: int = 1000

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigurationError(f"schedule shape must be one of {SHAPES}")
        if not 0.0 <= self.phase1_fraction <= 1.0:
            raise ConfigurationError("phase1_fraction must lie in [0, 1]")
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be positive")

    def to_dict(self):
        return asdict(self)


def ramp(shape, u):
    """Schedule curve on the normalized phase-1 clock ``u``, clamped to [0, 1]."""
    u = min(max(u, 0.0), 1.0)
    if shape == "linear":
        return u
    if shape == "exponential":
        return math.expm1(EXP_RATE * u) / math.expm1(EXP_RATE)
    if shape == "sine":
        return math.sin(0.5 * math.pi * u)
    raise ConfigurationError(f"unknown schedule shape {shape!r}")


def activation_prob(t, spec):
    """Probability that an adapter is active at step ``t`` (1-based)."""
    if not 1 <= t <= spec.total_steps:
        raise ContractError(f"step {t} outside [1, {spec.total_steps}]")
    if spec.phase1_fraction == 0.0:
        return 1.0
    ramp_steps = spec.phase1_fraction * spec.total_steps
    if t >= ramp_steps:
        return 1.0
    return ramp(spec.shape, t / ramp_steps)


def gate_uniforms(seed, t, n_layers):
    """The uniforms ``eta_1..eta_L`` for step ``t``; a pure function of its arguments."""
    rng = np.random.default_rng([GATE_STREAM, seed, t])
    return rng.random(n_layers)


def sample_gates(p, n_layers, mode="uniform", seed=0, t=0):
    """Gate vector for one optimization step.

    ``uniform`` draws ``delta_i = 1[eta_i <= p]``; the nested modes are
    deterministic thresholds that switch off low (``nested-low``) or high
    (``nested-high``) layers first.
    """
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"probability {p} outside [0, 1]")
    gates = np.zeros(n_layers, dtype=np.int8)
    if mode == "uniform":
        if p > 0.0:
            gates[:] = gate_uniforms(seed, t, n_layers) <= p
        return gates
    if mode == "nested-low":
        cutoff = math.floor((1.0 - p) * n_layers)
        gates[cutoff:] = 1
        return gates
    if mode == "nested-high":
        gates[: math.floor(p * n_layers)] = 1
        return gates
    raise ConfigurationError(f"unknown sampler mode {mode!r}")


def gate_stream(spec, n_layers, mode="uniform", seed=0):
    """All gate vectors of a run, shape (T, L)."""
    return np.stack([
        sample_gates(activation_prob(t, spec), n_layers, mode, seed, t)
        for t in range(1, spec.total_steps + 1)
    ])


def binomial_weights(n_layers, p):
    """Probability ``w_j`` that exactly ``j`` of ``n_layers`` independent gates are open."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"probability {p} outside [0, 1]")
    j = np.arange(n_layers + 1)
    comb = np.array([math.comb(n_layers, k) for k in j], dtype=np.float64)
    # 0.0 ** 0 == 1.0 keeps the degenerate ends exact
    return comb * np.power(p, j) * np.power(1.0 - p, n_layers - j)


def binomial_weight_exact(n_layers, p, j):
    """Rational value of one weight; ``p`` should be a Fraction for exactness."""
    p = Fraction(p)
    return math.comb(n_layers, j) * p**j * (1 - p) ** (n_layers - j)
