"""Reference experiments built from a run config, plus one desk-scale
reproduction function per analysis listed in ``FIGURES``.

Every reproduction returns ``(tables, verdict)``. ``tables`` maps a file stem
to ``(header, rows)`` and ``verdict`` maps a criterion name to a dict with a
boolean ``passed`` plus the numbers behind it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import build_model, init_adapters
from .config import RunConfig
from .game import ModelGame, concentration_summary, shapley_multilinear
from .merge import align, interpolate_sweep, midpoint_drop
from .prune import PrunePattern, prune_sweep
from .schedule import INIT_STREAM, ScheduleSpec
from .tasks import CsvSchema, gen_teacher_task, load_csv
from .trainer import TrainingConfig, evaluate, train, weight_distance

N_SEEDS = 5
MAJORITY = 4


def build_task(cfg):
    t = cfg.task
    if t.kind == "csv":
        schema = CsvSchema(t.d, t.classes)
        return load_csv(t.train_csv, schema, "train"), load_csv(t.eval_csv, schema, "eval")
    return gen_teacher_task(t.seed, t.n, t.d, t.classes, t.teacher_depth, t.margin)


def build_base(cfg):
    """Frozen base network; adapters are replaced per run by :func:`fresh_model`."""
    m = cfg.model
    return build_model(np.random.default_rng([m.base_seed]), cfg.task.d, list(m.widths),
                       cfg.task.classes, rank=m.rank, alpha=m.alpha,
                       nonlinearity=m.nonlinearity, weight_scale=m.weight_scale)


def fresh_model(cfg, base=None):
    base = base if base is not None else build_base(cfg)
    rng = np.random.default_rng([INIT_STREAM, cfg.seed])
    adapters = init_adapters([l.shape for l in base.layers], cfg.model.rank, cfg.model.alpha, rng)
    return base.with_adapters(adapters)


def training_config(cfg):
    o, s = cfg.optimizer, cfg.schedule
    return TrainingConfig(
        schedule=ScheduleSpec(s.shape, s.phase1_fraction, s.total_steps),
        sampler=cfg.sampler, optimizer=o.name, learning_rate=o.learning_rate,
        batch_size=o.batch_size, loss=o.loss, seed=cfg.seed, dropout=o.dropout,
        eval_every=o.eval_every, cosine_decay=o.cosine_decay)


@dataclass
class RunResult:
    """Checkpoints of one training run: initial, early (25% of steps) and final."""

    init: object
    early: object
    final: object
    data: tuple = field(repr=False, default=None)

    @property
    def model(self):
        return self.final.model

    @property
    def metrics(self):
        return self.final.metrics


def run_training(cfg, data=None, base=None, early_fraction=0.25):
    """Train one run, stopping at 0 and ``early_fraction * T`` for snapshots."""
    data = data or build_task(cfg)
    train_set, eval_set = data
    tcfg = training_config(cfg)
    model = fresh_model(cfg, base)
    init, _ = train(model, train_set, tcfg, eval_set, stop_at=0)
    early_step = int(early_fraction * tcfg.total_steps)
    early, _ = train(None, train_set, tcfg, eval_set, stop_at=early_step, resume=init)
    final, _ = train(None, train_set, tcfg, eval_set, resume=early)
    return RunResult(init, early, final, data)


def baseline_of(cfg):
    """Same run with the progressive phase switched off (plain adapter training)."""
    return cfg.with_schedule(phase1_fraction=0.0)


class ReferenceRuns:
    """Lazily trained CoTo and baseline runs shared across reproductions.

    Pair ``k`` uses seeds ``2k + 1`` and ``2k + 2``; the single-model
    analyses use the first run of each pair.
    """

    def __init__(self, cfg, n_pairs=N_SEEDS):
        self.cfg = cfg
        self.n_pairs = n_pairs
        self.data = build_task(cfg)
        self.base = build_base(cfg)
        self._runs = {}

    def seeds(self, k):
        return 2 * k + 1, 2 * k + 2

    def run(self, method, seed):
        key = (method, seed)
        if key not in self._runs:
            cfg = self.cfg.with_seed(seed)
            if method == "baseline":
                cfg = baseline_of(cfg)
            self._runs[key] = run_training(cfg, self.data, self.base)
        return self._runs[key]

    def pair(self, method, k):
        a, b = self.seeds(k)
        return self.run(method, a), self.run(method, b)

    def single(self, method, k):
        return self.run(method, self.seeds(k)[0])

    @property
    def eval_set(self):
        return self.data[1]


def _majority(wins):
    return int(sum(wins)) >= MAJORITY


def reproduce_fig2(runs, grid=11):
    """Interpolation curves and the midpoint-drop comparison."""
    ev = runs.eval_set
    curve_rows, pair_rows, align_rows = [], [], []
    drops = {"coto": [], "baseline": []}
    for method in ("coto", "baseline"):
        for k in range(runs.n_pairs):
            r1, r2 = runs.pair(method, k)
            rows = interpolate_sweep(r1.model, r2.model, grid, ev, "fusion")
            curve_rows += [(method, k, *row) for row in rows]
            drop = midpoint_drop(rows)
            drops[method].append(drop)
            pair_rows.append((method, k, rows[0][2], rows[-1][2], drop))
            for layer, res in enumerate(align(r1.model, r2.model), start=1):
                align_rows.append((method, k, layer, res.objective_initial, res.objective_final,
                                   res.p_norm2, res.gap_spectral))
    wins = [c < b for c, b in zip(drops["coto"], drops["baseline"])]
    tables = {
        "fig2_interpolation": (["method", "pair", "lambda", "loss", "accuracy"], curve_rows),
        "fig2_midpoint": (["method", "pair", "acc_lambda0", "acc_lambda1", "midpoint_drop"],
                          pair_rows),
        "fig4_alignment": (["method", "pair", "layer", "obj_initial", "obj_final", "p_norm2",
                            "fusion_ensemble_gap"], align_rows),
    }
    verdict = {"fig2_midpoint_drop": {"passed": _majority(wins), "wins": int(sum(wins)),
                                      "coto": drops["coto"], "baseline": drops["baseline"]}}
    return tables, verdict


def structured_patterns(depth):
    k = max(1, depth // 3)
    return [PrunePattern("all"), PrunePattern("every-other"), PrunePattern("low", k),
            PrunePattern("middle", k), PrunePattern("high", k)]


SPARSITY_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


def reproduce_fig7(runs):
    """Structured and unstructured pruning sweeps for every reference checkpoint."""
    ev = runs.eval_set
    rows = []
    acc = {}
    for k in range(runs.n_pairs):
        for method, bundle in (("coto", runs.single("coto", k).final),
                               ("early-coto", runs.single("coto", k).early),
                               ("baseline", runs.single("baseline", k).final)):
            model = bundle.model
            sweep = prune_sweep(model, ev, structured_patterns(model.depth), SPARSITY_GRID)
            for setting, loss, a in sweep:
                rows.append((method, k, setting, loss, a))
                acc[(method, k, setting)] = a
    eo = [acc[("coto", k, "every-other")] > acc[("baseline", k, "every-other")]
          for k in range(runs.n_pairs)]
    sp = [acc[("coto", k, 0.5)] > acc[("baseline", k, 0.5)] for k in range(runs.n_pairs)]
    tables = {"fig7_pruning": (["method", "seed_index", "setting", "loss", "accuracy"], rows)}
    verdict = {
        "fig7_every_other": {"passed": _majority(eo), "wins": int(sum(eo))},
        "fig7_sparsity_50": {"passed": _majority(sp), "wins": int(sum(sp))},
    }
    return tables, verdict


def reproduce_fig8(runs, p_grid=11, samples=256):
    """Multilinear Shapley estimates and top-third contribution shares."""
    ev = runs.eval_set
    rows, share_rows = [], []
    top = {"coto": [], "baseline": []}
    for k in range(runs.n_pairs):
        for method, bundle in (("coto", runs.single("coto", k).final),
                               ("early-coto", runs.single("coto", k).early),
                               ("baseline", runs.single("baseline", k).final)):
            game = ModelGame(bundle.model, ev)
            rep = shapley_multilinear(game, p_grid, samples, np.random.default_rng([8, k]))
            for adapter, phi, se, *_ in rep.rows():
                rows.append((method, k, adapter, phi, -phi, se))
            bucket = max(1, bundle.model.depth // 3)
            summ = concentration_summary(rep, bucket)
            for b, share in summ.rows():
                share_rows.append((method, k, b, share))
            if method in top:
                top[method].append(float(summ.shares[-1]))
    wins = [c < b for c, b in zip(top["coto"], top["baseline"])]
    tables = {
        "fig8_shapley": (["method", "seed_index", "adapter", "phi", "contribution", "stderr"], rows),
        "fig8_shares": (["method", "seed_index", "bucket", "share"], share_rows),
    }
    verdict = {"fig8_top_share": {"passed": _majority(wins), "wins": int(sum(wins)),
                                  "coto": top["coto"], "baseline": top["baseline"]}}
    return tables, verdict


PHASE_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)


def reproduce_fig9_left(cfg, n_seeds=N_SEEDS, fractions=PHASE_FRACTIONS):
    """Accuracy and adapter-invocation fraction against the phase-1 share."""
    data = build_task(cfg)
    base = build_base(cfg)
    rows = []
    for rho in fractions:
        for seed in range(1, n_seeds + 1):
            run = run_training(cfg.with_seed(seed).with_schedule(phase1_fraction=rho), data, base)
            _, acc = evaluate(run.model, data[1])
            rows.append((rho, seed, acc, run.metrics.invocation_fraction()))
    zero = [r for r in rows if r[0] == 0.0]
    verdict = {"fig9_zero_is_baseline": {
        "passed": all(r[3] == 1.0 for r in zero),
        "invocation_fraction": [r[3] for r in zero]}}
    header = ["phase1_fraction", "seed", "eval_accuracy", "invocation_fraction"]
    return {"fig9_left": (header, rows)}, verdict


def reproduce_tab5(runs):
    """Init-to-final and final-to-final adapter distances."""
    rows = []
    for method in ("coto", "baseline"):
        finals = [runs.single(method, k) for k in range(runs.n_pairs)]
        init_final = [weight_distance(r.init, r.final) for r in finals]
        final_final = [weight_distance(a.final, b.final)
                       for i, a in enumerate(finals) for b in finals[i + 1:]]
        rows.append((method, "init_to_final", float(np.mean(init_final))))
        rows.append((method, "final_to_final", float(np.mean(final_final))))
    return {"tab5_distances": (["method", "pair_kind", "mean_distance"], rows)}, {}


COMPUTE_STEPS = 10000


def reproduce_tab8(runs, low=0.615, high=0.635, total_steps=COMPUTE_STEPS):
    """Realized adapter-invocation fraction against the ``rho/2 + (1 - rho)`` expectation.

    Uses dedicated runs of ``total_steps`` steps so the law of large
    numbers has room to act. The baseline fraction is one by construction,
    so its rows come from the shared reference runs.
    """
    cfg = runs.cfg.with_schedule(total_steps=total_steps)
    rho = cfg.schedule.phase1_fraction
    expected = rho / 2 + (1 - rho)
    rows = []
    for k in range(runs.n_pairs):
        run = run_training(cfg.with_seed(runs.seeds(k)[0]), runs.data, runs.base)
        frac = run.metrics.invocation_fraction()
        rows.append(("coto", k, frac, 1.0 - frac))
    for k in range(runs.n_pairs):
        frac = runs.single("baseline", k).metrics.invocation_fraction()
        rows.append(("baseline", k, frac, 1.0 - frac))
    coto = [r[2] for r in rows if r[0] == "coto"]
    verdict = {"tab8_invocation_fraction": {
        "passed": all(low <= f <= high for f in coto), "expected": expected, "realized": coto}}
    return {"tab8_compute": (["method", "seed_index", "invocation_fraction",
                              "adapter_compute_saved"], rows)}, verdict


FIGURES = ("fig2", "fig7", "fig8", "fig9-left", "tab5", "tab8")


def reproduce(figure, cfg, runs=None):
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}; choose from {FIGURES}")
    if figure == "fig9-left":
        return reproduce_fig9_left(cfg)
    runs = runs or ReferenceRuns(cfg)
    return {"fig2": reproduce_fig2, "fig7": reproduce_fig7, "fig8": reproduce_fig8,
            "tab5": reproduce_tab5, "tab8": reproduce_tab8}[figure](runs)
