"""Strict JSON run configuration.

Unknown keys and bad values raise :class:`ConfigurationError` naming the
offending field path, e.g. ``model.rank``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .schedule import SAMPLER_MODES, SHAPES
from .trainer import OPTIMIZERS, config_digest


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "teacher"
    seed: int = 7
    n: int = 2000
    d: int = 16
    classes: int = 4
    teacher_depth: int = 2
    margin: float = 0.0
    train_csv: str | None = None
    eval_csv: str | None = None


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (16,) * 6
    rank: int = 2
    alpha: float = 1.0
    nonlinearity: str = "tanh-residual"
    weight_scale: float = 1.0
    base_seed: int = 7


@dataclass(frozen=True)
class ScheduleConfig:
    shape: str = "linear"
    phase1_fraction: float = 0.75
    total_steps: int = 2000


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    learning_rate: float = 1e-2
    batch_size: int = 32
    cosine_decay: bool = False
    dropout: float = 0.0
    eval_every: int = 100
    loss: str = "softmax-cross-entropy"


@dataclass(frozen=True)
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: str = "uniform"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 1
    output: str = "runs/default"

    def to_dict(self):
        return asdict(self)

    def digest(self):
        return config_digest(self.to_dict())

    def with_seed(self, seed):
        return _replace(self, seed=int(seed))

    def with_schedule(self, **kw):
        return _replace(self, schedule=_replace(self.schedule, **kw))


def _replace(obj, **kw):
    from dataclasses import replace

    return replace(obj, **kw)


_SECTIONS = {"task": TaskConfig, "model": ModelConfig, "schedule": ScheduleConfig,
             "optimizer": OptimizerConfig}


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected an object")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigurationError(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for key, value in data.items():
        where = f"{path + '.' if path else ''}{key}"
        if key in _SECTIONS and cls is RunConfig:
            kwargs[key] = _build(_SECTIONS[key], value, where)
        elif key == "widths":
            if not isinstance(value, list) or not value or not all(
                    isinstance(v, int) and v > 0 for v in value):
                raise ConfigurationError(f"{where}: expected a non-empty list of positive ints")
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _check(cond, where, msg):
    if not cond:
        raise ConfigurationError(f"{where}: {msg}")


def _number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _validate(cfg):
    t, m, s, o = cfg.task, cfg.model, cfg.schedule, cfg.optimizer
    _check(t.kind in ("teacher", "csv"), "task.kind", "must be 'teacher' or 'csv'")
    if t.kind == "csv":
        _check(bool(t.train_csv) and bool(t.eval_csv), "task.train_csv", "csv tasks need both files")
    for name in ("seed", "n", "d", "classes", "teacher_depth"):
        _check(isinstance(getattr(t, name), int), f"task.{name}", "must be an integer")
    _check(isinstance(m.rank, int) and m.rank >= 1, "model.rank", "must be a positive integer")
    _check(_number(m.alpha) and m.alpha > 0, "model.alpha", "must be positive")
    _check(m.rank <= min(min(m.widths), t.d), "model.rank", "exceeds layer width")
    _check(_number(m.weight_scale) and m.weight_scale > 0, "model.weight_scale", "must be positive")
    _check(s.shape in SHAPES, "schedule.shape", f"must be one of {SHAPES}")
    _check(_number(s.phase1_fraction) and 0 <= s.phase1_fraction <= 1,
           "schedule.phase1_fraction", "must lie in [0, 1]")
    _check(isinstance(s.total_steps, int) and s.total_steps >= 1, "schedule.total_steps",
           "must be a positive integer")
    _check(cfg.sampler in SAMPLER_MODES, "sampler", f"must be one of {SAMPLER_MODES}")
    _check(o.name in OPTIMIZERS, "optimizer.name", f"must be one of {OPTIMIZERS}")
    _check(_number(o.learning_rate) and o.learning_rate > 0, "optimizer.learning_rate",
           "must be positive")
    _check(isinstance(o.batch_size, int) and o.batch_size >= 1, "optimizer.batch_size",
           "must be a positive integer")
    _check(_number(o.dropout) and 0 <= o.dropout < 1, "optimizer.dropout", "must lie in [0, 1)")
    _check(isinstance(cfg.seed, int) and 0 <= cfg.seed < 2**64, "seed",
           "must be an unsigned 64-bit integer")
    return cfg


def run_config_from_dict(data):
    return _validate(_build(RunConfig, data, ""))


def load_run_config(path):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"<root>: invalid JSON ({exc})") from None
    return run_config_from_dict(data)


def reference_run_config():
    """The pinned reference experiment shipped with the package."""
    from .tasks import reference_config

    return run_config_from_dict(reference_config())
