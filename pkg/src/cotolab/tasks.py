"""Seeded synthetic tasks and strict CSV loading."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, ParseError


@dataclass(frozen=True)
class Dataset:
    """Inputs (N x d) with class indices, or regression targets (N x k)."""

    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int | None = None
    split: str = "train"

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ContractError("dataset needs at least one row of 2-D inputs")
        if self.n_classes is None:
            y = np.asarray(self.labels, dtype=np.float64)
            if y.ndim == 1:
                y = y.reshape(-1, 1)
        else:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise ContractError(f"class index outside [0, {self.n_classes})")
        if y.shape[0] != x.shape[0]:
            raise ContractError(f"{y.shape[0]} labels for {x.shape[0]} inputs")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def is_classification(self):
        return self.n_classes is not None

    def subset(self, index, split=None):
        return Dataset(self.inputs[index], self.labels[index], self.n_classes,
                       split or self.split)

    def digest(self):
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update(repr(self.n_classes).encode())
        return h.hexdigest()


def teacher_network(rng, d, classes, depth, width=None):
    """Random tanh teacher: ``depth - 1`` hidden layers then a linear readout."""
    width = width or d
    dims = [d] + [width] * (depth - 1)
    hidden = [rng.normal(0.0, 1.5 / np.sqrt(n), size=(m, n)) for n, m in zip(dims[:-1], dims[1:])]
    readout = rng.normal(0.0, 1.0 / np.sqrt(dims[-1]), size=(classes, dims[-1]))

    def logits(x):
        h = x
        for w in hidden:
            h = np.tanh(h @ w.T)
        return h @ readout.T

    return logits


def _take_per_class(labels, keep, quota):
    picked = []
    for c in range(len(quota)):
        idx = np.flatnonzero((labels == c) & keep)
        picked.append(idx[: quota[c]])
    return picked


def gen_teacher_task(seed, n, d, classes, teacher_depth, margin=0.0, max_pool=200):
    """Class-balanced teacher-labelled data, split 80/20 with stratification.

    Inputs are standard normal and labels are the teacher's argmax. Points
    whose top-two logit gap is below ``margin`` are discarded. Candidates are
    drawn in rounds until every class reaches ``n // classes`` (the remainder
    goes to the lowest classes); if a class stays too rare after
    ``max_pool * n`` candidates the task is rejected.
    """
    if classes < 2:
        raise ConfigurationError("need at least two classes")
    if n < 10 * classes:
        raise ConfigurationError("need n >= 10 * classes")
    if teacher_depth < 1:
        raise ConfigurationError("teacher_depth must be at least 1")
    rng = np.random.default_rng([0x7EAC, seed])
    teacher = teacher_network(rng, d, classes, teacher_depth)
    quota = np.full(classes, n // classes)
    quota[: n % classes] += 1

    xs, ys = [], []
    counts = np.zeros(classes, dtype=np.int64)
    drawn = 0
    while np.any(counts < quota):
        if drawn >= max_pool * n:
            raise ConfigurationError("infeasible stratification: a class is too rare under this teacher")
        x = rng.standard_normal((n, d))
        drawn += n
        z = teacher(x)
        top2 = np.sort(z, axis=1)[:, -2:]
        keep = (top2[:, 1] - top2[:, 0]) >= margin
        y = np.argmax(z, axis=1)
        for c, idx in enumerate(_take_per_class(y, keep, quota - counts)):
            xs.append(x[idx])
            ys.append(np.full(idx.size, c))
            counts[c] += idx.size
    x = np.concatenate(xs)
    y = np.concatenate(ys)

    train_idx, eval_idx = [], []
    for c in range(classes):
        idx = rng.permutation(np.flatnonzero(y == c))
        cut = int(round(0.8 * idx.size))
        train_idx.append(idx[:cut])
        eval_idx.append(idx[cut:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    eval_idx = rng.permutation(np.concatenate(eval_idx))
    full = Dataset(x, y, classes)
    return full.subset(train_idx, "train"), full.subset(eval_idx, "eval")


@dataclass(frozen=True)
class CsvSchema:
    """Expected layout: ``n_features`` numeric columns then a ``label`` column.

    With ``n_classes`` set, labels must be integer indices below it;
    otherwise the label is a float regression target.
    """

    n_features: int
    n_classes: int | None = None


def write_csv(dataset, path):
    """Write a dataset in the layout :func:`load_csv` accepts (floats round-trip)."""
    path = Path(path)
    d = dataset.inputs.shape[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{k}" for k in range(d)] + ["label"])
        labels = dataset.labels
        for row, lab in zip(dataset.inputs, labels):
            lab = int(lab) if dataset.is_classification else repr(float(np.ravel(lab)[0]))
            w.writerow([repr(float(v)) for v in row] + [lab])


def load_csv(path, schema, split="train"):
    """Parse a headered CSV strictly; any defect raises :class:`ParseError`."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", line=1)
    header = rows[0]
    width = schema.n_features + 1
    if len(header) != width:
        raise ParseError(f"expected {width} columns, header has {len(header)}", line=1)
    if header[-1].strip() != "label":
        raise ParseError("final column must be named 'label'", line=1)
    body = rows[1:]
    if not body:
        raise ParseError("no data rows", line=2)
    x = np.empty((len(body), schema.n_features))
    labels = []
    for k, row in enumerate(body):
        line = k + 2
        if len(row) != width:
            raise ParseError(f"expected {width} fields, found {len(row)}", line=line)
        try:
            x[k] = [float(v) for v in row[:-1]]
        except ValueError as exc:
            raise ParseError(f"non-numeric cell ({exc})", line=line) from None
        if not np.all(np.isfinite(x[k])):
            raise ParseError("non-finite cell", line=line)
        raw = row[-1].strip()
        if schema.n_classes is None:
            try:
                labels.append(float(raw))
            except ValueError:
                raise ParseError(f"non-numeric label {raw!r}", line=line) from None
        else:
            if not raw.lstrip("-").isdigit() or not 0 <= int(raw) < schema.n_classes:
                raise ParseError(f"unknown label {raw!r}", line=line)
            labels.append(int(raw))
    return Dataset(x, np.array(labels), schema.n_classes, split)


def reference_config():
    """The pinned reference experiment used by every directional check."""
    text = resources.files("cotolab").joinpath("configs/reference.json").read_text()
    return json.loads(text)
