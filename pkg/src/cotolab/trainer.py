"""Progressive stochastic-gate fine-tuning of adapters, with checkpoints.

Each step draws one gate vector for the whole mini-batch, runs the gated
forward pass, and updates only the adapters whose gate was open. Closed
adapters are skipped by the optimizer as well, so neither their factors nor
their moment buffers move.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .adapters import (
    AdapterPair,
    BaseLayer,
    EnsembleAdapter,
    GatedModel,
    InvocationCounter,
    dropout_mask,
    low_rank_apply,
    ones_gates,
)
from .errors import (
    CheckpointDigestError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigurationError,
    ContractError,
    NumericError,
    TrainingDiverged,
)
from .schedule import (
    BATCH_STREAM,
    DROPOUT_STREAM,
    SAMPLER_MODES,
    ScheduleSpec,
    activation_prob,
    sample_gates,
)

OPTIMIZERS = ("adam", "sgd-momentum")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
SGD_MOMENTUM = 0.9

MAGIC = b"COTOCKPT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainingConfig:
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    sampler: str = "uniform"
    optimizer: str = "adam"
    learning_rate: float = 1e-2
    batch_size: int = 32
    loss: str = "softmax-cross-entropy"
    seed: int = 0
    dropout: float = 0.0
    eval_every: int = 100
    cosine_decay: bool = False

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", ScheduleSpec(**self.schedule))
        if self.sampler not in SAMPLER_MODES:
            raise ConfigurationError(f"sampler must be one of {SAMPLER_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.loss not in nx.LOSS_KINDS:
            raise ConfigurationError(f"loss must be one of {nx.LOSS_KINDS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")

    @property
    def total_steps(self):
        return self.schedule.total_steps

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self):
        return config_digest(self.to_dict())


def config_digest(obj):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class MetricsLog:
    """Append-only per-step and periodic evaluation records."""

    steps: list = field(default_factory=list)   # (step, p, train_loss, active_count)
    evals: list = field(default_factory=list)   # (step, eval_loss, eval_accuracy)
    invocations: list = field(default_factory=list)

    def log_step(self, step, p, train_loss, active):
        if self.steps and step <= self.steps[-1][0]:
            raise ContractError("metric steps must strictly increase")
        self.steps.append((int(step), float(p), float(train_loss), int(active)))

    def log_eval(self, step, loss, acc):
        if self.evals and step <= self.evals[-1][0]:
            raise ContractError("eval steps must strictly increase")
        self.evals.append((int(step), float(loss), float(acc)))

    def invocation_fraction(self):
        if not self.steps:
            return 0.0
        return sum(self.invocations) / (len(self.invocations) * len(self.steps))

    def steps_csv(self):
        return _csv_text(["step", "p", "train_loss", "active_count"], self.steps)

    def evals_csv(self):
        return _csv_text(["step", "eval_loss", "eval_accuracy"], self.evals)

    def to_dict(self):
        return {"steps": [list(r) for r in self.steps],
                "evals": [list(r) for r in self.evals],
                "invocations": list(map(int, self.invocations))}

    @classmethod
    def from_dict(cls, d):
        return cls([tuple(r) for r in d["steps"]], [tuple(r) for r in d["evals"]],
                   list(d["invocations"]))

    def copy(self):
        return MetricsLog(list(self.steps), list(self.evals), list(self.invocations))


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


@dataclass
class CheckpointBundle:
    """Everything needed to evaluate a model or continue its training run.

    Every random draw is counter-based in ``(seed, step)``, so
    the random stream position is simply ``step``.
    """

    model: GatedModel
    step: int
    config: TrainingConfig | None = None
    optimizer_state: dict = field(default_factory=dict)
    metrics: MetricsLog = field(default_factory=MetricsLog)
    extra: dict = field(default_factory=dict)  # free-form JSON stored in the manifest

    @property
    def seed(self):
        return None if self.config is None else self.config.seed

    @property
    def rng_position(self):
        return self.step

    @property
    def config_digest(self):
        return None if self.config is None else self.config.digest()


class _Trainable:
    """Graph view of one adapter for a single step."""

    def __init__(self, pair):
        self.a = nx.Node(pair.a, requires_grad=True)
        self.b = nx.Node(pair.b, requires_grad=True)
        self.alpha = pair.alpha
        self.shape = pair.shape

    def apply(self, x, dropout_mask=None):
        return low_rank_apply(x, self.a, self.b, self.alpha, dropout_mask)


def _batch_index(seed, t, n, batch_size):
    if batch_size >= n:
        return np.arange(n)
    rng = np.random.default_rng([BATCH_STREAM, seed, t])
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def _targets(dataset, loss_kind):
    """Labels as the loss expects them; MSE on class data regresses one-hot rows."""
    if loss_kind == "mse" and dataset.is_classification:
        return np.eye(dataset.n_classes)[dataset.labels]
    return dataset.labels


def _learning_rate(config, t):
    if not config.cosine_decay:
        return config.learning_rate
    frac = (t - 1) / config.total_steps
    return 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * frac))


def _empty_optimizer_state(model, config):
    state = {}
    for i, ad in enumerate(model.adapters):
        state[f"{i}/steps"] = 0
        for name, arr in (("a", ad.a), ("b", ad.b)):
            state[f"{i}/m_{name}"] = np.zeros_like(arr)
            if config.optimizer == "adam":
                state[f"{i}/v_{name}"] = np.zeros_like(arr)
    return state


def _update(param, grad, state, i, name, config, lr, k):
    m = state[f"{i}/m_{name}"]
    if config.optimizer == "adam":
        b1, b2 = ADAM_BETAS
        v = state[f"{i}/v_{name}"]
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        state[f"{i}/m_{name}"], state[f"{i}/v_{name}"] = m, v
        m_hat = m / (1.0 - b1**k)
        v_hat = v / (1.0 - b2**k)
        return param - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    m = SGD_MOMENTUM * m + grad
    state[f"{i}/m_{name}"] = m
    return param - lr * m


def evaluate(model, dataset, gates=None, loss_kind=None, batch_size=None):
    """Mean loss and accuracy with all gates open unless ``gates`` is given.

    Accuracy is NaN for regression data.
    """
    if loss_kind is None:
        loss_kind = "softmax-cross-entropy" if dataset.is_classification else "mse"
    n = len(dataset)
    step = n if batch_size is None else batch_size
    targets = _targets(dataset, loss_kind)
    losses, correct = [], 0
    for lo in range(0, n, step):
        x = dataset.inputs[lo:lo + step]
        pred = model.forward(x, gates)
        losses.append(nx.per_sample_loss(loss_kind, pred, targets[lo:lo + step]))
        if dataset.is_classification:
            correct += int(np.sum(np.argmax(pred, axis=1) == dataset.labels[lo:lo + step]))
    mean_loss = float(np.mean(np.concatenate(losses)))
    acc = correct / n if dataset.is_classification else float("nan")
    return mean_loss, acc


def train(model, dataset, config, eval_dataset=None, stop_at=None, resume=None):
    """Run the gated training loop; returns ``(CheckpointBundle, MetricsLog)``.

    ``stop_at`` ends the run early after that many steps (0 gives the
    initial state); feeding the returned bundle back as ``resume`` continues
    it exactly where it stopped.
    """
    T = config.total_steps
    if resume is not None:
        if resume.config is not None and resume.config_digest != config.digest():
            raise ContractError("resume checkpoint was produced by a different config")
        model = resume.model
        state = {k: (v.copy() if isinstance(v, np.ndarray) else v)
                 for k, v in resume.optimizer_state.items()}
        log = resume.metrics.copy()
        start = resume.step
    else:
        if len(dataset) < 1:
            raise ContractError("empty dataset")
        state = _empty_optimizer_state(model, config)
        log = MetricsLog(invocations=[0] * model.depth)
        start = 0
    if dataset.inputs.shape[1] != model.input_dim:
        raise ContractError("dataset width does not match model input")
    end = T if stop_at is None else min(int(stop_at), T)
    counter = InvocationCounter(model.depth)
    counter.counts[:] = log.invocations
    adapters = list(model.adapters)
    L = model.depth
    targets = _targets(dataset, config.loss)

    for t in range(start + 1, end + 1):
        p = activation_prob(t, config.schedule)
        gates = sample_gates(p, L, config.sampler, config.seed, t)
        idx = _batch_index(config.seed, t, len(dataset), config.batch_size)
        x, y = dataset.inputs[idx], targets[idx]

        graph = [(_Trainable(ad) if g else ad) for ad, g in zip(adapters, gates)]
        masks = None
        if config.dropout > 0.0:
            masks = [
                dropout_mask((x.shape[0], ad.rank), config.dropout,
                             np.random.default_rng([DROPOUT_STREAM, config.seed, t, i]))
                if g else None
                for i, (ad, g) in enumerate(zip(adapters, gates))
            ]
        before = (list(adapters), dict(state))

        def snapshot():
            return CheckpointBundle(model.with_adapters(before[0]), t - 1, config,
                                    before[1], log.copy())

        try:
            pred = model.with_adapters(graph).forward(x, gates, counter, masks)
            root = nx.loss(config.loss, pred, y)
        except NumericError:
            raise TrainingDiverged(f"non-finite prediction at step {t}", snapshot()) from None
        value = float(nx._val(root))
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {t}", snapshot())
        if isinstance(root, nx.Node) and root.requires_grad:
            nx.backward(root)
        lr = _learning_rate(config, t)
        for i, node in enumerate(graph):
            if not gates[i]:
                continue
            k = state[f"{i}/steps"] + 1
            state[f"{i}/steps"] = k
            a = _update(adapters[i].a, node.a.grad, state, i, "a", config, lr, k)
            b = _update(adapters[i].b, node.b.grad, state, i, "b", config, lr, k)
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise TrainingDiverged(f"non-finite adapter {i + 1} at step {t}", snapshot())
            adapters[i] = AdapterPair(a, b, adapters[i].alpha)
        log.invocations = [int(c) for c in counter.counts]
        log.log_step(t, p, value, int(gates.sum()))
        if eval_dataset is not None and (t % config.eval_every == 0 or t == T):
            ev_loss, ev_acc = evaluate(model.with_adapters(adapters), eval_dataset,
                                       loss_kind=config.loss)
            log.log_eval(t, ev_loss, ev_acc)

    final = model.with_adapters(adapters)
    return CheckpointBundle(final, end, config, state, log), log


# -- checkpoint file -------------------------------------------------------

def _tensors(bundle):
    model = bundle.model
    out = [(f"base/{i}/w", layer.w) for i, layer in enumerate(model.layers)]
    out.append(("head", model.head))
    for i, ad in enumerate(model.adapters):
        pairs = [("", ad)] if isinstance(ad, AdapterPair) else [("1/", ad.first), ("2/", ad.second)]
        for tag, pair in pairs:
            out.append((f"adapter/{i}/{tag}a", pair.a))
            out.append((f"adapter/{i}/{tag}b", pair.b))
    for key, value in sorted(bundle.optimizer_state.items()):
        if isinstance(value, np.ndarray):
            out.append((f"opt/{key}", value))
    return out


def _architecture(model):
    adapters = []
    for ad in model.adapters:
        if isinstance(ad, AdapterPair):
            adapters.append({"kind": "pair", "alpha": ad.alpha, "rank": ad.rank})
        else:
            adapters.append({"kind": "ensemble", "lam": ad.lam,
                             "alpha": [ad.first.alpha, ad.second.alpha],
                             "rank": [ad.first.rank, ad.second.rank]})
    return {"layers": [{"shape": list(l.shape), "nonlinearity": l.nonlinearity}
                       for l in model.layers],
            "head": list(model.head.shape),
            "adapters": adapters}


def checkpoint_bytes(bundle):
    tensors = _tensors(bundle)
    entries, chunks, offset = [], [], 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    counters = {k: int(v) for k, v in bundle.optimizer_state.items()
                if not isinstance(v, np.ndarray)}
    manifest = {
        "architecture": _architecture(bundle.model),
        "config": None if bundle.config is None else bundle.config.to_dict(),
        "config_digest": bundle.config_digest,
        "step": bundle.step,
        "seed": bundle.seed,
        "rng_position": bundle.rng_position,
        "optimizer_counters": counters,
        "metrics": bundle.metrics.to_dict(),
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": bundle.extra,
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<Q", len(head)) + head + payload


def save_checkpoint(bundle, path):
    """Write ``bundle`` atomically (temporary file, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(bundle))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())


def parse_checkpoint(data):
    if len(data) < 8 or data[:8] != MAGIC:
        if len(data) < 8 and MAGIC.startswith(data):
            raise CheckpointTruncatedError("file ends inside the magic bytes")
        raise CheckpointFormatError("not a cotolab checkpoint (bad magic bytes)")
    if len(data) < 20:
        raise CheckpointTruncatedError("file ends inside the header")
    (version,) = struct.unpack("<I", data[8:12])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version}, expected {FORMAT_VERSION}")
    (head_len,) = struct.unpack("<Q", data[12:20])
    if len(data) < 20 + head_len:
        raise CheckpointTruncatedError("file ends inside the manifest")
    try:
        manifest = json.loads(data[20:20 + head_len])
    except ValueError as exc:
        raise CheckpointFormatError(f"manifest is not valid JSON: {exc}") from None
    payload = data[20 + head_len:]
    expected = sum(e["length"] for e in manifest["tensors"])
    if len(payload) < expected:
        raise CheckpointTruncatedError(f"payload has {len(payload)} of {expected} bytes")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointDigestError("payload digest mismatch")
    config = manifest["config"]
    config = None if config is None else TrainingConfig.from_dict(config)
    if config is not None and config.digest() != manifest["config_digest"]:
        raise CheckpointDigestError("config digest mismatch")

    arrays = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["length"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)

    arch = manifest["architecture"]
    layers = [BaseLayer(arrays[f"base/{i}/w"], spec["nonlinearity"])
              for i, spec in enumerate(arch["layers"])]
    adapters = []
    for i, spec in enumerate(arch["adapters"]):
        if spec["kind"] == "pair":
            adapters.append(AdapterPair(arrays[f"adapter/{i}/a"], arrays[f"adapter/{i}/b"],
                                        spec["alpha"]))
        else:
            first = AdapterPair(arrays[f"adapter/{i}/1/a"], arrays[f"adapter/{i}/1/b"],
                                spec["alpha"][0])
            second = AdapterPair(arrays[f"adapter/{i}/2/a"], arrays[f"adapter/{i}/2/b"],
                                 spec["alpha"][1])
            adapters.append(EnsembleAdapter(first, second, spec["lam"]))
    model = GatedModel(layers, adapters, arrays["head"])
    state = {k[len("opt/"):]: v for k, v in arrays.items() if k.startswith("opt/")}
    state.update(manifest["optimizer_counters"])
    return CheckpointBundle(model, manifest["step"], config, state,
                            MetricsLog.from_dict(manifest["metrics"]), manifest.get("extra", {}))


# -- weight distances ------------------------------------------------------

def _adapter_vectors(obj):
    model = obj.model if isinstance(obj, CheckpointBundle) else obj
    vecs = []
    for ad in model.adapters:
        vecs.append(np.concatenate([np.ravel(p) for p in ad.parameters()]))
    return vecs


def weight_distance(x, y):
    """Mean over layers of the Euclidean distance between adapter parameters."""
    vx, vy = _adapter_vectors(x), _adapter_vectors(y)
    if len(vx) != len(vy) or any(a.shape != b.shape for a, b in zip(vx, vy)):
        raise ContractError("checkpoints do not share an adapter architecture")
    return float(np.mean([np.linalg.norm(a - b) for a, b in zip(vx, vy)]))


def weight_distance_report(ckpts, pairs=None):
    """Rows ``(name_a, name_b, distance)``.

    ``ckpts`` maps names to checkpoints or models; ``pairs`` defaults to every
    unordered pair.
    """
    names = list(ckpts)
    if pairs is None:
        pairs = [(a, b) for k, a in enumerate(names) for b in names[k + 1:]]
    return [(a, b, weight_distance(ckpts[a], ckpts[b])) for a, b in pairs]
