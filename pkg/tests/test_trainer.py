import numpy as np
import pytest

from cotolab import numerics as nx
from cotolab.adapters import AdapterPair, build_model, zeros_gates
from cotolab.errors import (
    CheckpointDigestError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractError,
    TrainingDiverged,
)
from cotolab.schedule import ScheduleSpec, activation_prob, sample_gates
from cotolab.tasks import gen_teacher_task
from cotolab.trainer import (
    MAGIC,
    CheckpointBundle,
    MetricsLog,
    TrainingConfig,
    checkpoint_bytes,
    evaluate,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
    train,
    weight_distance,
    weight_distance_report,
)


@pytest.fixture(scope="module")
def task():
    return gen_teacher_task(4, 300, 5, 3, 2)


def make_model(seed=0, depth=3, act="tanh"):
    return build_model(np.random.default_rng(seed), 5, [6] * depth, 3, rank=2, nonlinearity=act)


def short_config(**kw):
    base = dict(schedule=ScheduleSpec("linear", 0.75, 120), seed=3, eval_every=40)
    base.update(kw)
    return TrainingConfig(**base)


class TestTrain:
    def test_deterministic(self, task):
        tr, ev = task
        _, log1 = train(make_model(), tr, short_config(), ev)
        _, log2 = train(make_model(), tr, short_config(), ev)
        assert log1.steps_csv() == log2.steps_csv()
        assert log1.evals_csv() == log2.evals_csv()
        assert log1.invocations == log2.invocations

    def test_base_weights_frozen(self, task):
        model = make_model()
        bundle, _ = train(model, task[0], short_config())
        for before, after in zip(model.layers, bundle.model.layers):
            assert before.w.tobytes() == after.w.tobytes()
        assert model.head.tobytes() == bundle.model.head.tobytes()

    def test_logged_gates_follow_the_stream(self, task):
        cfg = short_config()
        _, log = train(make_model(), task[0], cfg)
        for step, p, _, active in log.steps:
            assert p == activation_prob(step, cfg.schedule)
            assert active == sample_gates(p, 3, "uniform", cfg.seed, step).sum()
        assert all(active == 3 for step, _, _, active in log.steps if step >= 90)

    def test_closed_gate_leaves_adapter_and_moments_untouched(self, task):
        cfg = short_config()
        tr = task[0]
        t = next(t for t in range(2, 80)
                 if 0 < sample_gates(activation_prob(t, cfg.schedule), 3, "uniform", cfg.seed, t).sum() < 3)
        before, _ = train(make_model(), tr, cfg, stop_at=t - 1)
        after, _ = train(None, tr, cfg, stop_at=t, resume=before)
        gates = sample_gates(activation_prob(t, cfg.schedule), 3, "uniform", cfg.seed, t)
        for i, g in enumerate(gates):
            same = (before.model.adapters[i].a.tobytes() == after.model.adapters[i].a.tobytes()
                    and before.model.adapters[i].b.tobytes() == after.model.adapters[i].b.tobytes())
            moments = all(np.array_equal(before.optimizer_state[f"{i}/{k}"],
                                         after.optimizer_state[f"{i}/{k}"])
                          for k in ("m_a", "m_b", "v_a", "v_b"))
            assert same == (g == 0)
            if g == 0:
                assert moments

    def test_invocation_counts(self, task):
        cfg = short_config()
        _, log = train(make_model(), task[0], cfg)
        assert sum(log.invocations) == sum(r[3] for r in log.steps)

    def test_baseline_always_active(self, task):
        cfg = short_config(schedule=ScheduleSpec("linear", 0.0, 60))
        _, log = train(make_model(), task[0], cfg)
        assert log.invocation_fraction() == 1.0

    def test_learns_separable_task(self):
        tr, ev = gen_teacher_task(3, 600, 4, 2, 1, margin=0.5)
        model = build_model(np.random.default_rng(0), 4, [4] * 4, 2, nonlinearity="tanh-residual")
        bundle, _ = train(model, tr, TrainingConfig(ScheduleSpec("linear", 0.75, 2000), seed=1))
        assert evaluate(bundle.model, ev)[1] >= 0.99

    @pytest.mark.parametrize("opt", ["adam", "sgd-momentum"])
    def test_loss_goes_down(self, task, opt):
        cfg = short_config(optimizer=opt, learning_rate=0.05 if opt == "sgd-momentum" else 0.01,
                           schedule=ScheduleSpec("linear", 0.5, 300))
        model = make_model()
        bundle, _ = train(model, task[0], cfg)
        assert evaluate(bundle.model, task[0])[0] < evaluate(model, task[0])[0]

    def test_dropout_and_cosine_run(self, task):
        cfg = short_config(dropout=0.3, cosine_decay=True)
        _, log1 = train(make_model(), task[0], cfg)
        _, log2 = train(make_model(), task[0], cfg)
        assert log1.steps == log2.steps

    def test_mse_on_class_labels(self, task):
        cfg = short_config(loss="mse")
        bundle, log = train(make_model(), task[0], cfg)
        assert np.isfinite(log.steps[-1][2])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_carries_checkpoint(self, task):
        cfg = short_config(optimizer="sgd-momentum", learning_rate=1e8, loss="mse")
        with pytest.raises(TrainingDiverged) as info:
            train(make_model(act="identity"), task[0], cfg)
        snap = info.value.checkpoint
        assert isinstance(snap, CheckpointBundle)
        assert snap.step == len(snap.metrics.steps)
        # the diagnostic checkpoint is finite and can be written out
        assert all(np.all(np.isfinite(p)) for ad in snap.model.adapters for p in ad.parameters())
        parse_checkpoint(checkpoint_bytes(snap))

    def test_empty_dataset(self, task):
        with pytest.raises(ContractError):
            train(make_model(), task[0].subset(np.array([], dtype=int)), short_config())


class TestEvaluate:
    def test_closed_gates_equal_base(self, task):
        tr, _ = task
        bundle, _ = train(make_model(), tr, short_config())
        base = make_model()
        assert evaluate(bundle.model, tr, zeros_gates(3)) == evaluate(base, tr, zeros_gates(3))

    def test_batch_partition_invariant(self, task):
        bundle, _ = train(make_model(), task[0], short_config())
        full = evaluate(bundle.model, task[1])
        for bs in (1, 7, 50):
            loss, acc = evaluate(bundle.model, task[1], batch_size=bs)
            assert loss == pytest.approx(full[0], rel=1e-12)
            assert acc == full[1]

    def test_one_sample_oracle(self, task):
        bundle, _ = train(make_model(), task[0], short_config())
        ev = task[1]
        losses, hits = [], 0
        for x, y in zip(ev.inputs, ev.labels):
            pred = bundle.model.forward(x[None, :])
            losses.append(nx.loss("softmax-cross-entropy", pred, np.array([y])))
            hits += int(np.argmax(pred) == y)
        loss, acc = evaluate(bundle.model, ev)
        assert abs(loss - np.mean(losses)) <= 1e-10
        assert acc == hits / len(ev)


class TestCheckpoint:
    @pytest.fixture
    def bundle(self, task):
        return train(make_model(), task[0], short_config(), task[1])[0]

    def test_round_trip(self, bundle, tmp_path, rng):
        path = save_checkpoint(bundle, tmp_path / "a.ckpt")
        back = load_checkpoint(path)
        x = rng.normal(size=(4, 5))
        assert bundle.model.forward(x).tobytes() == back.model.forward(x).tobytes()
        assert back.step == bundle.step
        assert back.config_digest == bundle.config_digest
        assert back.metrics.steps == bundle.metrics.steps
        for k, v in bundle.optimizer_state.items():
            assert np.array_equal(back.optimizer_state[k], v)

    def test_header_layout(self, bundle):
        raw = checkpoint_bytes(bundle)
        assert raw[:8] == MAGIC == b"COTOCKPT"
        assert int.from_bytes(raw[8:12], "little") == 1

    def test_bad_magic(self, bundle):
        raw = bytearray(checkpoint_bytes(bundle))
        raw[0:8] = b"NOTACKPT"
        with pytest.raises(CheckpointFormatError):
            parse_checkpoint(bytes(raw))

    def test_version_mismatch(self, bundle):
        raw = bytearray(checkpoint_bytes(bundle))
        raw[8:12] = (99).to_bytes(4, "little")
        with pytest.raises(CheckpointVersionError):
            parse_checkpoint(bytes(raw))

    def test_payload_digest(self, bundle):
        raw = bytearray(checkpoint_bytes(bundle))
        raw[-1] ^= 0xFF
        with pytest.raises(CheckpointDigestError):
            parse_checkpoint(bytes(raw))

    @pytest.mark.parametrize("cut", [4, 16, 200, -8])
    def test_truncated(self, bundle, cut):
        raw = checkpoint_bytes(bundle)
        with pytest.raises(CheckpointTruncatedError):
            parse_checkpoint(raw[:cut])

    def test_extra_round_trips(self, bundle):
        bundle.extra["note"] = {"k": [1, 2]}
        assert parse_checkpoint(checkpoint_bytes(bundle)).extra == {"note": {"k": [1, 2]}}

    def test_resume_matches_uninterrupted(self, task, tmp_path):
        tr, ev = task
        cfg = short_config()
        full, full_log = train(make_model(), tr, cfg, ev)
        half, _ = train(make_model(), tr, cfg, ev, stop_at=cfg.total_steps // 2)
        path = save_checkpoint(half, tmp_path / "half.ckpt")
        resumed, log = train(None, tr, cfg, ev, resume=load_checkpoint(path))
        assert log.steps_csv() == full_log.steps_csv()
        assert log.evals_csv() == full_log.evals_csv()
        assert checkpoint_bytes(resumed) == checkpoint_bytes(full)

    def test_resume_rejects_other_config(self, task):
        half, _ = train(make_model(), task[0], short_config(), stop_at=10)
        with pytest.raises(ContractError):
            train(None, task[0], short_config(seed=4), resume=half)


class TestMetricsLog:
    def test_steps_strictly_increase(self):
        log = MetricsLog()
        log.log_step(1, 0.1, 1.0, 2)
        with pytest.raises(ContractError):
            log.log_step(1, 0.1, 1.0, 2)

    def test_csv_headers(self):
        log = MetricsLog()
        assert log.steps_csv().splitlines()[0] == "step,p,train_loss,active_count"
        assert log.evals_csv().splitlines()[0] == "step,eval_loss,eval_accuracy"


class TestDistances:
    def test_self_and_symmetry(self, task):
        a = train(make_model(), task[0], short_config())[0]
        b = train(make_model(), task[0], short_config(seed=9))[0]
        assert weight_distance(a, a) == 0.0
        assert weight_distance(a, b) == weight_distance(b, a)

    def test_hand_value(self):
        model = build_model(np.random.default_rng(0), 2, [2], 1, rank=1)
        a = model.with_adapters([AdapterPair(np.array([[0.0, 0.0]]), np.array([[0.0], [0.0]]))])
        b = model.with_adapters([AdapterPair(np.array([[3.0, 0.0]]), np.array([[0.0], [4.0]]))])
        assert weight_distance(a, b) == 5.0

    def test_report_rows(self, task):
        ckpts = {name: make_model(seed) for name, seed in (("x", 0), ("y", 1), ("z", 2))}
        rows = weight_distance_report(ckpts)
        assert [(r[0], r[1]) for r in rows] == [("x", "y"), ("x", "z"), ("y", "z")]

    def test_architecture_mismatch(self):
        with pytest.raises(ContractError):
            weight_distance(make_model(depth=2), make_model(depth=3))
