import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cotolab.adapters import (
    AdapterPair,
    InvocationCounter,
    build_model,
    dropout_mask,
    gates_from_subset,
    init_adapters,
    ones_gates,
    zeros_gates,
)
from cotolab.errors import ConfigurationError, ContractError, DimensionError

from conftest import randomize_adapters


def dense_oracle(model, x, gates):
    """Materialize W + alpha B A per layer and run the network with plain numpy."""
    h = np.asarray(x, dtype=np.float64)
    for layer, ad, g in zip(model.layers, model.adapters, gates):
        w = layer.w + (ad.alpha * ad.b @ ad.a if g else 0.0)
        z = h @ w.T
        kind = layer.nonlinearity
        act = {"tanh": np.tanh, "relu": lambda v: np.maximum(v, 0.0),
               "identity": lambda v: v}[kind.replace("-residual", "")]
        h = h + act(z) if kind.endswith("-residual") else act(z)
    return h @ model.head.T


class TestInit:
    def test_delta_is_zero(self, rng):
        for ad in init_adapters([(5, 4), (3, 5)], 2, 1.0, rng):
            assert not np.any(ad.delta())

    def test_same_seed_same_a(self):
        first = init_adapters([(6, 6)], 2, 1.0, np.random.default_rng(3))
        second = init_adapters([(6, 6)], 2, 1.0, np.random.default_rng(3))
        assert first[0].a.tobytes() == second[0].a.tobytes()

    def test_uniform_law(self):
        n = 25
        ads = init_adapters([(n, n)] * 400, 10, 1.0, np.random.default_rng(0))
        entries = np.concatenate([ad.a.ravel() for ad in ads])
        assert entries.size == 100_000
        assert abs(entries.mean()) <= 0.01
        assert np.all(np.abs(entries) <= 1 / np.sqrt(n))

    def test_rank_too_large(self, rng):
        with pytest.raises(ConfigurationError):
            init_adapters([(3, 8)], 4, 1.0, rng)

    def test_rank_zero(self, rng):
        with pytest.raises(ConfigurationError):
            init_adapters([(3, 3)], 0, 1.0, rng)


class TestAdapterPair:
    def test_hand_delta(self):
        ad = AdapterPair(np.array([[3.0, 4.0]]), np.array([[1.0], [2.0]]), 1.0)
        assert np.array_equal(ad.delta(), [[3.0, 4.0], [6.0, 8.0]])

    def test_zero_alpha(self, rng):
        ad = AdapterPair(rng.normal(size=(2, 4)), rng.normal(size=(3, 2)), 0.0)
        assert not np.any(ad.delta())

    def test_triple_loop_delta(self, rng):
        a, b = rng.normal(size=(2, 4)), rng.normal(size=(3, 2))
        ad = AdapterPair(a, b, 0.7)
        oracle = np.array([[0.7 * sum(b[i, k] * a[k, j] for k in range(2)) for j in range(4)]
                           for i in range(3)])
        assert np.max(np.abs(ad.delta() - oracle)) <= 1e-12

    def test_rank_mismatch(self, rng):
        with pytest.raises(DimensionError):
            AdapterPair(rng.normal(size=(2, 4)), rng.normal(size=(3, 3)))


class TestForward:
    def test_closed_gates_give_base(self, small_model, rng):
        x = rng.normal(size=(7, 5))
        assert np.array_equal(small_model.forward(x, zeros_gates(4)), small_model.base_forward(x))
        bare = small_model.with_adapters(init_adapters(
            [l.shape for l in small_model.layers], 2, 1.0, rng))
        assert np.array_equal(small_model.forward(x, zeros_gates(4)), bare.forward(x))

    def test_fresh_adapters_match_base_for_any_gates(self, rng):
        model = build_model(rng, 5, [6, 6, 6], 2)
        x = rng.normal(size=(4, 5))
        for gates in ([1, 1, 1], [1, 0, 1], [0, 1, 0]):
            np.testing.assert_allclose(model.forward(x, np.array(gates)), model.base_forward(x),
                                       rtol=0, atol=0)

    @pytest.mark.parametrize("act", ["tanh", "relu", "identity", "tanh-residual", "relu-residual"])
    def test_dense_oracle(self, rng, act):
        model = randomize_adapters(build_model(rng, 6, [6, 6, 6], 3, nonlinearity=act), rng)
        x = rng.normal(size=(5, 6))
        for gates in (ones_gates(3), np.array([1, 0, 1], dtype=np.int8)):
            got, want = model.forward(x, gates), dense_oracle(model, x, gates)
            assert np.max(np.abs(got - want)) <= 1e-10 * max(1.0, np.max(np.abs(want)))

    def test_closed_gate_never_reads_adapter(self, small_model, rng):
        class Trap:
            shape, rank = small_model.adapters[1].shape, 2

            def apply(self, *_):
                raise AssertionError("closed adapter was evaluated")

        trapped = list(small_model.adapters)
        trapped[1] = Trap()
        model = small_model.with_adapters(trapped)
        model.forward(rng.normal(size=(2, 5)), np.array([1, 0, 1, 1]))

    def test_counter_counts_only_open_gates(self, small_model, rng):
        counter = InvocationCounter(4)
        x = rng.normal(size=(3, 5))
        small_model.forward(x, np.array([1, 0, 1, 0]), counter)
        small_model.forward(x, np.array([1, 1, 0, 0]), counter)
        assert counter.counts.tolist() == [2, 1, 1, 0]

    def test_gate_length_checked(self, small_model, rng):
        with pytest.raises(DimensionError):
            small_model.forward(rng.normal(size=(2, 5)), np.ones(3))

    def test_input_width_checked(self, small_model, rng):
        with pytest.raises(DimensionError):
            small_model.forward(rng.normal(size=(2, 4)))

    def test_non_binary_gate(self, small_model, rng):
        with pytest.raises(ContractError):
            small_model.forward(rng.normal(size=(2, 5)), np.array([1, 2, 0, 0]))

    def test_shape_chain_validated(self, rng):
        model = build_model(rng, 4, [5, 6], 2)
        with pytest.raises(DimensionError):
            model.with_adapters([model.adapters[1], model.adapters[0]])

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(1, 6), min_size=1, max_size=5), st.integers(0, 2**32 - 1))
    def test_validated_model_never_shape_errors(self, widths, seed):
        r = np.random.default_rng(seed)
        model = randomize_adapters(build_model(r, 3, widths, 2, rank=1), r)
        gates = r.integers(0, 2, len(widths))
        out = model.forward(r.normal(size=(4, 3)), gates)
        assert out.shape == (4, 2)


class TestAdapterDelta:
    def test_one_based(self, small_model):
        assert np.array_equal(small_model.adapter_delta(1), small_model.adapters[0].delta())

    @pytest.mark.parametrize("i", [0, 5])
    def test_out_of_range(self, small_model, i):
        with pytest.raises(ContractError):
            small_model.adapter_delta(i)


class TestDropout:
    def test_rate_zero_identity(self, rng):
        assert np.array_equal(dropout_mask((3, 2), 0.0, rng), np.ones((3, 2)))

    def test_rate_one_rejected(self, rng):
        with pytest.raises(ConfigurationError):
            dropout_mask((1, 1), 1.0, rng)

    def test_inverted_scaling_preserves_mean(self):
        mask = dropout_mask((100_000,), 0.5, np.random.default_rng(5))
        value = 3.0
        assert abs((mask * value).mean() - value) <= 0.01 * value

    def test_evaluation_ignores_dropout(self, small_model, rng):
        """Evaluation takes no mask, so any training rate leaves it unchanged."""
        x = rng.normal(size=(3, 5))
        ones = [np.ones((3, 2))] * 4
        assert np.array_equal(small_model.forward(x), small_model.forward(x, dropout_masks=ones))


def test_gates_from_subset():
    assert gates_from_subset({1, 3}, 4).tolist() == [1, 0, 1, 0]
