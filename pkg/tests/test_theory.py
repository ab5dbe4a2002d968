import numpy as np
import pytest

from cotolab import numerics as nx
from cotolab.adapters import build_model
from cotolab.errors import ContractError
from cotolab.theory import (
    count_masks,
    decomposition_check,
    random_model,
    subnetwork_expected_prediction,
    verify_bound,
)

P_GRID = np.linspace(0.1, 0.9, 9)


def sample(rng, model, n=8, kind="mse"):
    x = rng.normal(size=(n, model.input_dim))
    y = rng.normal(size=(n, model.output_dim)) if kind == "mse" else rng.integers(
        0, model.output_dim, n)
    return x, y


class TestSubnetworkPrediction:
    def test_all_and_none(self, rng):
        model = random_model(rng, 4)
        x = rng.normal(size=(5, 3))
        assert np.array_equal(subnetwork_expected_prediction(model, x, 4), model.forward(x))
        assert np.array_equal(subnetwork_expected_prediction(model, x, 0), model.base_forward(x))

    def test_six_mask_oracle(self, rng):
        model = random_model(rng, 4)
        x = rng.normal(size=(5, 3))
        masks = [(1, 1, 0, 0), (1, 0, 1, 0), (1, 0, 0, 1), (0, 1, 1, 0), (0, 1, 0, 1), (0, 0, 1, 1)]
        oracle = sum(model.forward(x, np.array(m)) for m in masks) / 6
        assert np.max(np.abs(subnetwork_expected_prediction(model, x, 2) - oracle)) <= 1e-12

    def test_monte_carlo_fallback(self, rng):
        model = random_model(rng, 4)
        x = rng.normal(size=(3, 3))
        approx = subnetwork_expected_prediction(model, x, 2, samples=4000, rng=rng)
        exact = subnetwork_expected_prediction(model, x, 2)
        assert np.max(np.abs(approx - exact)) < 0.1 * max(1.0, np.max(np.abs(exact)))

    def test_bad_size(self, rng):
        with pytest.raises(ContractError):
            subnetwork_expected_prediction(random_model(rng, 2), np.zeros((1, 3)), 3)


class TestBound:
    @pytest.mark.parametrize("kind", nx.LOSS_KINDS)
    def test_degenerate_ends(self, rng, kind):
        model = random_model(rng, 3)
        x, y = sample(rng, model, kind=kind)
        rep = verify_bound(model, x, y, [0.0, 1.0], kind)
        full = nx.loss(kind, model.forward(x), y)
        base = nx.loss(kind, model.base_forward(x), y)
        assert abs(rep.lhs[1] - full) <= 1e-12 and abs(rep.rhs_full[1] - full) <= 1e-12
        assert abs(rep.lhs[0] - base) <= 1e-12 and abs(rep.rhs_full[0] - base) <= 1e-12
        # the j >= 1 sum drops the only term that carries weight at p = 0
        assert rep.rhs_j_ge_1[0] == 0.0

    def test_random_three_layer_mse(self, rng):
        model = random_model(rng, 3)
        x, y = sample(rng, model)
        rep = verify_bound(model, x, y, P_GRID, "mse")
        assert rep.n_masks == 8
        assert rep.holds and np.all(rep.gap >= -1e-9)
        assert np.any(rep.gap > 1e-6)

    def test_decomposition_identity(self, rng):
        model = random_model(rng, 4)
        x, y = sample(rng, model, kind="softmax-cross-entropy")
        for p in (0.2, 0.5, 0.8):
            lhs, rhs = decomposition_check(model, x, y, p, "softmax-cross-entropy")
            assert abs(lhs - rhs) <= 1e-10

    def test_rows_layout(self, rng):
        model = random_model(rng, 2)
        x, y = sample(rng, model)
        rows = verify_bound(model, x, y, [0.5], "mse").rows()
        assert len(rows[0]) == 5 and rows[0][4] == pytest.approx(rows[0][1] - rows[0][2])

    def test_nonconvex_loss_rejected(self, rng):
        model = random_model(rng, 2)
        with pytest.raises(ContractError):
            verify_bound(model, np.zeros((1, 3)), np.zeros((1, 2)), [0.5], "hinge")

    def test_depth_limit(self, rng):
        model = build_model(rng, 2, [2] * 15, 2, rank=1)
        with pytest.raises(ContractError):
            verify_bound(model, np.zeros((1, 2)), np.zeros((1, 2)), [0.5], "mse")


def test_count_masks():
    assert count_masks(6) == 64
