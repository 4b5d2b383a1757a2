"""Model fitting, Jacobian oracles, and the row/null decomposition."""

import json

import numpy as np
import pytest

from aniso_ldp.errors import DivergenceError, SingularSystemError
from aniso_ldp.models import (
    LinearModel,
    MlpModel,
    decompose_row_null,
    fit_ols,
    jacobian,
    load_model,
    model_hash,
    save_model,
    train_classifier,
)

from oracles import finite_difference_jacobian, perceptron_separable


def _random_mlp(m, activation, seed=0, out=3):
    rng = np.random.default_rng(seed)
    dims = [m, 10, 32, out]
    weights = [rng.normal(0, 1.0 / np.sqrt(i), size=(o, i)) for i, o in zip(dims, dims[1:])]
    biases = [rng.normal(0, 0.1, size=o) for o in dims[1:]]
    return MlpModel(weights=weights, biases=biases, activation=activation)


class TestFitOls:
    def test_zero_targets(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(40, 3))
        model = fit_ols(x, np.zeros(40))
        np.testing.assert_allclose(model.weights, 0.0, atol=1e-10)
        np.testing.assert_allclose(model.bias, 0.0, atol=1e-10)

    def test_noiseless_plane_matches_normal_equations(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(60, 2))
        y = 2.0 * x[:, 0] + 3.0 * x[:, 1] + 1.0
        model = fit_ols(x, y)
        np.testing.assert_allclose(model.weights.ravel(), [2.0, 3.0], atol=1e-8)
        assert model.bias[0] == pytest.approx(1.0, abs=1e-8)
        # Independent oracle: least squares through numpy's lstsq.
        design = np.hstack([x, np.ones((60, 1))])
        beta, *_ = np.linalg.lstsq(design, y, rcond=None)
        np.testing.assert_allclose(
            np.concatenate([model.weights.ravel(), model.bias]), beta, atol=1e-8
        )

    def test_constant_target_is_intercept_only(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(50, 4))
        model = fit_ols(x, np.full(50, 3.25))
        np.testing.assert_allclose(model.weights, 0.0, atol=1e-8)
        assert model.bias[0] == pytest.approx(3.25, abs=1e-8)

    def test_gradient_at_solution_vanishes(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(80, 5))
        y = rng.normal(size=80)
        model = fit_ols(x, y)
        design = np.hstack([x, np.ones((80, 1))])
        beta = np.concatenate([model.weights.ravel(), model.bias])
        grad = 2.0 * design.T @ (design @ beta - y) / 80.0
        assert np.abs(grad).max() <= 1e-8

    def test_rank_deficiency_raises_with_condition(self):
        rng = np.random.default_rng(4)
        base = rng.normal(size=(30, 1))
        x = np.hstack([base, 2.0 * base])  # exactly collinear
        with pytest.raises(SingularSystemError) as err:
            fit_ols(x, rng.normal(size=30))
        assert err.value.condition is None or err.value.condition > 1e10

    def test_needs_more_rows_than_features(self):
        with pytest.raises(ValueError, match="n > m"):
            fit_ols(np.eye(3), np.ones(3))


class TestTrainClassifier:
    def test_separable_blobs_linear(self):
        rng = np.random.default_rng(5)
        x = np.vstack([
            rng.normal(loc=(-3.0, 0.0), scale=0.5, size=(60, 2)),
            rng.normal(loc=(3.0, 0.0), scale=0.5, size=(60, 2)),
        ])
        y = np.repeat([0, 1], 60)
        assert perceptron_separable(x, y)  # oracle certifies separability
        model = train_classifier(x, y, arch="linear", step_size=0.5, epochs=100, seed=0)
        acc = np.mean(model.predict_labels(x) == y)
        assert acc >= 0.99

    @pytest.mark.parametrize("arch", ["linear", "mlp"])
    def test_one_point_per_class_memorized(self, arch):
        x = np.array([[0.0, 1.0], [1.0, 0.0]])
        y = np.array([0, 1])
        model = train_classifier(
            x, y, arch=arch, hidden=(10, 32), activation="tanh",
            step_size=0.5, epochs=300, batch_size=2, seed=1,
        )
        np.testing.assert_array_equal(model.predict_labels(x), y)

    def test_ten_blob_mlp_reaches_point_nine(self):
        from aniso_ldp.harness import gen_synthetic_classification

        data = gen_synthetic_classification(1200, 8, 10, 5, seed=9)
        x, y = data.public_features, data.public_response()
        model = train_classifier(
            x, y, arch="mlp", hidden=(10, 32), activation="relu",
            step_size=0.05, epochs=150, seed=2,
        )
        acc = np.mean(model.predict_labels(x) == y)
        assert acc >= 0.9
        # Independent re-run: same architecture trained with torch SGD.
        torch = pytest.importorskip("torch")
        torch.manual_seed(0)
        net = torch.nn.Sequential(
            torch.nn.Linear(8, 10), torch.nn.ReLU(),
            torch.nn.Linear(10, 32), torch.nn.ReLU(),
            torch.nn.Linear(32, 10),
        )
        opt = torch.optim.SGD(net.parameters(), lr=0.05)
        tx = torch.tensor(x, dtype=torch.float32)
        ty = torch.tensor(y, dtype=torch.long)
        for _ in range(400):
            opt.zero_grad()
            loss = torch.nn.functional.cross_entropy(net(tx), ty)
            loss.backward()
            opt.step()
        torch_acc = (net(tx).argmax(dim=1) == ty).float().mean().item()
        assert torch_acc >= 0.9

    def test_epoch_losses_non_increasing(self):
        from aniso_ldp.models import TRAIN_LOSS_TOLERANCE

        rng = np.random.default_rng(6)
        x = rng.normal(size=(200, 4))
        y = (x[:, 0] + x[:, 1] > 0).astype(int)
        model = train_classifier(x, y, arch="mlp", hidden=(10, 32),
                                 activation="relu", step_size=0.05, epochs=80, seed=3)
        losses = np.asarray(model.loss_history)
        assert np.all(np.diff(losses) <= TRAIN_LOSS_TOLERANCE * losses[0])

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="two distinct classes"):
            train_classifier(np.random.default_rng(0).normal(size=(10, 2)), np.zeros(10, dtype=int))

    def test_divergence_reported(self):
        rng = np.random.default_rng(7)
        x = rng.normal(scale=1e150, size=(60, 3))  # overflow-scale inputs
        y = rng.integers(0, 2, size=60)
        with np.errstate(all="ignore"), pytest.raises(DivergenceError, match="step size"):
            train_classifier(x, y, arch="mlp", hidden=(10, 32), activation="gelu",
                             step_size=1.0, epochs=5, seed=0)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(100, 3))
        y = (x[:, 0] > 0).astype(int)
        m1 = train_classifier(x, y, arch="mlp", epochs=20, seed=5)
        m2 = train_classifier(x, y, arch="mlp", epochs=20, seed=5)
        for w1, w2 in zip(m1.weights, m2.weights):
            np.testing.assert_array_equal(w1, w2)


class TestJacobian:
    def test_linear_constant(self):
        model = LinearModel(weights=np.array([[1.0, 1.0]]), bias=np.array([0.0]))
        for z in (np.array([0.0, 0.0]), np.array([5.0, -2.0])):
            np.testing.assert_array_equal(jacobian(model, z), [[1.0, 1.0]])

    @pytest.mark.parametrize("activation", ["tanh", "gelu"])
    def test_smooth_mlp_matches_finite_differences(self, activation):
        model = _random_mlp(6, activation, seed=10)
        rng = np.random.default_rng(11)
        for _ in range(10):
            z = rng.normal(size=6)
            jac = jacobian(model, z)
            fd = finite_difference_jacobian(model.forward, z, step=1e-5)
            assert np.abs(jac - fd).max() / np.abs(fd).max() <= 1e-5

    def test_relu_matches_away_from_kinks(self):
        model = _random_mlp(6, "relu", seed=12)
        rng = np.random.default_rng(13)
        checked = 0
        while checked < 10:
            z = rng.normal(scale=2.0, size=6)
            if min(np.abs(a).min() for a in model.pre_activations(z)) <= 0.1:
                continue
            checked += 1
            jac = jacobian(model, z)
            fd = finite_difference_jacobian(model.forward, z, step=1e-5)
            assert np.abs(jac - fd).max() / np.abs(fd).max() <= 1e-6

    def test_first_order_taylor_residual_shrinks(self):
        model = _random_mlp(5, "tanh", seed=14)
        rng = np.random.default_rng(15)
        for _ in range(5):
            z = rng.normal(size=5)
            direction = rng.normal(size=5)
            direction /= np.linalg.norm(direction)
            jac = jacobian(model, z)

            def residual(scale):
                delta = scale * direction
                return np.linalg.norm(model.forward(z + delta) - model.forward(z) - jac @ delta)

            assert residual(1e-3) / residual(5e-4) >= 3.5

    def test_softmax_mode_matches_finite_differences(self):
        from aniso_ldp.models import _softmax

        model = _random_mlp(4, "tanh", seed=16)
        z = np.random.default_rng(17).normal(size=4)
        jac = jacobian(model, z, mode="softmax")
        fd = finite_difference_jacobian(lambda v: _softmax(model.forward(v)), z, step=1e-5)
        assert np.abs(jac - fd).max() / np.abs(fd).max() <= 1e-5

    def test_dimension_mismatch(self):
        model = LinearModel(weights=np.eye(2), bias=np.zeros(2))
        with pytest.raises(ValueError, match="shape"):
            jacobian(model, np.ones(3))


class TestDecomposeRowNull:
    def test_summation_example(self):
        z_r, z_n = decompose_row_null(np.array([[1.0, 1.0]]), np.array([3.0, 1.0]))
        np.testing.assert_allclose(z_r, [2.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(z_n, [1.0, -1.0], atol=1e-12)

    def test_null_space_input(self):
        w = np.array([[1.0, 1.0]])
        z = np.array([1.0, -1.0])
        z_r, z_n = decompose_row_null(w, z)
        np.testing.assert_allclose(z_r, 0.0, atol=1e-12)
        np.testing.assert_allclose(z_n, z, atol=1e-12)

    def test_identity_map(self):
        z = np.array([1.0, 2.0, 3.0])
        z_r, z_n = decompose_row_null(np.eye(3), z)
        np.testing.assert_allclose(z_r, z, atol=1e-12)
        np.testing.assert_allclose(z_n, 0.0, atol=1e-12)

    def test_orthogonality_and_annihilation(self):
        rng = np.random.default_rng(18)
        for _ in range(10):
            w = rng.normal(size=(3, 7))
            z = rng.normal(size=7)
            z_r, z_n = decompose_row_null(w, z)
            np.testing.assert_allclose(z_r + z_n, z, atol=1e-12)
            assert abs(z_r @ z_n) <= 1e-10 * (z @ z)
            assert np.abs(w @ z_n).max() <= 1e-10

    def test_zero_matrix_rejected(self):
        with pytest.raises(ValueError, match="nonzero"):
            decompose_row_null(np.zeros((2, 3)), np.ones(3))


class TestModelSerialization:
    def test_linear_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(19)
        model = LinearModel(weights=rng.normal(size=(3, 5)), bias=rng.normal(size=3))
        path = tmp_path / "linear.json"
        save_model(model, path)
        loaded = load_model(path)
        np.testing.assert_array_equal(loaded.weights, model.weights)
        np.testing.assert_array_equal(loaded.bias, model.bias)

    def test_mlp_round_trip_exact(self, tmp_path):
        model = _random_mlp(4, "gelu", seed=20)
        path = tmp_path / "mlp.json"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.activation == "gelu"
        for w1, w2 in zip(loaded.weights, model.weights):
            np.testing.assert_array_equal(w1, w2)
        assert model_hash(loaded) == model_hash(model)

    def test_stable_key_order(self, tmp_path):
        model = LinearModel(weights=np.eye(2), bias=np.zeros(2))
        path = tmp_path / "m.json"
        save_model(model, path)
        doc = json.loads(path.read_text())
        assert list(doc.keys()) == sorted(doc.keys())
