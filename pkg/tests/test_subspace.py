"""Jacobian aggregation, basis extraction, scale allocation, transforms."""

import numpy as np
import pytest

from aniso_ldp.errors import NumericalRankWarning
from aniso_ldp.linalg import induced_norm
from aniso_ldp.models import LinearModel, MlpModel, jacobian
from aniso_ldp.subspace import (
    JacobianAggregate,
    aggregate_jacobians,
    allocate_scales,
    build_transform,
    extract_basis,
    identity_transform,
    load_transform,
    save_transform,
)

from oracles import projected_gradient_scales


def _mlp(m, seed=0):
    rng = np.random.default_rng(seed)
    dims = [m, 10, 32, 3]
    return MlpModel(
        weights=[rng.normal(0, 1.0 / np.sqrt(i), size=(o, i)) for i, o in zip(dims, dims[1:])],
        biases=[rng.normal(0, 0.1, size=o) for o in dims[1:]],
        activation="tanh",
    )


def _random_aggregate(m, rank, seed):
    """Planted low-rank sensitivity with a clear spectral gap."""
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(m, rank)))
    # Row spectrum within a 4x spread keeps the closed-form allocation
    # on the expected side of 1 for both blocks.
    strengths = rng.uniform(1.0, 4.0, size=rank)
    c = (basis * strengths**2) @ basis.T
    return JacobianAggregate(matrix=0.5 * (c + c.T), sample_count=1)


class TestAggregateJacobians:
    def test_linear_model_exact(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(3, 5))
        model = LinearModel(weights=w, bias=np.zeros(3))
        agg = aggregate_jacobians(model, rng.normal(size=(7, 5)))
        np.testing.assert_array_equal(agg.matrix, w.T @ w)
        assert agg.sample_count == 7

    def test_summation_matrix(self):
        model = LinearModel(weights=np.array([[1.0, 1.0]]), bias=np.zeros(1))
        agg = aggregate_jacobians(model, np.zeros((4, 2)))
        np.testing.assert_array_equal(agg.matrix, [[1.0, 1.0], [1.0, 1.0]])
        evals = np.linalg.eigvalsh(agg.matrix)
        np.testing.assert_allclose(np.sort(evals), [0.0, 2.0], atol=1e-12)

    def test_single_sample_is_outer_product(self):
        model = _mlp(4)
        z = np.random.default_rng(1).normal(size=4)
        agg = aggregate_jacobians(model, z.reshape(1, 4))
        j = jacobian(model, z)
        np.testing.assert_allclose(agg.matrix, j.T @ j, atol=1e-12)

    def test_rejects_empty(self):
        model = _mlp(4)
        with pytest.raises(ValueError):
            aggregate_jacobians(model, np.zeros((0, 4)))


class TestExtractBasis:
    def test_summation_two_by_two(self):
        agg = JacobianAggregate(matrix=np.array([[1.0, 1.0], [1.0, 1.0]]), sample_count=1)
        basis = extract_basis(agg, ("fixed", 1))
        np.testing.assert_allclose(np.abs(basis.q_row.ravel()), [1, 1] / np.sqrt(2), atol=1e-12)
        np.testing.assert_allclose(np.abs(basis.q_null.ravel()), [1, 1] / np.sqrt(2), atol=1e-12)
        assert basis.singular_values[0] == pytest.approx(np.sqrt(2.0), abs=1e-12)
        assert basis.singular_values[1] == pytest.approx(1e-3 * np.sqrt(2.0), abs=1e-15)

    def test_isotropic_full_rank(self):
        agg = JacobianAggregate(matrix=np.eye(5), sample_count=1)
        basis = extract_basis(agg, ("fixed", 5))
        np.testing.assert_allclose(basis.singular_values, 1.0)
        assert basis.q_null.shape == (5, 0)

    def test_energy_rule_against_cumulative_oracle(self):
        evals = np.array([100.0, 1.0, 1e-12])
        agg = JacobianAggregate(matrix=np.diag(evals), sample_count=1)
        basis = extract_basis(agg, ("energy", 0.99))
        # Oracle: explicit cumulative fraction of the singular values.
        s = np.sqrt(evals)
        fractions = np.cumsum(s) / s.sum()
        expected = next(k + 1 for k, f in enumerate(fractions) if f >= 0.99)
        assert expected == 2
        assert basis.rank == 2

    def test_fixed_rank_beyond_numerical_rank_warns(self):
        agg = JacobianAggregate(matrix=np.diag([4.0, 0.0, 0.0]), sample_count=1)
        with pytest.warns(NumericalRankWarning):
            basis = extract_basis(agg, ("fixed", 2))
        assert basis.rank == 2
        assert basis.q_row.shape == (3, 2)

    def test_orthogonality_across_random_aggregates(self):
        for seed in range(20):
            agg = _random_aggregate(12, 3, seed)
            basis = extract_basis(agg, ("fixed", 3))
            q = np.hstack([basis.q_row, basis.q_null])
            assert np.abs(q.T @ q - np.eye(12)).max() <= 1e-10
            assert np.abs(basis.q_row.T @ basis.q_null).max() <= 1e-10
            assert np.all(np.diff(basis.singular_values) <= 1e-12)


class TestAllocateScales:
    def test_uniform_is_isotropic(self):
        alloc = allocate_scales(np.array([1.0, 1.0]))
        np.testing.assert_allclose(alloc.lam, [1.0, 1.0], atol=1e-12)

    def test_eight_one_closed_form(self):
        alloc = allocate_scales(np.array([8.0, 1.0]))
        np.testing.assert_allclose(alloc.lam, [25.0 / 64.0, 25.0 / 4.0], rtol=1e-12)
        # Independent constrained minimizer agrees on the optimum.
        lam_pg, obj_pg = projected_gradient_scales(np.array([8.0, 1.0]))
        obj_closed = float(np.sum(np.array([64.0, 1.0]) * alloc.lam))
        assert obj_pg >= obj_closed * (1.0 - 1e-6)

    def test_budget_constraint_and_stationarity(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            m = int(rng.integers(2, 20))
            s = rng.uniform(0.05, 10.0, size=m)
            alloc = allocate_scales(s)
            assert abs(np.sum(1.0 / np.sqrt(alloc.lam)) - m) <= 1e-9
            stationarity = s**2 * alloc.lam**1.5
            spread = stationarity.max() / stationarity.min() - 1.0
            assert spread <= 1e-6

    def test_beats_uniform_allocation(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            s = rng.uniform(0.1, 5.0, size=6)
            alloc = allocate_scales(s)
            assert np.sum(s**2 * alloc.lam) <= np.sum(s**2) + 1e-9

    def test_fixed_null_mode(self):
        s = np.array([5.0, 2.0, 1e-3, 1e-3])
        alloc = allocate_scales(s, mode="fixed_null", rank=2, null_constant=100.0)
        np.testing.assert_allclose(alloc.lam[2:], 100.0)
        assert abs(np.sum(1.0 / np.sqrt(alloc.lam)) - 4.0) <= 1e-9

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError, match="positive"):
            allocate_scales(np.array([1.0, 0.0]))


class TestBuildTransform:
    def test_unit_scales_pure_rotation(self):
        agg = _random_aggregate(6, 2, 11)
        basis = extract_basis(agg, ("fixed", 2))
        alloc = allocate_scales(np.ones(6))
        t = build_transform(basis, alloc, np.zeros(6))
        u = np.hstack([basis.q_row, basis.q_null])
        np.testing.assert_allclose(t.factor, u, atol=1e-12)
        np.testing.assert_allclose(t.inverse_factor @ t.factor, np.eye(6), atol=1e-10)

    def test_diagonal_construction(self):
        from aniso_ldp.subspace import ReshapeTransform

        t = ReshapeTransform(rotation=np.eye(2), lam=np.array([0.25, 4.0]), offset=np.zeros(2))
        np.testing.assert_allclose(t.factor, np.diag([0.5, 2.0]), atol=1e-12)
        assert induced_norm(t.inverse_factor, 2) == pytest.approx(2.0, abs=1e-12)

    def test_covariance_reconstruction(self):
        rng = np.random.default_rng(12)
        agg = _random_aggregate(8, 3, 12)
        basis = extract_basis(agg, ("fixed", 3))
        alloc = allocate_scales(basis.singular_values)
        t = build_transform(basis, alloc, rng.normal(size=8))
        u = np.hstack([basis.q_row, basis.q_null])
        sigma = u @ np.diag(alloc.lam) @ u.T
        assert np.abs(t.factor @ t.factor.T - sigma).max() <= 1e-9

    def test_rejects_non_positive_lambda(self):
        from aniso_ldp.subspace import ReshapeTransform

        with pytest.raises(ValueError, match="positive"):
            ReshapeTransform(rotation=np.eye(2), lam=np.array([1.0, -1.0]), offset=np.zeros(2))


class TestTransformInvariants:
    def test_row_attenuated_null_amplified(self):
        for seed in range(10):
            m, rank = 16, 3
            agg = _random_aggregate(m, rank, 100 + seed)
            basis = extract_basis(agg, ("fixed", rank))
            alloc = allocate_scales(basis.singular_values)
            assert np.all(alloc.lam[:rank] <= 1.0 + 1e-12)
            assert np.all(alloc.lam[rank:] >= 1.0 - 1e-12)

    def test_round_trip_identity(self):
        rng = np.random.default_rng(13)
        agg = _random_aggregate(10, 2, 13)
        basis = extract_basis(agg, ("fixed", 2))
        alloc = allocate_scales(basis.singular_values)
        t = build_transform(basis, alloc, rng.normal(size=10))
        z = rng.normal(size=10)
        back = t.factor @ (t.inverse_factor @ (z - t.offset)) + t.offset
        assert np.abs(back - z).max() <= 1e-10

    def test_covariance_positive_definite(self):
        agg = _random_aggregate(9, 4, 14)
        basis = extract_basis(agg, ("fixed", 4))
        alloc = allocate_scales(basis.singular_values)
        t = build_transform(basis, alloc, np.zeros(9))
        min_eig = np.linalg.eigvalsh(t.covariance).min()
        assert min_eig >= 0.99 * alloc.lam.min()


class TestTransformSerialization:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(15)
        agg = _random_aggregate(5, 2, 15)
        basis = extract_basis(agg, ("fixed", 2))
        alloc = allocate_scales(basis.singular_values)
        t = build_transform(basis, alloc, rng.normal(size=5))
        path = tmp_path / "transform.json"
        provenance = {"sample_count": 42, "model_hash": "abc"}
        save_transform(path, t, rho=3.5, provenance=provenance)
        loaded, rho, prov = load_transform(path)
        assert rho == 3.5
        assert prov["sample_count"] == 42 and prov["model_hash"] == "abc"
        np.testing.assert_array_equal(loaded.rotation, t.rotation)
        np.testing.assert_array_equal(loaded.lam, t.lam)
        np.testing.assert_array_equal(loaded.offset, t.offset)
        np.testing.assert_array_equal(loaded.factor, t.factor)

    def test_identity_helper(self):
        t = identity_transform(4)
        np.testing.assert_array_equal(t.factor, np.eye(4))
        np.testing.assert_array_equal(t.offset, np.zeros(4))
