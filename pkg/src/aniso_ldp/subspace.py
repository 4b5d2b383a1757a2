"""Task-aligned reshaping transform built from public Jacobians.

The chain is: aggregate per-sample Jacobian outer products into a
sensitivity matrix, split its eigenbasis into task-sensitive and
task-insensitive blocks, allocate per-coordinate variance ratios under
the inverse-scale budget constraint, and materialize the factor
L = U diag(lambda)^{1/2} together with its inverse.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalRankWarning
from .linalg import _as_matrix, qr_complement, sym_eig
from .models import jacobian, model_hash, LinearModel

__all__ = [
    "JacobianAggregate",
    "SubspaceBasis",
    "ScaleAllocation",
    "ReshapeTransform",
    "aggregate_jacobians",
    "extract_basis",
    "allocate_scales",
    "build_transform",
    "identity_transform",
    "save_transform",
    "load_transform",
]

DEFAULT_FLOOR_RATIO = 1e-3
DEFAULT_NULL_CONSTANT = 100.0


@dataclass(frozen=True)
class JacobianAggregate:
    """Mean Jacobian outer product C = (1/n) sum_i J(z_i)^T J(z_i)."""

    matrix: np.ndarray
    sample_count: int


@dataclass(frozen=True)
class SubspaceBasis:
    """Split eigenbasis of the aggregate plus floored singular values.

    ``q_row`` spans the task-sensitive subspace, ``q_null`` its
    complement; ``singular_values`` has length m, non-increasing, with
    entries below the floor clamped up to it.
    """

    q_row: np.ndarray
    q_null: np.ndarray
    singular_values: np.ndarray
    rank: int


@dataclass(frozen=True)
class ScaleAllocation:
    """Per-coordinate variance ratios lambda_i under sum(1/sqrt(lambda)) = m."""

    lam: np.ndarray
    mode: str


@dataclass
class ReshapeTransform:
    """Public triple (U, lambda, mu) with derived factor L = U diag(lambda)^{1/2}."""

    rotation: np.ndarray  # U, orthogonal (m, m)
    lam: np.ndarray  # positive diagonal of Lambda, (m,)
    offset: np.ndarray  # mu, (m,)
    factor: np.ndarray = field(init=False, repr=False)  # L
    inverse_factor: np.ndarray = field(init=False, repr=False)  # L^{-1}

    def __post_init__(self):
        u = _as_matrix(self.rotation, "U")
        lam = np.asarray(self.lam, dtype=np.float64)
        mu = np.asarray(self.offset, dtype=np.float64)
        m = u.shape[0]
        if u.shape != (m, m) or lam.shape != (m,) or mu.shape != (m,):
            raise ValueError("transform component dimensions disagree")
        if np.any(lam <= 0.0) or not np.all(np.isfinite(lam)):
            raise ValueError("lambda must be positive and finite")
        sqrt_lam = np.sqrt(lam)
        self.lam = lam
        self.offset = mu
        self.factor = u * sqrt_lam[None, :]
        self.inverse_factor = u.T / sqrt_lam[:, None]

    @property
    def dim(self):
        return self.rotation.shape[0]

    @property
    def covariance(self):
        """Sigma = L L^T = U diag(lambda) U^T."""
        return self.factor @ self.factor.T


def aggregate_jacobians(model, public_samples, mode="logits"):
    """Average J^T J over public samples, in deterministic sample order.

    Constant-Jacobian models (affine maps) short-circuit to the exact
    product W^T W.
    """
    samples = _as_matrix(public_samples, "public_samples")
    n, m = samples.shape
    if m != model.input_dim:
        raise ValueError(
            f"sample dimension {m} does not match model input {model.input_dim}"
        )
    if isinstance(model, LinearModel) and mode == "logits":
        c = model.weights.T @ model.weights
    else:
        c = np.zeros((m, m))
        for z in samples:
            j = jacobian(model, z, mode=mode)
            c += j.T @ j
        c /= n
        c = 0.5 * (c + c.T)
    return JacobianAggregate(matrix=c, sample_count=n)


def _resolve_rank(rule, s_raw):
    kind, value = rule
    m = s_raw.shape[0]
    if kind == "fixed":
        r = int(value)
        if not 1 <= r <= m:
            raise ValueError(f"fixed rank {r} outside [1, {m}]")
        return r
    if kind == "energy":
        tau = float(value)
        if not 0.0 < tau <= 1.0:
            raise ValueError(f"energy threshold {tau} outside (0, 1]")
        total = s_raw.sum()
        if total <= 0.0:
            raise ValueError("aggregate has no spectral mass")
        fractions = np.cumsum(s_raw) / total
        return min(m, int(np.searchsorted(fractions, tau - 1e-12) + 1))
    raise ValueError(f"unknown rank rule {kind!r}")


def extract_basis(agg, rank_rule, floor_ratio=DEFAULT_FLOOR_RATIO):
    """Eigenbasis split of the aggregate at the requested rank.

    Args:
        agg: JacobianAggregate with symmetric PSD matrix.
        rank_rule: ("fixed", r) or ("energy", tau). The energy rule keeps
            the smallest prefix of singular values holding a ``tau``
            fraction of their total sum.
        floor_ratio: Singular values are clamped from below at
            ``floor_ratio * s_max`` so every coordinate stays scalable.

    Returns:
        SubspaceBasis. A fixed rank above the numerical rank issues a
        NumericalRankWarning but still returns the basis.
    """
    c = _as_matrix(agg.matrix, "aggregate")
    m = c.shape[0]
    eig = sym_eig(c, rel_tol=1e-8)
    scale = max(eig.eigenvalues[0], 0.0)
    if eig.eigenvalues[-1] < -1e-10 * max(scale, 1.0):
        raise ValueError("aggregate is not positive semi-definite")
    s_raw = np.sqrt(np.clip(eig.eigenvalues, 0.0, None))
    rank = _resolve_rank(rank_rule, s_raw)
    if s_raw[rank - 1] <= s_raw[0] * 1e-10:
        warnings.warn(
            f"requested rank {rank} exceeds the numerical rank of the aggregate",
            NumericalRankWarning,
            stacklevel=2,
        )
    if s_raw[0] <= 0.0:
        raise ValueError("aggregate is identically zero")
    floor = floor_ratio * s_raw[0]
    s = np.maximum(s_raw, floor)
    q_row = eig.eigenvectors[:, :rank]
    q_null = qr_complement(q_row) if rank < m else np.zeros((m, 0))
    return SubspaceBasis(q_row=q_row, q_null=q_null, singular_values=s, rank=rank)


def allocate_scales(s, mode="eq6", rank=None, null_constant=DEFAULT_NULL_CONSTANT):
    """Variance ratios from the closed-form inverse-scale optimization.

    In ``eq6`` mode every coordinate follows
    1/sqrt(lambda_i) = m * s_i^{2/3} / sum_j s_j^{2/3}, which minimizes
    sum_i s_i^2 lambda_i subject to sum_j 1/sqrt(lambda_j) = m. In
    ``fixed_null`` mode the trailing m - rank coordinates get
    lambda = null_constant and the leading block reuses the closed form
    on the remaining inverse-scale budget.

    Args:
        s: Positive singular values, length m.
        mode: "eq6" or "fixed_null".
        rank: Row-block size, required for "fixed_null".
        null_constant: Fixed lambda for null coordinates.

    Returns:
        ScaleAllocation whose inverse square roots sum to m.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("s must be a non-empty vector")
    if np.any(s <= 0.0) or not np.all(np.isfinite(s)):
        raise ValueError("singular values must be positive and finite")
    m = s.shape[0]
    if mode == "eq6":
        powered = s ** (2.0 / 3.0)
        inv_sqrt = m * powered / powered.sum()
        lam = 1.0 / (inv_sqrt * inv_sqrt)
    elif mode == "fixed_null":
        if rank is None or not 1 <= rank <= m:
            raise ValueError("fixed_null mode needs a valid rank")
        if null_constant <= 0.0:
            raise ValueError("null_constant must be positive")
        lam = np.empty(m)
        lam[rank:] = null_constant
        row_budget = m - (m - rank) / np.sqrt(null_constant)
        powered = s[:rank] ** (2.0 / 3.0)
        inv_sqrt = row_budget * powered / powered.sum()
        lam[:rank] = 1.0 / (inv_sqrt * inv_sqrt)
    else:
        raise ValueError(f"unknown allocation mode {mode!r}")
    return ScaleAllocation(lam=lam, mode=mode)


def build_transform(basis, alloc, mu):
    """Assemble the ReshapeTransform from basis, allocation, and offset.

    Lambda coordinates pair positionally with the columns of
    [q_row | q_null].
    """
    u = np.hstack([basis.q_row, basis.q_null])
    lam = np.asarray(alloc.lam, dtype=np.float64)
    if lam.shape[0] != u.shape[1]:
        raise ValueError("allocation length does not match basis size")
    return ReshapeTransform(rotation=u, lam=lam, offset=np.asarray(mu, dtype=np.float64))


def identity_transform(m, mu=None):
    """Identity rotation and unit scales; the no-reshaping baseline."""
    return ReshapeTransform(
        rotation=np.eye(m),
        lam=np.ones(m),
        offset=np.zeros(m) if mu is None else np.asarray(mu, dtype=np.float64),
    )


def save_transform(path, transform, rho, provenance=None):
    """Persist (U, lambda, mu, rho, provenance) as stable-key JSON."""
    doc = {
        "dim": transform.dim,
        "rotation": transform.rotation.tolist(),
        "lam": transform.lam.tolist(),
        "mu": transform.offset.tolist(),
        "rho": float(rho),
        "provenance": provenance or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_transform(path):
    """Inverse of save_transform; returns (transform, rho, provenance)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    transform = ReshapeTransform(
        rotation=np.asarray(doc["rotation"], dtype=np.float64),
        lam=np.asarray(doc["lam"], dtype=np.float64),
        offset=np.asarray(doc["mu"], dtype=np.float64),
    )
    return transform, float(doc["rho"]), doc.get("provenance", {})


def public_data_hash(samples):
    """SHA-256 over the raw bytes of the public feature block."""
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    digest = hashlib.sha256()
    digest.update(str(samples.shape).encode("utf-8"))
    digest.update(samples.tobytes())
    return digest.hexdigest()


def transform_provenance(model, public_samples, jacobian_sample_count):
    return {
        "sample_count": int(jacobian_sample_count),
        "model_hash": model_hash(model),
        "public_hash": public_data_hash(public_samples),
    }
