"""Calibration, pre-processing, randomization, and post-processing.

The privatization chain is zhat = g(M(f(z))) where f pulls the record
into the task-aligned bounded space (offset, inverse factor, radial
clip), M is any of the local randomizers, and g applies the factor and
offset back. For additive M with per-coordinate variance sigma^2 the
reshaped noise L xi has covariance sigma^2 * Sigma.

Everything calibrated here is derived from public data only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BudgetError, DegenerateDataWarning
from .linalg import _as_matrix
from .mechanisms import (
    PrivacyBudget,
    SensitivityBound,
    _privunit2_directions,
    _privunitg_directions,
    _unit_rows,
    cw_inid_laplace,
    gaussian_agm,
    laplace_mechanism,
)
from .subspace import (
    ReshapeTransform,
    aggregate_jacobians,
    allocate_scales,
    build_transform,
    extract_basis,
    identity_transform,
    transform_provenance,
)

__all__ = [
    "ADDITIVE_MECHANISMS",
    "SPHERICAL_MECHANISMS",
    "PipelineConfig",
    "CalibrationReport",
    "calibrate",
    "bound",
    "preprocess",
    "postprocess",
    "randomize",
    "privatize_batch",
    "aggregate_mean",
]

ADDITIVE_MECHANISMS = ("laplace", "agm", "cw")
SPHERICAL_MECHANISMS = ("privunit2", "privunitg")

DEFAULT_PERCENTILE = 0.9
DEFAULT_JACOBIAN_SAMPLES = 500


@dataclass
class PipelineConfig:
    """Everything randomize() needs: transform, clip, mechanism, budget."""

    transform: ReshapeTransform
    rho: float
    bound_norm: str = "l1"
    mechanism: str = "laplace"
    budget: PrivacyBudget = field(default_factory=lambda: PrivacyBudget(1.0))
    percentile: float = DEFAULT_PERCENTILE
    clip: bool = True
    sensitivity_convention: str = "worst_pair"
    budget_split: float | None = None
    cw_rule: str = "equal_ratio"
    coord_ranges: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.rho > 0.0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not 0.0 < self.percentile <= 1.0:
            raise ValueError(f"percentile must lie in (0, 1], got {self.percentile}")
        if self.bound_norm not in ("l1", "l2", "linf"):
            raise ValueError(f"unknown bound norm {self.bound_norm!r}")
        known = ADDITIVE_MECHANISMS + SPHERICAL_MECHANISMS
        if self.mechanism not in known:
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if self.mechanism == "cw" and self.clip:
            raise ValueError("the coordinate-wise mechanism runs without clipping")

    def with_budget(self, epsilon, delta=None):
        budget = PrivacyBudget(epsilon, self.budget.delta if delta is None else delta)
        return replace(self, budget=budget)

    def sensitivity(self):
        return SensitivityBound.for_ball(
            "l2" if self.bound_norm == "l2" else "l1",
            self.rho,
            self.transform.dim,
            convention=self.sensitivity_convention,
        )


@dataclass
class CalibrationReport:
    """Public-data summary written next to the transform."""

    singular_values: np.ndarray
    rank: int
    rho: float
    clip_coverage: float
    degenerate: bool = False


def _norms(values, norm):
    values = np.atleast_2d(values)
    if norm == "l1":
        return np.abs(values).sum(axis=1)
    if norm == "l2":
        return np.linalg.norm(values, axis=1)
    if norm == "linf":
        return np.abs(values).max(axis=1)
    raise ValueError(f"unknown norm {norm!r}")


def bound(v, rho, norm="l1"):
    """Clip into the rho-ball of the given norm.

    l1/l2 clipping is radial (the direction is preserved); linf clips
    each coordinate independently.
    """
    if rho <= 0.0:
        raise ValueError("rho must be positive")
    v = np.asarray(v, dtype=np.float64)
    if norm == "linf":
        return np.clip(v, -rho, rho)
    single = v.ndim == 1
    rows = np.atleast_2d(v)
    norms = _norms(rows, norm)
    scale = np.where(norms > rho, np.divide(rho, norms, where=norms > 0, out=np.ones_like(norms)), 1.0)
    out = rows * scale[:, None]
    return out[0] if single else out


def _pullback(z, config):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    rows = np.atleast_2d(z)
    if rows.shape[1] != config.transform.dim:
        raise ValueError(
            f"record dimension {rows.shape[1]} does not match transform dim {config.transform.dim}"
        )
    pulled = (rows - config.transform.offset) @ config.transform.inverse_factor.T
    return pulled, single


def preprocess(z, config):
    """f(z) = Bound(L^{-1}(z - mu); rho); skips the clip in no-clip mode."""
    pulled, single = _pullback(z, config)
    out = bound(pulled, config.rho, config.bound_norm) if config.clip else pulled
    return out[0] if single else out


def postprocess(y, config):
    """g(y) = L y + mu."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    rows = np.atleast_2d(y)
    if rows.shape[1] != config.transform.dim:
        raise ValueError(
            f"vector dimension {rows.shape[1]} does not match transform dim {config.transform.dim}"
        )
    out = rows @ config.transform.factor.T + config.transform.offset
    return out[0] if single else out


def _mechanize(zbar, config, rng):
    """Apply the configured randomizer to rows of the bounded space."""
    eps = config.budget.epsilon
    if config.mechanism == "laplace":
        return laplace_mechanism(zbar, config.budget, config.sensitivity(), rng)
    if config.mechanism == "agm":
        if config.budget.delta <= 0.0:
            raise BudgetError("the Gaussian mechanism requires delta > 0")
        return gaussian_agm(zbar, eps, config.budget.delta, config.sensitivity().delta2, rng)
    if config.mechanism == "cw":
        if config.coord_ranges is None:
            raise ValueError("cw mechanism needs calibrated coordinate ranges")
        return cw_inid_laplace(zbar, eps, config.coord_ranges, rng, rule=config.cw_rule)
    # Spherical: normalize, randomize the direction, rescale by the
    # debiasing constant times the public bound rho. The private norm
    # never leaves the mechanism.
    v, _ = _unit_rows(zbar, rng)
    if config.mechanism == "privunit2":
        u, mean_proj = _privunit2_directions(v, eps, config.budget_split, rng)
    else:
        u, mean_proj = _privunitg_directions(v, eps, config.budget_split, rng)
    return u * (config.rho / mean_proj)


def randomize(z, config, rng):
    """zhat = g(M(f(z))) for a single record."""
    zbar = preprocess(z, config)
    y = _mechanize(np.atleast_2d(zbar), config, rng)
    return postprocess(y[0], config)


def privatize_batch(records, config, rng):
    """Privatize each row once; returns (zhat rows, clip fraction)."""
    records = _as_matrix(records, "records")
    pulled, _ = _pullback(records, config)
    if config.clip:
        clipped = _norms(pulled, config.bound_norm) > config.rho
        clip_fraction = float(np.mean(clipped))
        zbar = bound(pulled, config.rho, config.bound_norm)
    else:
        clip_fraction = 0.0
        zbar = pulled
    y = _mechanize(zbar, config, rng)
    return postprocess(y, config), clip_fraction


def aggregate_mean(intermediate_outputs, config):
    """g(mean of mechanism outputs); the unbiased aggregation estimator.

    Aggregation happens between randomization and post-processing, so
    the zero-mean isotropic noise averages out before the factor is
    applied.
    """
    outputs = np.asarray(intermediate_outputs, dtype=np.float64)
    if outputs.size == 0:
        raise ValueError("need at least one mechanism output")
    outputs = np.atleast_2d(outputs)
    return postprocess(outputs.mean(axis=0), config)


def _quantile(values, percentile):
    """Order-statistic quantile: smallest value covering the fraction."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    index = max(0, int(np.ceil(percentile * values.size)) - 1)
    return float(values[index])


def calibrate(
    public_features,
    model,
    rank_rule=None,
    percentile=DEFAULT_PERCENTILE,
    jacobian_sample_count=DEFAULT_JACOBIAN_SAMPLES,
    *,
    mechanism="laplace",
    budget=None,
    bound_norm=None,
    null_mode="floor",
    null_constant=100.0,
    floor_ratio=None,
    reshape=True,
    budget_split=None,
    sensitivity_convention="worst_pair",
    cw_rule="equal_ratio",
):
    """Derive the full pipeline configuration from public data.

    The offset is the public mean, the transform comes from the
    aggregated public Jacobians, and rho is the ``percentile``
    order-statistic of the pulled-back public norms. Degenerate public
    data (no variation) issues a DegenerateDataWarning and falls back
    to the identity transform with rho = 1.

    Args:
        public_features: (n, m) public records.
        model: Trained public downstream model.
        rank_rule: ("fixed", r) or ("energy", tau); defaults to
            fixed(output_dim) for multi-output models and energy(0.99)
            for single-output ones.
        percentile: Quantile of public norms defining rho.
        jacobian_sample_count: Leading sample count used for the
            Jacobian aggregate.
        mechanism, budget, bound_norm: Randomizer selection; the bound
            norm defaults to l1 for Laplace/cw and l2 otherwise.
        null_mode: "floor" floors null singular values before the
            closed-form allocation; "fixed" pins null ratios at
            ``null_constant``.
        reshape: False produces the identity-transform baseline.

    Returns:
        (PipelineConfig, CalibrationReport)
    """
    public = _as_matrix(public_features, "public_features")
    n, m = public.shape
    if budget is None:
        budget = PrivacyBudget(1.0, 0.0 if mechanism != "agm" else 1e-5)
    if bound_norm is None:
        bound_norm = "l1" if mechanism in ("laplace", "cw") else "l2"
    if not 1 <= jacobian_sample_count <= n:
        raise ValueError(
            f"jacobian_sample_count must lie in [1, {n}], got {jacobian_sample_count}"
        )

    degenerate = not np.any(public.std(axis=0) > 0.0)
    if degenerate:
        warnings.warn(
            "public data has no variation; falling back to the identity transform",
            DegenerateDataWarning,
            stacklevel=2,
        )

    if reshape and not degenerate:
        if rank_rule is None:
            rank_rule = ("fixed", model.output_dim) if model.output_dim > 1 else ("energy", 0.99)
        agg = aggregate_jacobians(model, public[:jacobian_sample_count])
        floor_kwargs = {} if floor_ratio is None else {"floor_ratio": floor_ratio}
        basis = extract_basis(agg, rank_rule, **floor_kwargs)
        if null_mode == "floor":
            alloc = allocate_scales(basis.singular_values, mode="eq6")
        elif null_mode == "fixed":
            alloc = allocate_scales(
                basis.singular_values,
                mode="fixed_null",
                rank=basis.rank,
                null_constant=null_constant,
            )
        else:
            raise ValueError(f"unknown null mode {null_mode!r}")
        mu = public.mean(axis=0)
        transform = build_transform(basis, alloc, mu)
        singular_values = basis.singular_values
        rank = basis.rank
    else:
        transform = identity_transform(m)
        singular_values = np.ones(m)
        rank = m

    pulled = (public - transform.offset) @ transform.inverse_factor.T
    norms = _norms(pulled, bound_norm)
    rho = _quantile(norms, percentile) if not degenerate else 1.0
    if rho <= 0.0:
        warnings.warn(
            "public norms are all zero; falling back to rho = 1",
            DegenerateDataWarning,
            stacklevel=2,
        )
        rho = 1.0
        degenerate = True

    # Pulled-back coordinate spans double as the per-coordinate
    # sensitivities of the no-clip coordinate-wise mechanism.
    spans = pulled.max(axis=0) - pulled.min(axis=0)
    coord_ranges = np.maximum(spans, spans.max() * 1e-9 if spans.max() > 0 else 1.0)

    config = PipelineConfig(
        transform=transform,
        rho=rho,
        bound_norm=bound_norm,
        mechanism=mechanism,
        budget=budget,
        percentile=percentile,
        clip=mechanism != "cw",
        sensitivity_convention=sensitivity_convention,
        budget_split=budget_split,
        cw_rule=cw_rule,
        coord_ranges=coord_ranges,
        provenance=transform_provenance(model, public, jacobian_sample_count),
    )
    report = CalibrationReport(
        singular_values=singular_values,
        rank=rank,
        rho=rho,
        clip_coverage=float(np.mean(norms <= rho)) if norms.size else 1.0,
        degenerate=degenerate,
    )
    return config, report
