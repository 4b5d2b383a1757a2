"""Local randomizers over bounded representations, plus an empirical auditor.

Additive mechanisms (Laplace, analytic Gaussian, coordinate-wise
Laplace) add zero-mean noise to the clipped representation. Spherical
mechanisms (the unit-sphere cap randomizer and its Gaussian ambient
variant) randomize a direction and debias it with a multiplicative
constant.

All mechanisms are deterministic functions of (input, parameters, RNG
stream); concurrent callers must pass disjoint streams.
"""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import betainc, betaincinv, betaln, ndtr, ndtri

from .errors import BudgetError, CalibrationError

__all__ = [
    "PrivacyBudget",
    "SensitivityBound",
    "laplace_mechanism",
    "calibrate_agm",
    "gaussian_agm",
    "privunit2",
    "privunitg",
    "cw_scales",
    "cw_inid_laplace",
    "AuditResult",
    "ldp_audit",
]

# Rejection sampling from spherical caps stays efficient in low
# dimension; beyond this the inverse-CDF of the projection coordinate
# plus a uniform orthogonal completion is used instead.
REJECTION_MAX_DIM = 16

_SPLIT_GRID_STEPS = 100


@dataclass(frozen=True)
class PrivacyBudget:
    """(epsilon, delta) pair; delta = 0 selects pure LDP."""

    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")


@dataclass(frozen=True)
class SensitivityBound:
    """Worst-case l1/l2 distances over the bounded input domain."""

    norm: str
    delta1: float
    delta2: float

    def __post_init__(self):
        if self.norm not in ("l1", "l2", "linf"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if not (self.delta1 > 0.0 and self.delta2 > 0.0):
            raise ValueError("sensitivities must be positive")

    @staticmethod
    def for_ball(norm, rho, dim, convention="worst_pair"):
        """Sensitivities of a norm ball of radius rho in R^dim.

        The default "worst_pair" convention takes the diameter 2*rho;
        the "paper" convention uses the radius itself, matching the
        looser per-coordinate displacement bound.
        """
        if rho <= 0.0:
            raise ValueError("rho must be positive")
        scale = 2.0 if convention == "worst_pair" else 1.0
        if convention not in ("worst_pair", "paper"):
            raise ValueError(f"unknown convention {convention!r}")
        if norm == "l1":
            return SensitivityBound("l1", scale * rho, scale * rho)
        if norm == "l2":
            return SensitivityBound("l2", scale * rho * np.sqrt(dim), scale * rho)
        raise ValueError(f"unsupported ball norm {norm!r}")


def laplace_mechanism(zbar, budget, sens, rng):
    """Additive i.i.d. Laplace noise with scale delta1 / epsilon.

    Args:
        zbar: Bounded representation (any shape; noise is elementwise).
        budget: PrivacyBudget with delta = 0.
        sens: SensitivityBound supplying the l1 sensitivity.
        rng: numpy Generator.
    """
    if budget.delta != 0.0:
        raise BudgetError("the Laplace mechanism is pure-epsilon; delta must be 0")
    zbar = np.asarray(zbar, dtype=np.float64)
    b = sens.delta1 / budget.epsilon
    return zbar + rng.laplace(0.0, b, size=zbar.shape)


def _agm_condition(sigma, epsilon, delta2):
    a = delta2 / (2.0 * sigma)
    b = epsilon * sigma / delta2
    return float(ndtr(a - b) - np.exp(epsilon) * ndtr(-a - b))


def calibrate_agm(epsilon, delta, delta2):
    """Minimal Gaussian sigma satisfying the analytic-mechanism condition.

    Solves Phi(D/(2s) - es/D) - e^eps * Phi(-D/(2s) - es/D) <= delta by
    bisection, tight to well below 1e-9 slack on the condition value.
    """
    if delta <= 0.0:
        raise BudgetError("the Gaussian mechanism requires delta > 0")
    if delta >= 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if epsilon <= 0.0 or delta2 <= 0.0:
        raise ValueError("epsilon and delta2 must be positive")
    lo = delta2 * 1e-9
    hi = delta2
    for _ in range(200):
        if _agm_condition(hi, epsilon, delta2) <= delta:
            break
        hi *= 2.0
    else:
        raise CalibrationError("failed to bracket the analytic Gaussian condition")
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _agm_condition(mid, epsilon, delta2) <= delta:
            hi = mid
        else:
            lo = mid
        if 0.0 <= delta - _agm_condition(hi, epsilon, delta2) <= 1e-12:
            break
    return hi


def gaussian_agm(zbar, epsilon, delta, delta2, rng):
    """Additive Gaussian noise calibrated via the analytic mechanism."""
    sigma = calibrate_agm(epsilon, delta, delta2)
    zbar = np.asarray(zbar, dtype=np.float64)
    return zbar + rng.normal(0.0, sigma, size=zbar.shape)


# --- spherical mechanisms ---------------------------------------------------
#
# Both follow the same template: split the budget as eps = eps0 + eps1,
# pick the true direction's side with probability p = e^{eps0}/(e^{eps0}+1),
# and draw the projection onto the input direction from the distribution
# conditioned above/below a threshold gamma. The threshold is the
# e^{eps1}/(e^{eps1}+1) quantile of the projection law, which makes the
# two-level step density satisfy the eps-LDP ratio exactly:
# log[(p/P_up) / ((1-p)/P_dn)] = eps0 + eps1.


def _cap_threshold(m, eps1):
    """Largest cap offset whose step-density ratio stays within eps1."""
    if m < 2:
        return 0.0
    quantile = np.exp(eps1) / (np.exp(eps1) + 1.0) if eps1 < 500 else 1.0
    a = 0.5 * (m - 1.0)
    tau = betaincinv(a, a, min(quantile, 1.0 - 1e-16))
    return float(np.clip(2.0 * tau - 1.0, 0.0, 1.0 - 1e-12))


def _cap_mass(m, gamma):
    """P(<u, v> >= gamma) for u uniform on the unit sphere."""
    a = 0.5 * (m - 1.0)
    return float(1.0 - betainc(a, a, 0.5 * (1.0 + gamma)))


def _sphere_debias(m, gamma, p):
    """E[<u, v>] of the cap randomizer; the correction is its reciprocal."""
    a = 0.5 * (m - 1.0)
    p_up = _cap_mass(m, gamma)
    p_dn = 1.0 - p_up
    if p_up <= 0.0 or p_dn <= 0.0:
        return -np.inf
    log_prefactor = (
        a * np.log1p(-gamma * gamma)
        - 2.0 * a * np.log(2.0)
        - np.log(a)
        - betaln(a, a)
    )
    bracket = p / p_up - (1.0 - p) / p_dn
    if bracket <= 0.0:
        return -np.inf
    return float(np.exp(log_prefactor) * bracket)


@functools.lru_cache(maxsize=512)
def _privunit2_params(m, epsilon, budget_split):
    """(gamma, p, mean_projection) for the sphere cap randomizer.

    With budget_split None the split is chosen by a 1-D grid over
    eps0 in [0, eps] (step eps/100) maximizing the mean projection,
    i.e. minimizing the debiasing correction.
    """
    if m == 1:
        p = np.exp(epsilon) / (np.exp(epsilon) + 1.0)
        return 0.0, p, 2.0 * p - 1.0
    if budget_split is not None:
        fractions = [float(budget_split)]
    else:
        fractions = np.arange(_SPLIT_GRID_STEPS + 1) / _SPLIT_GRID_STEPS
    best = None
    for frac in fractions:
        eps0 = frac * epsilon
        eps1 = epsilon - eps0
        p = np.exp(eps0) / (np.exp(eps0) + 1.0)
        gamma = _cap_threshold(m, eps1)
        mean_proj = _sphere_debias(m, gamma, p)
        if best is None or mean_proj > best[2]:
            best = (gamma, p, mean_proj)
    if best is None or best[2] <= 0.0:
        raise CalibrationError("no feasible budget split for the sphere randomizer")
    return best


def _unit_rows(x, rng):
    """Normalize rows; zero rows are replaced by random directions."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0.0
    if np.any(zero):
        warnings.warn("zero input to a spherical mechanism; using a random direction")
        fill = rng.standard_normal((int(zero.sum()), x.shape[1]))
        fill /= np.linalg.norm(fill, axis=1, keepdims=True)
        x = x.copy()
        x[zero] = fill
        norms = np.where(zero, 1.0, norms)
    return x / norms[:, None], norms


def _orthogonal_unit_completion(v, rng):
    """Uniform unit vectors orthogonal to each row of v."""
    g = rng.standard_normal(v.shape)
    g -= np.sum(g * v, axis=1, keepdims=True) * v
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    # A zero orthogonal part has probability zero; guard anyway.
    norms[norms == 0.0] = 1.0
    return g / norms


def _cap_projections_inverse_cdf(m, gamma, above, rng, count):
    """Sample <u, v> conditioned on the cap side via the Beta inverse CDF."""
    a = 0.5 * (m - 1.0)
    tau = 0.5 * (1.0 + gamma)
    split = betainc(a, a, tau)
    u = rng.uniform(size=count)
    u = split + u * (1.0 - split) if above else u * split
    t = 2.0 * betaincinv(a, a, np.clip(u, 1e-300, 1.0 - 1e-16)) - 1.0
    return np.clip(t, -1.0, 1.0)


def _cap_projections_rejection(m, gamma, above, rng, count):
    """Rejection-sample the projection by drawing sphere points in chunks."""
    out = np.empty(count)
    filled = 0
    chunk = max(4 * count, 64)
    while filled < count:
        g = rng.standard_normal((chunk, m))
        t = g[:, 0] / np.linalg.norm(g, axis=1)
        accepted = t[t >= gamma] if above else t[t < gamma]
        take = min(accepted.size, count - filled)
        out[filled : filled + take] = accepted[:take]
        filled += take
    return out


def _spherical_outputs(v, projections, rng):
    w = _orthogonal_unit_completion(v, rng)
    t = projections[:, None]
    return t * v + np.sqrt(np.clip(1.0 - t * t, 0.0, None)) * w


def _privunit2_directions(v, epsilon, budget_split, rng):
    """Cap-randomized unit vectors for unit rows v; returns (u, mean_proj)."""
    n, m = v.shape
    gamma, p, mean_proj = _privunit2_params(m, float(epsilon), budget_split)
    if m == 1:
        keep = rng.uniform(size=n) < p
        u = np.where(keep[:, None], v, -v)
        return u, mean_proj
    above = rng.uniform(size=n) < p
    projections = np.empty(n)
    for side in (True, False):
        idx = np.nonzero(above == side)[0]
        if idx.size == 0:
            continue
        if m <= REJECTION_MAX_DIM:
            t = _cap_projections_rejection(m, gamma, side, rng, idx.size)
        else:
            t = _cap_projections_inverse_cdf(m, gamma, side, rng, idx.size)
        projections[idx] = t
    return _spherical_outputs(v, projections, rng), mean_proj


def privunit2(zbar, epsilon, budget_split=None, rng=None):
    """Unit-sphere cap randomizer, unbiased for the input vector.

    The input is normalized internally; the output is a sphere point
    scaled by the debiasing correction times the input norm, so its
    norm is constant for fixed (m, epsilon, input norm). With m = 1 the
    mechanism degenerates to randomized response on {-1, +1}.

    Args:
        zbar: Input vector (m,).
        epsilon: Pure-LDP budget (holds for inputs of a common norm).
        budget_split: Optional fixed fraction of epsilon spent on the
            cap-side choice; None selects the variance-minimizing split
            on a grid.
        rng: numpy Generator.

    Returns:
        Vector (m,) with expectation equal to zbar.
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    zbar = np.asarray(zbar, dtype=np.float64)
    v, norms = _unit_rows(zbar, rng)
    u, mean_proj = _privunit2_directions(v, epsilon, budget_split, rng)
    out = u * (norms / mean_proj)[:, None]
    return out[0] if zbar.ndim == 1 else out


@functools.lru_cache(maxsize=512)
def _privunitg_params(m, epsilon, budget_split):
    """(gamma, p, mean_projection) for the Gaussian ambient randomizer.

    The mean projection E[alpha] under the two-sided truncation is
    evaluated by 1-D quadrature of x * phi(x) on each side; an estimated
    quadrature error above 1e-8 raises CalibrationError.
    """

    def _mean(gamma, p):
        phi = lambda x: np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        upper, err_up = integrate.quad(
            lambda x: x * phi(x), gamma, np.inf, epsabs=1e-12, epsrel=1e-12
        )
        lower, err_dn = integrate.quad(
            lambda x: x * phi(x), -np.inf, gamma, epsabs=1e-12, epsrel=1e-12
        )
        if max(err_up, err_dn) > 1e-8:
            raise CalibrationError("projection-mean quadrature did not converge")
        p_up = 1.0 - ndtr(gamma)
        p_dn = ndtr(gamma)
        if p_up <= 0.0 or p_dn <= 0.0:
            return -np.inf
        return p * upper / p_up + (1.0 - p) * lower / p_dn

    if budget_split is not None:
        fractions = [float(budget_split)]
    else:
        fractions = np.arange(_SPLIT_GRID_STEPS + 1) / _SPLIT_GRID_STEPS
    best = None
    for frac in fractions:
        eps0 = frac * epsilon
        eps1 = epsilon - eps0
        p = np.exp(eps0) / (np.exp(eps0) + 1.0)
        quantile = np.exp(eps1) / (np.exp(eps1) + 1.0) if eps1 < 500 else 1.0
        gamma = float(ndtri(min(quantile, 1.0 - 1e-16)))
        mean_proj = _mean(gamma, p)
        if best is None or mean_proj > best[2]:
            best = (gamma, p, mean_proj)
    if best is None or best[2] <= 0.0:
        raise CalibrationError("no feasible budget split for the Gaussian randomizer")
    return best


def _privunitg_directions(v, epsilon, budget_split, rng):
    """Gaussian ambient draws conditioned on the cap side; (w, mean_proj)."""
    n, m = v.shape
    gamma, p, mean_proj = _privunitg_params(m, float(epsilon), budget_split)
    above = rng.uniform(size=n) < p
    cdf_gamma = ndtr(gamma)
    u = rng.uniform(size=n)
    u = np.where(above, cdf_gamma + u * (1.0 - cdf_gamma), u * cdf_gamma)
    alpha = ndtri(np.clip(u, 1e-300, 1.0 - 1e-16))
    g = rng.standard_normal((n, m))
    g -= np.sum(g * v, axis=1, keepdims=True) * v
    return alpha[:, None] * v + g, mean_proj


def privunitg(zbar, epsilon, budget_split=None, rng=None):
    """Gaussian ambient-space variant of the sphere randomizer.

    Same step-function structure as privunit2 but the output lives in
    the ambient Gaussian rather than on the sphere, with the debiasing
    constant computed by 1-D numerical integration.
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    zbar = np.asarray(zbar, dtype=np.float64)
    v, norms = _unit_rows(zbar, rng)
    w, mean_proj = _privunitg_directions(v, epsilon, budget_split, rng)
    out = w * (norms / mean_proj)[:, None]
    return out[0] if zbar.ndim == 1 else out


# --- coordinate-wise Laplace -------------------------------------------------


def cw_scales(epsilon, coord_sens, rule="equal_ratio"):
    """Per-coordinate Laplace scales whose budget shares sum to epsilon.

    "equal_ratio" gives every coordinate the same epsilon share,
    b_j = m * sens_j / eps. "mse" minimizes the total noise variance
    under the same budget identity, giving b_j proportional to
    sens_j^{1/3}.
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    sens = np.asarray(coord_sens, dtype=np.float64)
    if sens.ndim != 1 or sens.size == 0:
        raise ValueError("coord_sens must be a non-empty vector")
    if np.any(sens <= 0.0) or not np.all(np.isfinite(sens)):
        raise ValueError("coordinate sensitivities must be positive and finite")
    m = sens.shape[0]
    if rule == "equal_ratio":
        return m * sens / epsilon
    if rule == "mse":
        cube = np.cbrt(sens)
        return cube * np.sum(sens / cube) / epsilon
    raise ValueError(f"unknown allocation rule {rule!r}")


def cw_inid_laplace(zbar, epsilon, coord_sens, rng, rule="equal_ratio"):
    """Independent, non-identically distributed Laplace noise.

    The scales satisfy sum_j coord_sens_j / b_j = epsilon, so the
    composition over coordinates consumes the budget exactly.
    """
    scales = cw_scales(epsilon, coord_sens, rule=rule)
    zbar = np.asarray(zbar, dtype=np.float64)
    return zbar + rng.laplace(0.0, 1.0, size=zbar.shape) * scales


# --- empirical audit ---------------------------------------------------------


@dataclass(frozen=True)
class AuditResult:
    """Histogram audit of the privacy-loss ratio between two inputs."""

    max_loss: float
    bin_edges: np.ndarray
    counts_a: np.ndarray
    counts_b: np.ndarray
    trials: int

    def passes(self, epsilon, slack=0.05):
        return self.max_loss <= epsilon + slack


def ldp_audit(sample_fn, z, zprime, *, trials, bins=50, rng=None, statistic=None):
    """Empirical max privacy loss of a randomizer on the pair (z, z').

    Runs the mechanism ``trials`` times on each input, reduces outputs
    to scalars (via ``statistic`` when they are vectors; any such
    reduction is post-processing and lower-bounds the true loss), and
    returns the largest |log ratio| of Laplace-smoothed bin frequencies.

    Args:
        sample_fn: Callable (input, rng, count) -> array of outputs,
            shape (count,) or (count, m).
        z, zprime: The audited input pair.
        trials: Samples per input; at least 1e5.
        bins: Histogram bin count over the pooled output range.
        rng: numpy Generator.
        statistic: Optional callable mapping outputs to scalars.

    Returns:
        AuditResult with the max empirical loss.
    """
    if trials < 10**5:
        raise ValueError("audits need at least 1e5 trials per input")
    # Common random numbers: both inputs see the same noise stream.
    # Marginal histograms stay exact while the ratio noise shrinks, and
    # identical inputs yield identical outputs (loss exactly zero).
    state = rng.bit_generator.state
    out_a = np.asarray(sample_fn(z, rng, trials), dtype=np.float64)
    rng.bit_generator.state = state
    out_b = np.asarray(sample_fn(zprime, rng, trials), dtype=np.float64)
    if statistic is not None:
        out_a = np.asarray(statistic(out_a), dtype=np.float64)
        out_b = np.asarray(statistic(out_b), dtype=np.float64)
    if out_a.ndim != 1 or out_b.ndim != 1:
        raise ValueError("vector outputs need a scalar statistic")
    # Equal-mass bins from the first input's sample: its per-bin counts
    # are then deterministic (trials/bins each), so the per-bin log
    # ratio fluctuates within the 3/sqrt(trials/bins) noise bound.
    # Edges closer than the relative tolerance are merged so that point
    # masses (smeared by float round-off) land in a single bin.
    edges = np.unique(np.quantile(out_a, np.linspace(0.0, 1.0, bins + 1)))
    if edges.size < 2:
        edges = np.array([edges[0] - 0.5, edges[0] + 0.5])
    tol = 1e-9 * max(edges[-1] - edges[0], 1e-300)
    merged = [edges[0]]
    for edge in edges[1:]:
        if edge - merged[-1] > tol:
            merged.append(edge)
    if len(merged) == 1:
        merged.append(edges[0] + 1.0)
    merged[-1] = max(merged[-1], edges[-1])
    edges = np.asarray(merged)
    edges[0] = min(edges[0], out_b.min())
    edges[-1] = max(edges[-1], out_b.max())
    bins = edges.size - 1
    counts_a, _ = np.histogram(out_a, bins=edges)
    counts_b, _ = np.histogram(out_b, bins=edges)
    # Add-one smoothing keeps every bin ratio finite.
    p_a = (counts_a + 1.0) / (trials + bins)
    p_b = (counts_b + 1.0) / (trials + bins)
    max_loss = float(np.abs(np.log(p_a) - np.log(p_b)).max())
    return AuditResult(
        max_loss=max_loss,
        bin_edges=edges,
        counts_a=counts_a,
        counts_b=counts_b,
        trials=trials,
    )
