"""Dense linear-algebra kernels for the reshaping pipeline.

All kernels operate on plain float64 numpy arrays and target the small
dense matrices used here (a few hundred rows at most). Eigenvector and
complement-basis columns are sign-fixed (first significant entry made
positive) so repeated runs produce identical transforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SymEigResult", "sym_eig", "qr_complement", "induced_norm"]

_SIGN_TOL = 1e-9


def _as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _fix_column_signs(v):
    """Flip columns so the first entry above the sign tolerance is positive."""
    v = np.array(v, copy=True)
    for j in range(v.shape[1]):
        col = v[:, j]
        significant = np.nonzero(np.abs(col) > _SIGN_TOL)[0]
        if significant.size and col[significant[0]] < 0:
            v[:, j] = -col
    return v


@dataclass(frozen=True)
class SymEigResult:
    """Eigendecomposition A = V diag(w) V^T with w sorted descending.

    ``eigenvectors[:, i]`` pairs with ``eigenvalues[i]``; columns are
    orthonormal and sign-fixed.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def sym_eig(a, rel_tol=1e-9):
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Args:
        a: Symmetric matrix (m, m). Symmetry is checked against
            ``rel_tol`` relative to the largest entry magnitude.
        rel_tol: Allowed relative asymmetry.

    Returns:
        SymEigResult with descending eigenvalues and orthonormal,
        sign-fixed eigenvector columns.

    Raises:
        ValueError: On non-square, non-finite, or asymmetric input.
    """
    a = _as_matrix(a, "A")
    m, n = a.shape
    if m != n:
        raise ValueError(f"A must be square, got shape {a.shape}")
    scale = float(np.abs(a).max())
    if scale > 0.0 and float(np.abs(a - a.T).max()) > rel_tol * scale:
        raise ValueError("A is not symmetric within tolerance")
    eigenvalues, eigenvectors = np.linalg.eigh(0.5 * (a + a.T))
    order = np.argsort(eigenvalues)[::-1]
    return SymEigResult(
        eigenvalues=eigenvalues[order],
        eigenvectors=_fix_column_signs(eigenvectors[:, order]),
    )


def qr_complement(b):
    """Orthonormal basis of the orthogonal complement of span(B).

    Args:
        b: Matrix (m, r) with orthonormal columns, 0 < r <= m.

    Returns:
        Matrix (m, m - r) with orthonormal, sign-fixed columns spanning
        the complement; empty (m, 0) when r == m. The concatenation
        [B | Q_n] is orthogonal.

    Raises:
        ValueError: If r > m, B is rank deficient, or its columns are
            not orthonormal within 1e-8.
    """
    b = _as_matrix(b, "B")
    m, r = b.shape
    if r > m:
        raise ValueError(f"B has more columns than rows: {b.shape}")
    singular_values = np.linalg.svd(b, compute_uv=False)
    if singular_values[-1] < 1e-8:
        raise ValueError("B is numerically rank deficient")
    if float(np.abs(b.T @ b - np.eye(r)).max()) > 1e-8:
        raise ValueError("B columns are not orthonormal within 1e-8")
    if r == m:
        return np.zeros((m, 0))
    # Full QR: the leading r columns of Q span col(B), the rest span the
    # complement to machine precision.
    q, _ = np.linalg.qr(b, mode="complete")
    return _fix_column_signs(q[:, r:])


def induced_norm(m_, p):
    """Induced (operator) norm of a square matrix for p in {1, 2}.

    p=1 is the maximum absolute column sum; p=2 is the largest singular
    value.
    """
    m_ = _as_matrix(m_, "M")
    if m_.shape[0] != m_.shape[1]:
        raise ValueError(f"M must be square, got shape {m_.shape}")
    if p == 1:
        return float(np.abs(m_).sum(axis=0).max())
    if p == 2:
        return float(np.linalg.svd(m_, compute_uv=False)[0])
    raise ValueError(f"unsupported norm order p={p!r}; expected 1 or 2")
