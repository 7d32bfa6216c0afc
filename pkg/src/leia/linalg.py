"""Dense linear algebra and loss primitives.

Everything in this module is a pure function of its inputs and fully
deterministic: the same input bits always produce the same output bits.
Internal precision is float64 throughout; any narrower on-disk precision
is the I/O layer's concern.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NumericalError",
    "EigenDecomposition",
    "ErrorSubspace",
    "softmax",
    "softmax_rows",
    "cross_entropy",
    "cross_entropy_rows",
    "weighted_mean",
    "error_weighted_covariance",
    "symmetric_eigendecomposition",
    "top_k_subspace",
    "cumulative_explained_variance",
]

# Convergence control for the Jacobi eigensolver: we stop once the
# off-diagonal Frobenius norm drops below EIGH_TOL * (1 + ||S||_F).
EIGH_TOL = 1e-12
EIGH_MAX_SWEEPS = 100


class NumericalError(ArithmeticError):
    """A numerical procedure failed (divergence, degenerate spectrum, ...)."""


def _as_vector(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def _as_matrix(x, name: str) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def _check_finite_vector(v: np.ndarray, name: str) -> None:
    bad = np.flatnonzero(~np.isfinite(v))
    if bad.size:
        raise ValueError(f"{name} contains non-finite value at index {bad[0]}")


def _check_weights(weights, n: int, tol: float = 1e-9) -> np.ndarray:
    w = _as_vector(weights, "weights")
    if w.shape[0] != n:
        raise ValueError(f"weights length {w.shape[0]} does not match n={n}")
    _check_finite_vector(w, "weights")
    s = float(w.sum())
    if abs(s - 1.0) > tol:
        raise ValueError(f"weights must sum to 1 (got {s!r})")
    return w


def softmax(logits) -> np.ndarray:
    """Stabilized softmax of a logit vector (max subtracted before exp)."""
    z = _as_vector(logits, "logits")
    _check_finite_vector(z, "logits")
    shifted = z - z.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_rows(logits) -> np.ndarray:
    """Row-wise stabilized softmax of an (n, C) logit matrix."""
    z = _as_matrix(logits, "logits")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_sum_exp_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def softmax_and_losses(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row softmax and per-example cross-entropy in one stabilized pass.

    Training loops call this every epoch; sharing the shifted exponentials
    halves the work relative to separate softmax_rows / cross_entropy_rows
    calls while producing the same values.
    """
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    sums = e.sum(axis=1, keepdims=True)
    probs = e / sums
    n = logits.shape[0]
    losses = (np.log(sums[:, 0]) + m[:, 0]
              - logits[np.arange(n), labels])
    return probs, losses


def cross_entropy(logits, label: int) -> float:
    """Cross-entropy loss -log p(label), computed via log-sum-exp.

    Never takes the log of a softmax output, so confident wrong
    predictions stay finite instead of collapsing to log(0).
    """
    z = _as_vector(logits, "logits")
    _check_finite_vector(z, "logits")
    c = z.shape[0]
    if not 0 <= int(label) < c:
        raise ValueError(f"label {label} out of range for {c} classes")
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    return float(lse - z[int(label)])


def cross_entropy_rows(logits, labels) -> np.ndarray:
    """Per-example cross-entropy for an (n, C) logit matrix."""
    z = _as_matrix(logits, "logits")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (z.shape[0],):
        raise ValueError(f"labels shape {y.shape} does not match logits {z.shape}")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        bad = int(y[(y < 0) | (y >= z.shape[1])][0])
        raise ValueError(f"label {bad} out of range for {z.shape[1]} classes")
    return _log_sum_exp_rows(z) - z[np.arange(z.shape[0]), y]


def weighted_mean(embeddings, weights) -> np.ndarray:
    """Weighted mean sum_i w_i z_i of the rows of an (n, d) matrix."""
    z = _as_matrix(embeddings, "embeddings")
    w = _check_weights(weights, z.shape[0])
    return w @ z


def error_weighted_covariance(embeddings, weights) -> np.ndarray:
    """Weighted covariance sum_i w_i (z_i - zbar)(z_i - zbar)^T.

    The result is symmetrized on output so downstream eigensolvers see an
    exactly symmetric matrix.
    """
    z = _as_matrix(embeddings, "embeddings")
    if z.shape[0] < 1:
        raise ValueError("covariance requires at least one embedding row")
    w = _check_weights(weights, z.shape[0])
    centered = z - (w @ z)
    cov = (w[:, None] * centered).T @ centered
    return (cov + cov.T) / 2.0


@dataclass
class EigenDecomposition:
    """Full spectrum of a symmetric matrix, eigenvalues sorted descending.

    Column i of ``eigenvectors`` pairs with ``eigenvalues[i]``. Each
    eigenvector is sign-fixed so that its first component of magnitude
    above 1e-12 is positive, making the decomposition reproducible.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


@dataclass
class ErrorSubspace:
    """Top-k eigenpairs of a (PSD) covariance, plus the total spectral mass.

    ``total_variance`` is the sum of all eigenvalues (negatives from
    roundoff clamped to zero), kept so explained-variance ratios can be
    computed from the truncated object.
    """

    basis: np.ndarray  # (d, k), orthonormal columns
    eigenvalues: np.ndarray  # (k,), non-increasing
    total_variance: float

    @property
    def rank(self) -> int:
        return self.basis.shape[1]


def symmetric_eigendecomposition(matrix) -> EigenDecomposition:
    """Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.

    The solver is intentionally self-contained and deterministic: rotations
    are applied in a fixed (p, q) order until the off-diagonal Frobenius
    norm falls below EIGH_TOL * (1 + ||S||_F), at most EIGH_MAX_SWEEPS
    sweeps. Results satisfy, within documented tolerances: orthonormal
    eigenvectors, S v = lambda v residuals, and eigenvalue sum = trace.
    """
    s = _as_matrix(matrix, "matrix")
    d = s.shape[0]
    if s.shape[1] != d:
        raise ValueError(f"matrix must be square, got shape {s.shape}")
    if d < 1:
        raise ValueError("matrix must be at least 1x1")
    asym = float(np.abs(s - s.T).max())
    scale = max(1.0, float(np.abs(s).max()))
    if asym > 1e-9 * scale:
        raise ValueError(f"matrix is not symmetric: max |S_ij - S_ji| = {asym:.3e}")

    a = (s + s.T) / 2.0
    v = np.eye(d)
    fro = float(np.linalg.norm(a))
    threshold = EIGH_TOL * (1.0 + fro)

    def off_norm(m: np.ndarray) -> float:
        off = m - np.diag(np.diag(m))
        return float(np.linalg.norm(off))

    converged = d == 1 or off_norm(a) <= threshold
    for _ in range(EIGH_MAX_SWEEPS):
        if converged:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app, aqq = a[p, p], a[q, q]
                tau = (aqq - app) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                sn = t * c
                # two-sided rotation J^T A J, rows first then columns
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - sn * row_q
                a[q, :] = sn * row_p + c * row_q
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - sn * col_q
                a[:, q] = sn * col_p + c * col_q
                # exact values for the rotated 2x2 block kill roundoff drift
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
        converged = off_norm(a) <= threshold
    if not converged:
        raise NumericalError(
            f"Jacobi eigensolver did not converge in {EIGH_MAX_SWEEPS} sweeps "
            f"(off-diagonal norm {off_norm(a):.3e}, threshold {threshold:.3e})"
        )

    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = v[:, order]
    for j in range(d):
        col = vectors[:, j]
        big = np.flatnonzero(np.abs(col) > 1e-12)
        if big.size and col[big[0]] < 0.0:
            vectors[:, j] = -col
    return EigenDecomposition(eigenvalues=values, eigenvectors=vectors)


def top_k_subspace(decomposition: EigenDecomposition, k: int) -> ErrorSubspace:
    """Truncate a decomposition to its leading k eigenpairs."""
    d = decomposition.eigenvalues.shape[0]
    if not 1 <= k <= d:
        raise ValueError(f"k={k} out of range for spectrum of size {d}")
    total = float(np.maximum(decomposition.eigenvalues, 0.0).sum())
    return ErrorSubspace(
        basis=decomposition.eigenvectors[:, :k].copy(),
        eigenvalues=decomposition.eigenvalues[:k].copy(),
        total_variance=total,
    )


def cumulative_explained_variance(eigenvalues, k: int) -> float:
    """Fraction of total spectral mass captured by the top-k eigenvalues.

    Tiny negative eigenvalues (roundoff from a PSD source) are clamped to
    zero before forming the ratio. An all-zero spectrum has no structure
    to explain and is rejected.
    """
    vals = np.maximum(_as_vector(eigenvalues, "eigenvalues"), 0.0)
    n = vals.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for spectrum of size {n}")
    total = float(vals.sum())
    if total <= 0.0:
        raise NumericalError("all-zero spectrum: no variance to explain")
    return float(vals[:k].sum()) / total
