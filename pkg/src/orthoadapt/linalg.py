"""Deterministic dense linear algebra.

One-sided Jacobi SVD, principal/residual subspace splits, Frobenius norms,
and a cyclic Jacobi eigensolver for PCA spectra. Everything here is a pure
function of its inputs with a fixed iteration order and a fixed sign
convention, so identical input bytes give identical output bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError

# Relative off-diagonal tolerance driving Jacobi sweeps to convergence.
_JACOBI_TOL = 1e-14
_MAX_SWEEPS = 64


def check_matrix(a, name="matrix"):
    """Validate and return a 2-D float64 array with finite entries."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name} must have positive dimensions, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


@dataclass
class SvdFactors:
    """Thin SVD factors: u (rows x k), s (k,) descending, v (cols x k)."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


@dataclass
class SubspaceSplit:
    """Partition of SVD factors into a principal part (top r singular
    triplets) and the residual part (the remaining k - r)."""

    r: int
    u_r: np.ndarray
    s_r: np.ndarray
    v_r: np.ndarray
    u_nr: np.ndarray
    s_nr: np.ndarray
    v_nr: np.ndarray
    frozen_frob_sq: float


def _fix_signs(u, v):
    # Largest-|entry| of each u column made non-negative (first index wins
    # ties); the matching v column flips too so the product is unchanged.
    for j in range(u.shape[1]):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]


def _complete_orthonormal(u, start):
    # Replace columns start.. (numerically zero after Jacobi) with a
    # deterministic orthonormal completion built from canonical basis vectors.
    rows = u.shape[0]
    j = start
    for k in range(rows):
        if j >= u.shape[1]:
            break
        cand = np.zeros(rows)
        cand[k] = 1.0
        cand -= u[:, :j] @ (u[:, :j].T @ cand)
        norm = math.sqrt(float(cand @ cand))
        if norm > 1e-8:
            u[:, j] = cand / norm
            j += 1
    if j < u.shape[1]:
        raise NumericalError("orthonormal completion failed")


def svd(m, label="matrix") -> SvdFactors:
    """One-sided Jacobi SVD with a fixed cyclic sweep order.

    Returns thin factors with k = min(rows, cols); for square input the
    factors are full. Singular values are sorted descending (stable in the
    original column order on ties) and factor signs follow the convention in
    ``_fix_signs``.
    """
    a = check_matrix(m, label)
    rows, cols = a.shape
    if rows < cols:
        f = svd(a.T, label)
        return SvdFactors(u=f.v, s=f.s, v=f.u)

    work = a.copy()
    v = np.eye(cols)
    converged = False
    for _ in range(_MAX_SWEEPS):
        worst = 0.0
        for i in range(cols - 1):
            for j in range(i + 1, cols):
                ci = work[:, i]
                cj = work[:, j]
                aii = float(ci @ ci)
                ajj = float(cj @ cj)
                aij = float(ci @ cj)
                denom = math.sqrt(aii * ajj)
                if denom == 0.0 or abs(aij) <= _JACOBI_TOL * denom:
                    continue
                worst = max(worst, abs(aij) / denom)
                theta = 0.5 * math.atan2(2.0 * aij, aii - ajj)
                c = math.cos(theta)
                s = math.sin(theta)
                rot = np.array([[c, -s], [s, c]])
                work[:, [i, j]] = work[:, [i, j]] @ rot
                v[:, [i, j]] = v[:, [i, j]] @ rot
        if worst <= _JACOBI_TOL:
            converged = True
            break
    if not converged:
        raise NumericalError(
            f"SVD of {label} ({rows}x{cols}) did not converge in {_MAX_SWEEPS} sweeps"
        )

    norms = np.sqrt(np.sum(work * work, axis=0))
    order = np.argsort(-norms, kind="stable")
    work = work[:, order]
    v = v[:, order]
    s = norms[order]

    u = np.zeros_like(work)
    cutoff = max(rows, cols) * np.finfo(np.float64).eps * (s[0] if s[0] > 0 else 1.0)
    nonzero = 0
    for j in range(cols):
        if s[j] > cutoff:
            u[:, j] = work[:, j] / s[j]
            nonzero = j + 1
        else:
            s[j] = 0.0
    if nonzero < cols:
        _complete_orthonormal(u, nonzero)
    _fix_signs(u, v)
    return SvdFactors(u=u, s=s, v=v)


def split(f: SvdFactors, r: int) -> SubspaceSplit:
    """Partition factors into the top-r principal part and the residual."""
    k = f.s.shape[0]
    if not 0 <= r <= k:
        raise ValidationError(f"split rank {r} out of range [0, {k}]")
    return SubspaceSplit(
        r=r,
        u_r=f.u[:, :r].copy(),
        s_r=f.s[:r].copy(),
        v_r=f.v[:, :r].copy(),
        u_nr=f.u[:, r:].copy(),
        s_nr=f.s[r:].copy(),
        v_nr=f.v[:, r:].copy(),
        frozen_frob_sq=float(np.sum(f.s * f.s)),
    )


def reconstruct(sp: SubspaceSplit, part="both"):
    """Rebuild the matrix from one or both sides of a split."""
    if part == "principal":
        return (sp.u_r * sp.s_r) @ sp.v_r.T
    if part == "residual":
        return (sp.u_nr * sp.s_nr) @ sp.v_nr.T
    if part == "both":
        return (sp.u_r * sp.s_r) @ sp.v_r.T + (sp.u_nr * sp.s_nr) @ sp.v_nr.T
    raise ValidationError(f"unknown part {part!r}")


def frobenius_sq(m) -> float:
    """Sum of squared entries (equals the sum of squared singular values)."""
    a = check_matrix(m, "matrix")
    return float(np.sum(a * a))


def sym_eig(a, label="matrix"):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns (w, q) with eigenvalues w sorted descending and orthonormal
    eigenvector columns q, sign-fixed like SVD factors.
    """
    m = check_matrix(a, label)
    n, n2 = m.shape
    if n != n2:
        raise ValidationError(f"{label} must be square, got {m.shape}")
    work = 0.5 * (m + m.T)
    scale = float(np.max(np.abs(work))) or 1.0
    q = np.eye(n)
    converged = False
    for _ in range(_MAX_SWEEPS):
        worst = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                aij = work[i, j]
                if abs(aij) <= _JACOBI_TOL * scale:
                    continue
                worst = max(worst, abs(aij) / scale)
                theta = 0.5 * math.atan2(2.0 * aij, work[i, i] - work[j, j])
                c = math.cos(theta)
                s = math.sin(theta)
                rot = np.array([[c, -s], [s, c]])
                work[:, [i, j]] = work[:, [i, j]] @ rot
                work[[i, j], :] = rot.T @ work[[i, j], :]
                work[i, j] = work[j, i] = 0.0
                q[:, [i, j]] = q[:, [i, j]] @ rot
        if worst <= _JACOBI_TOL:
            converged = True
            break
    if not converged:
        raise NumericalError(f"eigendecomposition of {label} did not converge")
    w = np.diag(work).copy()
    order = np.argsort(-w, kind="stable")
    w = w[order]
    q = q[:, order]
    dummy = q.copy()
    _fix_signs(q, dummy)
    return w, q


@dataclass
class PcaSpectrum:
    """Explained-variance ratios, descending; flagged when total variance is 0."""

    ratios: np.ndarray
    zero_variance: bool


def pca_spectrum(features) -> PcaSpectrum:
    """Explained-variance ratios of the sample covariance (ddof=1)."""
    x = check_matrix(features, "features")
    samples, dims = x.shape
    if samples < 2:
        raise ValidationError("pca_spectrum needs at least 2 samples")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (samples - 1)
    w, _ = sym_eig(cov, "covariance")
    w = np.clip(w, 0.0, None)
    total = float(w.sum())
    if total <= 0.0:
        return PcaSpectrum(ratios=np.zeros(dims), zero_variance=True)
    return PcaSpectrum(ratios=w / total, zero_variance=False)


def pca_directions(features, k):
    """Top-k principal directions (columns) and eigenvalues of the covariance."""
    x = check_matrix(features, "features")
    samples, dims = x.shape
    if samples < 2:
        raise ValidationError("pca_directions needs at least 2 samples")
    if not 1 <= k <= dims:
        raise ValidationError(f"k={k} out of range [1, {dims}]")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (samples - 1)
    w, q = sym_eig(cov, "covariance")
    return np.clip(w[:k], 0.0, None), q[:, :k]
