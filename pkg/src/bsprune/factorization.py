"""Compact SVD of reshaped convolution kernels by one-sided Jacobi rotations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError

TOLERANCE = 1e-10
MAX_SWEEPS = 60


@dataclass(frozen=True)
class WeightFactorization:
    """``W = U @ diag(sigma) @ V.T`` with ``r = min(k, co)`` columns."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def rank(self):
        return self.sigma.shape[0]

    def reconstruct(self):
        return (self.U * self.sigma) @ self.V.T


def reshape_weights(kernel):
    """(kh, kw, ci, co) kernel -> (kh*kw*ci, co) matrix, rows in im2col order."""
    kh, kw, ci, co = kernel.shape
    return kernel.reshape(kh * kw * ci, co)


def unreshape_weights(matrix, kernel_shape):
    return matrix.reshape(kernel_shape)


def _round_robin(n):
    """Disjoint pairings covering every (p, q) once per sweep (circle method)."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        rounds.append((np.array([p for p, _ in pairs], dtype=int),
                       np.array([q for _, q in pairs], dtype=int)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi(a, tol, max_sweeps):
    """Orthogonalize the columns of ``a`` (m x n, m >= n) in place.

    Returns the accumulated right rotation ``v`` with ``a_in @ v == a_out``.
    """
    n = a.shape[1]
    v = np.eye(n)
    rounds = _round_robin(n)
    off = 0.0
    for _ in range(max_sweeps):
        off = 0.0
        for p, q in rounds:
            if p.size == 0:
                continue
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            scale = np.sqrt(alpha * beta)
            live = scale > 0
            ratio = np.zeros_like(gamma)
            ratio[live] = np.abs(gamma[live]) / scale[live]
            off = max(off, float(ratio.max(initial=0.0)))
            rotate = ratio > tol
            if not rotate.any():
                continue
            zeta = np.where(rotate, (beta - alpha) / (2 * np.where(rotate, gamma, 1.0)), 0.0)
            t = np.where(rotate, np.sign(zeta) / (np.abs(zeta) + np.sqrt(1 + zeta * zeta)), 0.0)
            t[rotate & (zeta == 0)] = 1.0
            c = 1 / np.sqrt(1 + t * t)
            s = c * t
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if off <= tol:
            return v
    raise ConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps", off)


def _complete_basis(u, deficient):
    """Replace columns flagged ``deficient`` by unit vectors orthogonal to the rest."""
    good = [j for j in range(u.shape[1]) if not deficient[j]]
    basis = u[:, good]
    candidate = 0
    for j in np.flatnonzero(deficient):
        while True:
            e = np.zeros(u.shape[0])
            e[candidate % u.shape[0]] = 1.0
            candidate += 1
            for _ in range(2):
                e -= basis @ (basis.T @ e)
            norm = np.linalg.norm(e)
            if norm > 0.5:
                break
        u[:, j] = e / norm
        basis = np.column_stack([basis, u[:, j]])
    return u


def _svd_tall(w, tol, max_sweeps):
    m, n = w.shape
    # QR preconditioning shrinks the rotation work from m x n to n x n
    if m > n:
        q, r_mat = np.linalg.qr(w)
    else:
        q, r_mat = None, w.copy()
    a = np.array(r_mat, dtype=np.float64)
    v = _jacobi(a, tol, max_sweeps)
    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, a, v = sigma[order], a[:, order], v[:, order]
    smax = sigma[0] if sigma.size else 0.0
    deficient = sigma <= smax * max(m, n) * np.finfo(np.float64).eps
    u = np.zeros_like(a)
    u[:, ~deficient] = a[:, ~deficient] / sigma[~deficient]
    if deficient.any():
        u = _complete_basis(u, deficient)
    if q is not None:
        u = q @ u
    return u, sigma, v


def compact_svd(w, tol=TOLERANCE, max_sweeps=MAX_SWEEPS):
    """Compact SVD ``W = U diag(sigma) V^T`` with ``r = min(k, co)``.

    Wide matrices are factorized through their transpose. Singular values are
    returned in descending order; each column of ``U`` is signed so that its
    largest-magnitude entry is non-negative.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("matrix has non-finite entries")
    if w.shape[0] >= w.shape[1]:
        u, sigma, v = _svd_tall(w, tol, max_sweeps)
    else:
        v, sigma, u = _svd_tall(w.T, tol, max_sweeps)
    pivot = np.abs(u).argmax(axis=0)
    signs = np.where(u[pivot, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return WeightFactorization(u * signs, sigma, v * signs)


def pca_identities_check(w, f):
    """Max-abs residuals of ``W^T W = V S^2 V^T`` and ``W V = U S``."""
    w = np.asarray(w, dtype=np.float64)
    covariance = np.abs(w.T @ w - (f.V * f.sigma**2) @ f.V.T).max(initial=0.0)
    projection = np.abs(w @ f.V - f.U * f.sigma).max(initial=0.0)
    return {"covariance": float(covariance), "projection": float(projection)}
