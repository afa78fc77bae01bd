"""Dense matrix primitives: thin SVD, Frobenius norm, 2-D Gaussian smoothing.

Matrices are plain 2-D ``float64`` numpy arrays.  The SVD is a one-sided
(Hestenes) Jacobi iteration with a round-robin pair ordering, so every sweep
rotates ``n/2`` disjoint column pairs at once.
"""

import math
from typing import NamedTuple

import numpy as np

from .errors import NumericalError, StructureError

_EPS = np.finfo(np.float64).eps


class SvdResult(NamedTuple):
    U: np.ndarray  # m x r, orthonormal columns
    s: np.ndarray  # r singular values, nonincreasing
    V: np.ndarray  # n x r, orthonormal columns


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.size == 0:
        raise StructureError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("matrix contains non-finite entries")
    return a


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(math.sqrt(float(np.sum(a * a))))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of disjoint (p, q) pairs covering all pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            p, q = players[i], players[size - 1 - i]
            if p >= 0 and q >= 0:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=int), np.array(qs, dtype=int)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_basis(U: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns not in ``keep`` by an orthonormal completion of the kept ones."""
    m, r = U.shape
    out = U.copy()
    basis = [out[:, j] for j in range(r) if keep[j]]
    candidates = iter(np.eye(m))
    for j in range(r):
        if keep[j]:
            continue
        for e in candidates:
            v = e.copy()
            for _ in range(2):  # re-orthogonalize once for stability
                for b in basis:
                    v -= (b @ v) * b
            norm = np.linalg.norm(v)
            if norm > 1e-8:
                v /= norm
                break
        else:  # pragma: no cover - m >= r guarantees a candidate exists
            raise NumericalError("could not complete orthonormal basis")
        out[:, j] = v
        basis.append(v)
    return out


def _jacobi_tall(a: np.ndarray, max_sweeps: int) -> SvdResult:
    m, n = a.shape
    A = a.copy()
    V = np.eye(n)
    tol = max(m, n) * _EPS
    # columns below this squared norm are numerically zero; rotating them only churns
    floor = (_EPS * max(frobenius_norm(a), np.finfo(np.float64).tiny)) ** 2
    rounds = _round_robin(n) if n > 1 else []
    for _ in range(max_sweeps):
        rotated = False
        for ps, qs in rounds:
            Ap, Aq = A[:, ps], A[:, qs]
            alpha = np.einsum("ij,ij->j", Ap, Ap)
            beta = np.einsum("ij,ij->j", Aq, Aq)
            gamma = np.einsum("ij,ij->j", Ap, Aq)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (alpha > floor) & (beta > floor)
            if not np.any(active):
                continue
            rotated = True
            ps, qs = ps[active], qs[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            sign = np.where(zeta >= 0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for M in (A, V):
                Mp, Mq = M[:, ps].copy(), M[:, qs]
                M[:, ps] = c * Mp - s * Mq
                M[:, qs] = s * Mp + c * Mq
        if not rotated:
            break
    else:
        raise NumericalError(f"Jacobi SVD did not converge within {max_sweeps} sweeps")

    sigma = np.sqrt(np.einsum("ij,ij->j", A, A))
    order = np.argsort(-sigma, kind="stable")
    sigma, A, V = sigma[order], A[:, order], V[:, order]
    keep = sigma > (sigma[0] * max(m, n) * _EPS if sigma[0] > 0 else np.inf)
    U = np.zeros_like(A)
    U[:, keep] = A[:, keep] / sigma[keep]
    if not np.all(keep):
        U = _complete_basis(U, keep)
    return SvdResult(U, sigma, V)


def _fix_signs(res: SvdResult) -> SvdResult:
    U, s, V = res.U.copy(), res.s, res.V.copy()
    pivot = np.argmax(np.abs(U), axis=0)
    flip = U[pivot, np.arange(U.shape[1])] < 0
    U[:, flip] *= -1.0
    V[:, flip] *= -1.0
    return SvdResult(U, s, V)


def svd(a, max_sweeps: int | None = None) -> SvdResult:
    """Thin SVD ``a = U diag(s) V^T`` with r = min(m, n).

    Column signs are fixed so that the largest-magnitude entry of every
    column of ``U`` is positive.  Raises :class:`NumericalError` when the
    iteration cap (default ``100 * min(m, n)`` sweeps) is exhausted.
    """
    a = as_matrix(a)
    m, n = a.shape
    if max_sweeps is None:
        max_sweeps = 100 * min(m, n)
    if m >= n:
        res = _jacobi_tall(a, max_sweeps)
    else:
        t = _jacobi_tall(a.T, max_sweeps)
        res = SvdResult(t.V, t.s, t.U)
    return _fix_signs(res)


def _smooth_axis(grid: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = (len(kernel) - 1) // 2
    g = np.moveaxis(grid, axis, 0)
    n = g.shape[0]
    out = np.empty_like(g)
    for i in range(n):
        lo, hi = max(0, i - radius), min(n, i + radius + 1)
        k = kernel[lo - i + radius : hi - i + radius]
        out[i] = np.tensordot(k, g[lo:hi], axes=1) / k.sum()
    return np.moveaxis(out, 0, axis)


def gaussian_smooth_2d(grid, sigma: float) -> np.ndarray:
    """Separable Gaussian blur truncated at radius ceil(3 sigma).

    Near the border the kernel is renormalized over the in-bounds cells, so
    constant grids are fixed points.  ``sigma == 0`` returns a copy.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.size == 0:
        raise StructureError(f"expected a non-empty 2-D grid, got shape {grid.shape}")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return grid.copy()
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return _smooth_axis(_smooth_axis(grid, kernel, 0), kernel, 1)
