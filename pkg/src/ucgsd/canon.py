"""Canonical diagonal scaling of matrices and conv kernels.

A nonzero matrix ``W`` is factored as ``W = diag(d) @ Wp @ diag(e)`` with
``d, e > 0`` chosen so that every row and every column of ``|Wp|`` has unit
geometric mean over its nonzero entries.  ``Wp`` depends only on the
diagonal-scaling equivalence class of ``W``: ``C(D W E) == C(W)`` for any
positive diagonals ``D``, ``E`` (on connected supports).  The balancing is
linear in the log domain; dense inputs have a closed form, sparse supports
are handled by alternating row/column mean removal.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ConvergenceError, DegenerateInputError, ShapeError
from .tensor import as_matrix, as_tensor4

__all__ = [
    "ZERO_THRESHOLD",
    "LogBalance",
    "ScaleDecomposition",
    "ChannelScaleDecomposition",
    "balance_log",
    "rz_canonicalize",
    "uc_adjoint",
    "canonical_project",
    "canonicalize_kernel",
]

# entries below this magnitude are structural zeros
ZERO_THRESHOLD = 1e-30
DEFAULT_TOL = 1e-12
DEFAULT_MAX_ITER = 10_000


class LogBalance(NamedTuple):
    r: np.ndarray
    c: np.ndarray
    residual: float
    iters: int


@dataclass(frozen=True)
class ScaleDecomposition:
    d: np.ndarray
    wp: np.ndarray
    e: np.ndarray
    residual: float = 0.0
    iters: int = 0

    def reconstruct(self):
        return self.d[:, None] * self.wp * self.e[None, :]


@dataclass(frozen=True)
class ChannelScaleDecomposition:
    d: np.ndarray
    kp: np.ndarray
    e: np.ndarray
    residual: float = 0.0
    iters: int = 0

    def reconstruct(self):
        return self.d[:, None, None, None] * self.kp * self.e[None, :, None, None]


def _masked_residual(a, w, r, c):
    res = w * (a - r[:, None] - c[None, :])
    row = np.abs(res.sum(axis=1) / w.sum(axis=1)).max()
    col = np.abs(res.sum(axis=0) / w.sum(axis=0)).max()
    return float(max(row, col))


def _equal_split(mask, r, c):
    # Fix the free offset of every connected component of the support so that
    # the mean row offset equals the mean column offset.
    m, n = mask.shape
    ii, jj = np.nonzero(mask)
    graph = coo_matrix((np.ones(ii.size), (ii, m + jj)), shape=(m + n, m + n))
    ncomp, labels = connected_components(graph, directed=False)
    r, c = r.copy(), c.copy()
    rl, cl = labels[:m], labels[m:]
    for k in range(ncomp):
        rk, ck = rl == k, cl == k
        t = 0.5 * (r[rk].mean() - c[ck].mean())
        r[rk] -= t
        c[ck] += t
    return r, c


def balance_log(a, mask, weights=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Additively balance ``a`` over the active entries of ``mask``.

    Finds row offsets ``r`` and column offsets ``c`` so that the residual
    ``a[i, j] - r[i] - c[j]`` has zero (weighted) mean over the active
    entries of every row and every column.  Optional nonnegative ``weights``
    (same shape as ``a``, zero where inactive) turn the means into weighted
    means.

    Fully active, uniformly weighted inputs are solved in one pass by the
    two-way mean decomposition.  Anything else runs alternating sweeps until
    the largest row/column residual mean is at most ``tol``.  The overall
    offset of each connected component of the support is split equally
    between rows and columns.

    Returns a :class:`LogBalance` ``(r, c, residual, iters)``.
    """
    a = as_matrix(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match {a.shape}")
    if not (mask.any(axis=1).all() and mask.any(axis=0).all()):
        raise DegenerateInputError("every row and column needs an active entry")
    if weights is None:
        w = mask.astype(np.float64)
    else:
        w = np.where(mask, np.asarray(weights, dtype=np.float64), 0.0)
        if w.shape != a.shape or np.any(w[mask] <= 0):
            raise ShapeError("weights must be positive on the active entries")
    a = np.where(mask, a, 0.0)

    if mask.all() and np.all(w == w.flat[0]):
        mu = a.mean()
        r = a.mean(axis=1) - mu / 2
        c = a.mean(axis=0) - mu / 2
        return LogBalance(r, c, _masked_residual(a, w, r, c), 1)

    rw, cw = w.sum(axis=1), w.sum(axis=0)
    r = np.zeros(a.shape[0])
    c = np.zeros(a.shape[1])
    residual = _masked_residual(a, w, r, c)
    iters = 0
    while residual > tol:
        if iters >= max_iter:
            raise ConvergenceError(
                f"balancing stalled at residual {residual:.3e} after {iters} sweeps",
                residual=residual,
                iters=iters,
            )
        r = (w * (a - c[None, :])).sum(axis=1) / rw
        c = (w * (a - r[:, None])).sum(axis=0) / cw
        iters += 1
        residual = _masked_residual(a, w, r, c)
    r, c = _equal_split(mask, r, c)
    return LogBalance(r, c, residual, iters)


def rz_canonicalize(w, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Factor ``w = diag(d) @ wp @ diag(e)`` with unit geometric-mean rows/cols.

    Signs and the zero pattern of ``w`` stay on ``wp``.  Rows or columns that
    are entirely zero get scale 1.
    """
    w = as_matrix(w)
    mask = np.abs(w) >= ZERO_THRESHOLD
    if not mask.any():
        raise DegenerateInputError("cannot canonicalize an all-zero matrix")
    rows = mask.any(axis=1)
    cols = mask.any(axis=0)
    sub = mask[np.ix_(rows, cols)]
    logs = np.zeros(sub.shape)
    logs[sub] = np.log(np.abs(w[np.ix_(rows, cols)][sub]))
    bal = balance_log(logs, sub, tol=tol, max_iter=max_iter)

    d = np.ones(w.shape[0])
    e = np.ones(w.shape[1])
    d[rows] = np.exp(bal.r)
    e[cols] = np.exp(bal.c)
    wp = w / d[:, None] / e[None, :]
    wp[~mask] = 0.0
    return ScaleDecomposition(d, wp, e, bal.residual, bal.iters)


def uc_adjoint(w):
    """Transpose of ``w`` taken in canonical coordinates: ``C(w).T``."""
    return rz_canonicalize(w).wp.T.copy()


def canonical_project(w):
    return rz_canonicalize(w).wp


def canonicalize_kernel(k, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Channel-wise canonical scaling of a ``(c_out, c_in, kh, kw)`` kernel.

    Output channels get scales ``d`` and input channels ``e``; the spatial
    axes are not scaled.  Each ``(i, j)`` channel pair contributes the mean
    log-magnitude of its nonzero taps, weighted by how many taps are nonzero,
    so every output and input channel of ``kp`` has unit geometric mean over
    its nonzero entries.  With 1x1 spatial extent this is exactly
    :func:`rz_canonicalize` of the channel matrix.
    """
    k = as_tensor4(k)
    mask = np.abs(k) >= ZERO_THRESHOLD
    counts = mask.sum(axis=(2, 3)).astype(np.float64)
    if not (counts.sum(axis=1).all() and counts.sum(axis=0).all()):
        raise DegenerateInputError("kernel has an output or input channel with no nonzero taps")
    logs = np.zeros(k.shape)
    logs[mask] = np.log(np.abs(k[mask]))
    agg = logs.sum(axis=(2, 3)) / np.maximum(counts, 1.0)
    bal = balance_log(agg, counts > 0, weights=counts, tol=tol, max_iter=max_iter)
    d = np.exp(bal.r)
    e = np.exp(bal.c)
    kp = k / d[:, None, None, None] / e[None, :, None, None]
    kp[~mask] = 0.0
    return ChannelScaleDecomposition(d, kp, e, bal.residual, bal.iters)
