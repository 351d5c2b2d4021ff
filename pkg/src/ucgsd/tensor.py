"""Dense float64 matrix / 4-axis kernel helpers and the plain-text formats.

Matrices are 2-D ``numpy.ndarray`` objects of dtype float64, diagonal scales
are 1-D arrays, and conv kernels are 4-D arrays laid out as
``(c_out, c_in, kh, kw)``.  Nothing here broadcasts implicitly: every
operation checks the shapes it was given.
"""

import numpy as np

from .errors import ShapeError, NumericError

__all__ = [
    "as_matrix",
    "as_diag",
    "as_tensor4",
    "matmul",
    "scale_rows",
    "scale_cols",
    "transpose",
    "format_matrix",
    "parse_matrix",
    "read_matrix",
    "write_matrix",
    "format_tensor4",
    "parse_tensor4",
]


def _finite(a, what):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{what} contains NaN or Inf")
    return a


def as_matrix(w):
    a = np.asarray(w, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return _finite(a, "matrix")


def as_diag(d):
    a = np.asarray(d, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"expected a 1-D scale vector, got shape {a.shape}")
    return _finite(a, "scale vector")


def as_tensor4(k):
    a = np.asarray(k, dtype=np.float64)
    if a.ndim != 4:
        raise ShapeError(f"expected a (c_out, c_in, kh, kw) kernel, got shape {a.shape}")
    return _finite(a, "kernel")


def matmul(a, b):
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def scale_rows(w, d):
    """Return ``diag(d) @ w`` without forming the diagonal matrix."""
    w, d = as_matrix(w), as_diag(d)
    if d.shape[0] != w.shape[0]:
        raise ShapeError(f"{d.shape[0]} row scales for a matrix with {w.shape[0]} rows")
    return d[:, None] * w


def scale_cols(w, e):
    """Return ``w @ diag(e)`` without forming the diagonal matrix."""
    w, e = as_matrix(w), as_diag(e)
    if e.shape[0] != w.shape[1]:
        raise ShapeError(f"{e.shape[0]} column scales for a matrix with {w.shape[1]} columns")
    return w * e[None, :]


def transpose(w):
    return as_matrix(w).T.copy()


# -- text formats -----------------------------------------------------------
#
# Matrix:  "rows cols" then one whitespace-separated row per line.
# Tensor4: "c_out c_in kh kw" then c_out*c_in*kh lines of kw values.
# Floats are written with 17 significant digits so files round-trip exactly.

def _fmt(x):
    return "%.17g" % x


def format_matrix(w):
    w = as_matrix(w)
    lines = [f"{w.shape[0]} {w.shape[1]}"]
    lines.extend(" ".join(_fmt(x) for x in row) for row in w)
    return "\n".join(lines) + "\n"


def _tokens(text):
    rows = [ln.split() for ln in text.splitlines()]
    return [r for r in rows if r and not r[0].startswith("#")]


def _floats(tokens, what):
    try:
        vals = np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as exc:
        raise ShapeError(f"malformed {what}: {exc}") from None
    return _finite(vals, what)


def _header(row, n, what):
    if len(row) != n:
        raise ShapeError(f"malformed {what} header: {' '.join(row)!r}")
    try:
        dims = [int(t) for t in row]
    except ValueError:
        raise ShapeError(f"malformed {what} header: {' '.join(row)!r}") from None
    if any(x < 0 for x in dims):
        raise ShapeError(f"negative dimension in {what} header")
    return dims


def parse_matrix(text):
    rows = _tokens(text)
    if not rows:
        raise ShapeError("empty matrix text")
    m, n = _header(rows[0], 2, "matrix")
    body = rows[1:]
    if len(body) != m or any(len(r) != n for r in body):
        raise ShapeError(f"matrix body does not match header {m}x{n}")
    flat = _floats([t for r in body for t in r], "matrix")
    return flat.reshape(m, n)


def read_matrix(path):
    with open(path) as fh:
        return parse_matrix(fh.read())


def write_matrix(path, w):
    with open(path, "w") as fh:
        fh.write(format_matrix(w))


def format_tensor4(k):
    k = as_tensor4(k)
    lines = [" ".join(str(s) for s in k.shape)]
    for row in k.reshape(-1, k.shape[3]):
        lines.append(" ".join(_fmt(x) for x in row))
    return "\n".join(lines) + "\n"


def parse_tensor4(text):
    rows = _tokens(text)
    if not rows:
        raise ShapeError("empty kernel text")
    co, ci, kh, kw = _header(rows[0], 4, "kernel")
    body = rows[1:]
    if len(body) != co * ci * kh or any(len(r) != kw for r in body):
        raise ShapeError(f"kernel body does not match header {co}x{ci}x{kh}x{kw}")
    flat = _floats([t for r in body for t in r], "kernel")
    return flat.reshape(co, ci, kh, kw)
