"""Canonical diagonal scaling of a single matrix.

A matrix W and any rescaling D W E (D, E positive diagonal) share one
canonical representative W'.  We decompose a matrix, rescale it wildly, and
check that the representative, and the transpose taken in canonical
coordinates, do not move.
"""

import numpy as np

from ucgsd import rz_canonicalize, uc_adjoint

rng = np.random.default_rng(0)
w = rng.normal(size=(4, 3))

dec = rz_canonicalize(w)
print("row scales d :", np.round(dec.d, 4))
print("col scales e :", np.round(dec.e, 4))
print("W' =\n", np.round(dec.wp, 4))
print("log|W'| row sums:", np.round(np.log(np.abs(dec.wp)).sum(axis=1), 12))
print("log|W'| col sums:", np.round(np.log(np.abs(dec.wp)).sum(axis=0), 12))

# Rescale rows and columns by factors up to e^6 either way.
s = np.exp(rng.uniform(-6, 6, 4))
t = np.exp(rng.uniform(-6, 6, 3))
w_scaled = s[:, None] * w * t[None, :]
print("\nentry magnitudes after rescaling span", f"{np.abs(w_scaled).min():.1e}", "to", f"{np.abs(w_scaled).max():.1e}")

dev = np.linalg.norm(rz_canonicalize(w_scaled).wp - dec.wp) / np.linalg.norm(dec.wp)
print(f"canonical form moved by {dev:.1e} (relative)")

# The ordinary transpose follows the rescaling; the UC adjoint does not.
print(f"plain transpose moved by {np.linalg.norm(w_scaled.T - w.T) / np.linalg.norm(w):.1e}")
adj_dev = np.linalg.norm(uc_adjoint(w_scaled) - uc_adjoint(w)) / np.linalg.norm(uc_adjoint(w))
print(f"UC adjoint moved by     {adj_dev:.1e}")
