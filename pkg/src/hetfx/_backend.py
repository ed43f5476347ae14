"""Backend selection for the local-polynomial moment kernels.

At import time the compiled extension is preferred; set HETFX_BACKEND=py to
force the pure NumPy path (or HETFX_BACKEND=c to require the extension).
Both implementations satisfy the contract documented in hetfx._polycore.
"""
from __future__ import annotations

import os

import numpy as np

from . import _polycore

KERNEL_IDS = {"uniform": 0, "epanechnikov": 1, "gaussian": 2}
KERNEL_AT_ZERO = {"uniform": 0.5, "epanechnikov": 0.75, "gaussian": 1.0 / float(np.sqrt(2.0 * np.pi))}

# c2 = integral of u^2 K(u) du
KERNEL_C2 = {"uniform": 1.0 / 3.0, "epanechnikov": 0.2, "gaussian": 1.0}

_requested = os.environ.get("HETFX_BACKEND", "").strip().lower()
_fast = None
if _requested in ("", "c", "compiled", "ext"):
    try:
        from . import _fastpoly as _fast  # type: ignore[no-redef]
    except ImportError:
        _fast = None
        if _requested:
            raise

BACKEND = "compiled" if _fast is not None else "python"


def _as_c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def moment_sums(v, phi, centers, h, degree, kernel):
    """Weighted moment sums S, R and support counts at each center.

    ``v`` must be sorted ascending with ``phi`` aligned to it. ``kernel`` is a
    name from KERNEL_IDS. Returns (S, R, cnt) with S of shape (m, 2*degree+1),
    R of shape (m, degree+1) and cnt the number of positive-weight points.
    """
    v = _as_c(v)
    phi = _as_c(phi)
    centers = _as_c(centers)
    kid = KERNEL_IDS[kernel]
    if _fast is None:
        return _polycore.moment_sums(v, phi, centers, float(h), int(degree), kid)

    n = v.shape[0]
    if kid == 2:
        lo = np.zeros(centers.shape[0], dtype=np.int64)
        hi = np.full(centers.shape[0], n, dtype=np.int64)
    else:
        # Pad the window so boundary points whose |u| rounds to exactly 1.0
        # are never excluded; each point is re-tested exactly inside the loop.
        pad = 4.0 * np.spacing(np.abs(centers) + h)
        lo = np.searchsorted(v, centers - h - pad, side="left").astype(np.int64)
        hi = np.searchsorted(v, centers + h + pad, side="right").astype(np.int64)
    return _fast.moment_sums_windowed(v, phi, centers, float(h), int(degree), kid, lo, hi)
