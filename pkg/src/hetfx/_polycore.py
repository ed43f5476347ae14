"""Pure NumPy implementation of the weighted local-polynomial moment sums.

This is the fallback backend; ``hetfx._fastpoly`` is the compiled twin with the
same contract. Inputs are float64, ``v`` sorted ascending, and ``centers`` may
be arbitrary. For each center c and u_i = (v_i - c) / h, w_i = K(u_i) / h:

    S[g, k] = sum_i w_i * u_i**k          for k = 0 .. 2*degree
    R[g, k] = sum_i w_i * u_i**k * phi_i  for k = 0 .. degree
    cnt[g]  = #{i : w_i > 0}

Kernel ids: 0 = uniform, 1 = epanechnikov, 2 = gaussian.
"""
from __future__ import annotations

import numpy as np

_SQRT_2PI = float(np.sqrt(2.0 * np.pi))

# Cap on the number of elements held in a (block x n) temporary.
_BLOCK_ELEMENTS = 8_000_000


def _kernel_values(kernel_id: int, u: np.ndarray) -> np.ndarray:
    if kernel_id == 0:
        return np.where(np.abs(u) <= 1.0, 0.5, 0.0)
    if kernel_id == 1:
        return np.maximum(0.75 * (1.0 - u * u), 0.0)
    if kernel_id == 2:
        return np.exp(-0.5 * u * u) / _SQRT_2PI
    raise ValueError(f"unknown kernel id {kernel_id}")


def moment_sums(v, phi, centers, h, degree, kernel_id):
    """Return (S, R, cnt) for every center; see the module docstring."""
    n = v.shape[0]
    m = centers.shape[0]
    n_s = 2 * degree + 1
    S = np.zeros((m, n_s))
    R = np.zeros((m, degree + 1))
    cnt = np.zeros(m, dtype=np.int64)
    if n == 0 or m == 0:
        return S, R, cnt

    block = max(1, min(m, _BLOCK_ELEMENTS // max(n, 1)))
    for s in range(0, m, block):
        c = centers[s : s + block]
        U = (v[None, :] - c[:, None]) / h
        W = _kernel_values(kernel_id, U)
        cnt[s : s + block] = np.count_nonzero(W > 0.0, axis=1)
        W /= h
        S[s : s + block, 0] = W.sum(axis=1)
        R[s : s + block, 0] = W @ phi
        for k in range(1, n_s):
            W *= U
            S[s : s + block, k] = W.sum(axis=1)
            if k <= degree:
                R[s : s + block, k] = W @ phi
    return S, R, cnt
