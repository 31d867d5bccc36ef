"""Hot assembly kernels with a numba path and a pure-numpy fallback.

Set ``FRACCONTROL_DISABLE_NUMBA=1`` to force the numpy path.  Both paths are
always importable (``*_numpy`` / ``*_numba``) so they can be compared.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

DISABLE_NUMBA = os.environ.get("FRACCONTROL_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")
USE_NUMBA = numba is not None and not DISABLE_NUMBA


def gauss_legendre_unit(nq: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(nq)
    return 0.5 * (x + 1.0), 0.5 * w


# --------------------------------------------------------------------------
# dense block-Toeplitz fill: A[p, q] = coef[|px - qx|, |py - qy|]
# --------------------------------------------------------------------------


def fill_block_toeplitz_numpy(coef: np.ndarray, n: int) -> np.ndarray:
    i = np.arange(n)
    D = np.abs(i[:, None] - i[None, :])
    # (p, q) with p = px * n + py
    A = coef[D[:, None, :, None], D[None, :, None, :]]
    return A.reshape(n * n, n * n)


def _fill_block_toeplitz_py(coef, n):
    N = n * n
    A = np.empty((N, N))
    for px in range(n):
        for py in range(n):
            p = px * n + py
            for qx in range(n):
                dx = abs(px - qx)
                for qy in range(n):
                    A[p, qx * n + qy] = coef[dx, abs(py - qy)]
    return A


# --------------------------------------------------------------------------
# far-field hat integrals for the 2D operator
#
# Omega[p, q] = int_{R^2 \ [-1,1]^2} hat_{p,q}(z) |z|^{-2s} dz  (unit spacing,
# bilinear hats), for 0 <= p, q <= K.  Only first-quadrant cells are
# integrated; symmetric copies are restored by doubling on the axes.
# --------------------------------------------------------------------------


def hat_integrals_2d_numpy(K: int, s: float, nq: int = 6) -> np.ndarray:
    g, w = gauss_legendre_unit(nq)
    gx, gy = np.meshgrid(g, g, indexing="ij")
    W2 = np.outer(w, w)
    a = np.arange(K)
    A, B = np.meshgrid(a, a, indexing="ij")
    # kernel values per cell per quadrature point: shape (K, K, nq, nq)
    X = A[:, :, None, None] + gx
    Y = B[:, :, None, None] + gy
    ker = (X * X + Y * Y) ** (-s) * W2
    ker[0, 0] = 0.0  # cell [0,1]^2 lies inside the near-field square
    basis = {
        (0, 0): (1 - gx) * (1 - gy),
        (1, 0): gx * (1 - gy),
        (0, 1): (1 - gx) * gy,
        (1, 1): gx * gy,
    }
    Om = np.zeros((K + 1, K + 1))
    for (dx, dy), phi in basis.items():
        Om[dx : dx + K, dy : dy + K] += np.sum(ker * phi, axis=(2, 3))
    Om[0, :] *= 2.0
    Om[:, 0] *= 2.0
    return Om


def _hat_integrals_2d_py(K, s, g, w):
    nq = g.shape[0]
    Om = np.zeros((K + 1, K + 1))
    for a in range(K):
        for b in range(K):
            if a == 0 and b == 0:
                continue
            c00 = 0.0
            c10 = 0.0
            c01 = 0.0
            c11 = 0.0
            for i in range(nq):
                x = a + g[i]
                for j in range(nq):
                    y = b + g[j]
                    k = w[i] * w[j] * (x * x + y * y) ** (-s)
                    c00 += k * (1.0 - g[i]) * (1.0 - g[j])
                    c10 += k * g[i] * (1.0 - g[j])
                    c01 += k * (1.0 - g[i]) * g[j]
                    c11 += k * g[i] * g[j]
            Om[a, b] += c00
            Om[a + 1, b] += c10
            Om[a, b + 1] += c01
            Om[a + 1, b + 1] += c11
    for q in range(K + 1):
        Om[0, q] *= 2.0
    for p in range(K + 1):
        Om[p, 0] *= 2.0
    return Om


if numba is not None:
    _fill_block_toeplitz_jit = numba.njit(cache=True)(_fill_block_toeplitz_py)
    _hat_integrals_2d_jit = numba.njit(cache=True)(_hat_integrals_2d_py)

    def fill_block_toeplitz_numba(coef: np.ndarray, n: int) -> np.ndarray:
        return _fill_block_toeplitz_jit(np.ascontiguousarray(coef, dtype=np.float64), int(n))

    def hat_integrals_2d_numba(K: int, s: float, nq: int = 6) -> np.ndarray:
        g, w = gauss_legendre_unit(nq)
        return _hat_integrals_2d_jit(int(K), float(s), g, w)

else:  # pragma: no cover
    fill_block_toeplitz_numba = fill_block_toeplitz_numpy
    hat_integrals_2d_numba = hat_integrals_2d_numpy


if USE_NUMBA:
    fill_block_toeplitz = fill_block_toeplitz_numba
    hat_integrals_2d = hat_integrals_2d_numba
else:
    fill_block_toeplitz = fill_block_toeplitz_numpy
    hat_integrals_2d = hat_integrals_2d_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
