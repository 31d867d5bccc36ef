"""Dense realizations of the restricted fractional Laplacian on a lattice.

The operator acts on lattice functions extended by zero outside the box and
is assembled from the singular integral

    (-Lap)^s u(x) = c_{d,s} p.v. int (u(x) - u(y)) / |x - y|^{d + 2s} dy.

Quadrature: on the cell around the origin the difference ``u(x) - u(x+z)`` is
replaced by its quadratic Taylor model (odd terms cancel), which couples only
to nearest neighbours through a second difference.  Away from the origin the
ratio ``(u(x) - u(x+z)) / |z|^2`` is interpolated (piecewise linear in 1D,
bilinear in 2D) and integrated exactly against ``|z|^{2 - d - 2s}``.  Offsets
that leave the box see ``u = 0``, so their weight lands on the diagonal; the
diagonal is therefore the same for every node and the matrix is
(block-)Toeplitz.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.linalg import eigh, toeplitz
from scipy.special import gamma

from . import _kernels
from .lattice import Grid, RegionPartition, build_grid

__all__ = [
    "FracOperator",
    "DirichletSpectrum",
    "normalization_constant",
    "assemble",
    "apply",
    "dirichlet_spectrum",
    "fft_reference_apply",
    "gaussian_reference",
    "dump_operator",
    "load_operator",
]

# far-field sums beyond the box are carried out to this many cells before the
# analytic remainder takes over
_TAIL_CELLS_1D = 200_000
_TAIL_CELLS_2D = 512


def normalization_constant(d: int, s: float) -> float:
    """``c_{d,s}`` such that the full-space symbol is ``|xi|^{2s}``."""
    return float(s * 4.0**s * gamma(0.5 * d + s) / (np.pi ** (0.5 * d) * gamma(1.0 - s)))


@dataclass(frozen=True, eq=False)
class FracOperator:
    grid: Grid
    s: float
    matrix: np.ndarray
    c_ns: float
    tail: np.ndarray

    def __post_init__(self):
        self.matrix.setflags(write=False)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return apply(self, values)

    def block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return self.matrix[np.ix_(rows, cols)]


def _check_order(s: float) -> float:
    s = float(s)
    if not 0.0 < s < 1.0:
        raise ValueError(f"fractional order s must lie in (0, 1), got {s}")
    return s


def _hat_moments_1d(k: np.ndarray, p: float) -> np.ndarray:
    """``int hat_k(z) z^p dz`` over ``[max(k-1, 1), k+1]`` for unit spacing."""

    def seg(a, b, c, sign):
        # int_a^b sign * (z - c) z^p dz
        i1 = (b ** (p + 2) - a ** (p + 2)) / (p + 2)
        i0 = (b ** (p + 1) - a ** (p + 1)) / (p + 1)
        return sign * (i1 - c * i0)

    right = seg(k, k + 1.0, k + 1.0, -1.0)
    left = np.where(k > 1, seg(np.maximum(k - 1.0, 1.0), k, k - 1.0, 1.0), 0.0)
    return left + right


def _stencil_1d(s: float, count: int) -> tuple[np.ndarray, float]:
    """Unit-spacing coupling weights ``w_k`` (k >= 1) and the diagonal."""
    K = max(count, _TAIL_CELLS_1D)
    k = np.arange(1, K + 1, dtype=float)
    W = _hat_moments_1d(k, 1.0 - 2.0 * s) / k**2
    near = 1.0 / (2.0 - 2.0 * s)
    far = W.sum() + (K + 0.5) ** (-2.0 * s) / (2.0 * s)
    w = W[:count].copy()
    w[0] += near
    diag = 2.0 * (far + near)
    return w, diag


def _square_exterior_integral(a: float, s: float) -> float:
    """``int_{R^2 \\ [-a, a]^2} |z|^{-2-2s} dz``."""
    ang, _ = integrate.quad(lambda t: np.cos(t) ** (2.0 * s), 0.0, np.pi / 4)
    return 8.0 * a ** (-2.0 * s) / (2.0 * s) * ang


def _square_interior_integral(a: float, s: float) -> float:
    """``int_{[-a, a]^2} |z|^{-2s} dz``."""
    ang, _ = integrate.quad(lambda t: np.cos(t) ** (2.0 * s - 2.0), 0.0, np.pi / 4)
    return 8.0 * a ** (2.0 - 2.0 * s) / (2.0 - 2.0 * s) * ang


def _stencil_2d(s: float, n: int) -> tuple[np.ndarray, float]:
    K = max(2 * n, _TAIL_CELLS_2D)
    Om = _kernels.hat_integrals_2d(K, s)
    p = np.arange(K + 1, dtype=float)
    r2 = p[:, None] ** 2 + p[None, :] ** 2
    r2[0, 0] = 1.0
    coef = Om / r2
    coef[0, 0] = 0.0
    # the outermost ring of nodes only received contributions from inside
    inner = coef[:K, :K]
    near = _square_interior_integral(1.0, s)
    far = 4.0 * inner[1:, 1:].sum() + 2.0 * inner[0, 1:].sum() + 2.0 * inner[1:, 0].sum()
    far += _square_exterior_integral(K - 0.5, s)
    w = inner[:n, :n].copy()
    w[1, 0] += 0.25 * near
    w[0, 1] += 0.25 * near
    diag = near + far
    return w, diag


def assemble(grid: Grid, s: float) -> FracOperator:
    s = _check_order(s)
    c = normalization_constant(grid.dim, s)
    h = grid.spacing
    scale = c * h ** (-2.0 * s)
    if grid.dim == 1:
        w, diag = _stencil_1d(s, grid.n - 1)
        row = np.concatenate([[diag], -w])
        A = scale * toeplitz(row)
    else:
        w, diag = _stencil_2d(s, grid.n)
        coef = -w
        coef[0, 0] = diag
        A = scale * _kernels.fill_block_toeplitz(coef, grid.n)
    # A u_i = sum_j c w_ij (u_i - u_j) + tail_i u_i, so the tail is the row sum
    tail = A.sum(axis=1)
    return FracOperator(grid=grid, s=s, matrix=A, c_ns=c, tail=tail)


def apply(op: FracOperator, values: np.ndarray) -> np.ndarray:
    """Apply the operator to one field or to each row of a stack of fields."""
    values = np.asarray(values, dtype=float)
    N = op.grid.num_nodes
    if values.shape[-1] != N:
        raise ValueError(f"field has {values.shape[-1]} nodes, operator grid has {N}")
    return values @ op.matrix


def analytic_tail_1d(grid: Grid, s: float) -> np.ndarray:
    """``c * int_{|z| > d(x) + h/2} |z|^{-1-2s} dz`` with ``d`` the distance to each box edge."""
    x = grid.axis
    h = grid.spacing
    c = normalization_constant(1, s)
    dL = grid.half_width + x + 0.5 * h
    dR = grid.half_width - x + 0.5 * h
    return c * (dL ** (-2 * s) + dR ** (-2 * s)) / (2 * s)


@dataclass(frozen=True, eq=False)
class DirichletSpectrum:
    """Eigenpairs of the interior block; vectors are orthonormal in ``h^d``-weighted L2(B)."""

    eigenvalues: np.ndarray
    vectors: np.ndarray  # (num_interior, K)
    partition: RegionPartition

    @property
    def count(self) -> int:
        return len(self.eigenvalues)

    def full(self, k: int) -> np.ndarray:
        """Mode ``k`` (0-based) embedded in the full lattice."""
        out = np.zeros(self.partition.grid.num_nodes)
        out[self.partition.interior] = self.vectors[:, k]
        return out

    @cached_property
    def weight(self) -> float:
        return self.partition.grid.cell_volume


def dirichlet_spectrum(op: FracOperator, part: RegionPartition, K: int | None = None) -> DirichletSpectrum:
    idx = part.interior_index
    nI = len(idx)
    if K is None:
        K = nI
    if not 1 <= K <= nI:
        raise ValueError(f"requested {K} eigenpairs, interior has {nI} nodes")
    A_II = op.block(idx, idx)
    try:
        lam, V = eigh(A_II, subset_by_index=(0, K - 1))
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise RuntimeError(f"eigensolver failed: {exc}") from exc
    V = V / np.sqrt(op.grid.cell_volume)
    # fix signs so that each mode has a positive sum
    sgn = np.sign(V.sum(axis=0))
    sgn[sgn == 0] = 1.0
    V = V * sgn
    return DirichletSpectrum(eigenvalues=lam, vectors=V, partition=part)


def fft_reference_apply(values: np.ndarray, s: float, spacing: float, pad: int = 4, support_tol: float = 1e-10) -> np.ndarray:
    """Full-space ``(-Lap)^s`` by the FFT multiplier ``|xi|^{2s}`` on a padded periodic box.

    ``values`` is a 1D array or a square 2D array sampled with ``spacing``; the
    periodic box is at least ``pad`` times wider than the sampled window.
    """
    s = _check_order(s)
    u = np.asarray(values, dtype=float)
    if u.ndim not in (1, 2):
        raise ValueError("fft_reference_apply expects a 1D or 2D array")
    scale = np.abs(u).max()
    if scale > 0:
        edge = max(np.abs(np.take(u, [0, -1], axis=a)).max() for a in range(u.ndim))
        if edge > support_tol * scale:
            raise ValueError("field support touches the window boundary; enlarge the window")
    n = u.shape[0]
    P = int(2 ** np.ceil(np.log2(pad * n)))
    lo = (P - n) // 2
    big = np.zeros((P,) * u.ndim)
    big[tuple(slice(lo, lo + n) for _ in range(u.ndim))] = u
    xi = 2.0 * np.pi * np.fft.fftfreq(P, d=spacing)
    if u.ndim == 1:
        sym = np.abs(xi) ** (2.0 * s)
    else:
        sym = (xi[:, None] ** 2 + xi[None, :] ** 2) ** s
    out = np.real(np.fft.ifftn(sym * np.fft.fftn(big)))
    return out[tuple(slice(lo, lo + n) for _ in range(u.ndim))]


def gaussian_reference(r: np.ndarray, s: float, d: int = 1) -> np.ndarray:
    """Closed form of ``(-Lap)^s exp(-|x|^2)`` in dimension ``d``."""
    from scipy.special import hyp1f1

    return 4.0**s * gamma(0.5 * d + s) / gamma(0.5 * d) * hyp1f1(0.5 * d + s, 0.5 * d, -np.asarray(r) ** 2)


def dump_operator(op: FracOperator, path) -> tuple[Path, Path]:
    """Write ``<path>.npy`` with the matrix and ``<path>.json`` with its parameters."""
    path = Path(path)
    mat = path.with_suffix(".npy")
    meta = path.with_suffix(".json")
    np.save(mat, np.asarray(op.matrix))
    info = {
        "d": op.grid.dim,
        "L": op.grid.half_width,
        "n": op.grid.n,
        "s": op.s,
        "c_ns": op.c_ns,
        "backend": _kernels.backend(),
    }
    meta.write_text(json.dumps(info, sort_keys=True, indent=2) + "\n")
    return mat, meta


def load_operator(path) -> FracOperator:
    path = Path(path)
    info = json.loads(path.with_suffix(".json").read_text())
    grid = build_grid(info["d"], info["L"], info["n"])
    A = np.load(path.with_suffix(".npy"))
    if A.shape != (grid.num_nodes, grid.num_nodes):
        raise ValueError(f"matrix shape {A.shape} inconsistent with sidecar {info}")
    tail = A.sum(axis=1)
    return FracOperator(grid=grid, s=float(info["s"]), matrix=A, c_ns=float(info["c_ns"]), tail=tail)
