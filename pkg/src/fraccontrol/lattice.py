"""Spatial and temporal lattices, region partitions, cutoffs and discrete norms.

Fields live on a uniform tensor grid covering the box ``[-L, L]^d`` and are
extended by zero outside of it.  Space-time fields are stored as arrays of
shape ``(m + 1, num_nodes)``: one row per time level.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Grid",
    "TimeGrid",
    "RegionPartition",
    "Cutoff",
    "SpaceTimeField",
    "build_grid",
    "partition",
    "make_cutoff",
    "norm_l2",
    "norm_h1",
    "norm_h2",
    "time_weights",
]


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform lattice on ``[-half_width, half_width]^dim`` with ``n`` points per axis."""

    dim: int
    half_width: float
    n: int

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / (self.n - 1)

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @cached_property
    def axis(self) -> np.ndarray:
        ax = np.linspace(-self.half_width, self.half_width, self.n)
        ax[self.n // 2] = 0.0
        return ax

    @cached_property
    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(num_nodes, dim)``; 2D nodes use ``ij`` ordering."""
        if self.dim == 1:
            return self.axis[:, None].copy()
        X, Y = np.meshgrid(self.axis, self.axis, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    @property
    def num_nodes(self) -> int:
        return self.n**self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim


def build_grid(dim: int, L: float, n: int) -> Grid:
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    if n % 2 == 0:
        raise ValueError(f"points per axis must be odd so that x=0 is a node, got n={n}")
    if n < 17:
        raise ValueError(f"points per axis must be at least 17, got n={n}")
    if not L > 1.0:
        raise ValueError(f"half width L must exceed 1 (box must contain the unit ball), got L={L}")
    return Grid(dim=int(dim), half_width=float(L), n=int(n))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of ``m`` steps on ``[-1, 1]``."""

    m: int
    t0: float = -1.0
    t1: float = 1.0

    def __post_init__(self):
        if self.m < 2:
            raise ValueError(f"need at least 2 time steps, got m={self.m}")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.m

    @property
    def levels(self) -> np.ndarray:
        return np.linspace(self.t0, self.t1, self.m + 1)

    @property
    def weights(self) -> np.ndarray:
        return time_weights(self.m + 1, self.dt)


def time_weights(num_levels: int, dt: float) -> np.ndarray:
    """Composite trapezoid weights for ``num_levels`` equispaced levels."""
    w = np.full(num_levels, dt)
    w[0] = w[-1] = 0.5 * dt
    if num_levels == 1:
        w[0] = 0.0
    return w


def _as_boxes(W_spec, dim: int) -> list[np.ndarray]:
    boxes = []
    for comp in W_spec:
        b = np.asarray(comp, dtype=float)
        if dim == 1:
            b = b.reshape(1, 2)
        if b.shape != (dim, 2):
            raise ValueError(f"region component {comp!r} does not describe a {dim}D box")
        if np.any(b[:, 1] <= b[:, 0]):
            raise ValueError(f"region component {comp!r} has non-positive width")
        boxes.append(b)
    if not boxes:
        raise ValueError("control region W is empty")
    return boxes


def _box_distance_to_ball(box: np.ndarray) -> float:
    nearest = np.clip(0.0, box[:, 0], box[:, 1])
    return float(np.linalg.norm(nearest)) - 1.0


@dataclass(frozen=True, eq=False)
class RegionPartition:
    """Disjoint node masks: interior ``B``, control region ``W`` and the zero set."""

    grid: Grid
    components: tuple[np.ndarray, ...]
    interior: np.ndarray
    control: np.ndarray
    zero: np.ndarray
    component_masks: tuple[np.ndarray, ...] = field(repr=False)

    @cached_property
    def interior_index(self) -> np.ndarray:
        return np.flatnonzero(self.interior)

    @cached_property
    def control_index(self) -> np.ndarray:
        return np.flatnonzero(self.control)

    @property
    def num_interior(self) -> int:
        return int(self.interior.sum())

    @property
    def num_control(self) -> int:
        return int(self.control.sum())

    @property
    def W_spec(self) -> list[list[float]]:
        if self.grid.dim == 1:
            return [b[0].tolist() for b in self.components]
        return [b.tolist() for b in self.components]


def partition(grid: Grid, W_spec: Sequence) -> RegionPartition:
    """Split the lattice into interior, control and zero masks.

    ``W_spec`` lists closed intervals ``(a, b)`` in 1D or boxes
    ``((a1, b1), (a2, b2))`` in 2D.  Membership is decided at node centres and
    boundary ties go to the zero mask.
    """
    boxes = _as_boxes(W_spec, grid.dim)
    h = grid.spacing
    L = grid.half_width
    X = grid.nodes
    for b in boxes:
        if np.any(b[:, 0] <= -L) or np.any(b[:, 1] >= L):
            raise ValueError(f"W component {b.tolist()} is not inside the open box (-{L}, {L})")
        gap = _box_distance_to_ball(b)
        if gap < 2.0 * h - 1e-12:
            raise ValueError(
                f"W component {b.tolist()} overlaps the closed unit ball or lies closer than 2*hx={2 * h:g} to it"
            )
    r = np.linalg.norm(X, axis=1)
    interior = r < 1.0 - 1e-12
    comp_masks = []
    for b in boxes:
        inside = np.all((X > b[:, 0] + 1e-12) & (X < b[:, 1] - 1e-12), axis=1)
        if not inside.any():
            raise ValueError(f"W component {b.tolist()} contains no lattice nodes")
        comp_masks.append(inside)
    control = np.logical_or.reduce(comp_masks)
    if (control & interior).any():
        raise ValueError("control region intersects the interior")
    zero = ~(interior | control)
    for arr in (interior, control, zero):
        arr.setflags(write=False)
    return RegionPartition(
        grid=grid,
        components=tuple(boxes),
        interior=interior,
        control=control,
        zero=zero,
        component_masks=tuple(comp_masks),
    )


_PROFILES = {
    # C^2 quintic smoothstep
    "quintic": lambda t: t**3 * (10.0 - 15.0 * t + 6.0 * t**2),
    # C^1 cubic smoothstep
    "cubic": lambda t: t**2 * (3.0 - 2.0 * t),
}


@dataclass(frozen=True, eq=False)
class Cutoff:
    values: np.ndarray
    partition: RegionPartition
    half_region: np.ndarray = field(repr=False)

    @property
    def on_control(self) -> np.ndarray:
        return self.values[self.partition.control]


def make_cutoff(part: RegionPartition, profile: str = "quintic") -> Cutoff:
    """Smooth bump per W component: 0 off W, 1 on W/2, polynomial ramp between.

    For a box with half widths ``hw_i`` the distance to its boundary peaks at
    ``r = min(hw_i)``, so W/2 is ``|x_i - c_i| < hw_i - r/2`` on every axis.
    """
    try:
        ramp = _PROFILES[profile]
    except KeyError:
        raise ValueError(f"unknown cutoff profile {profile!r}; choose from {sorted(_PROFILES)}") from None
    grid = part.grid
    h = grid.spacing
    X = grid.nodes
    eta = np.zeros(grid.num_nodes)
    half = np.zeros(grid.num_nodes, dtype=bool)
    for b, mask in zip(part.components, part.component_masks):
        c = b.mean(axis=1)
        hw = 0.5 * (b[:, 1] - b[:, 0])
        r = hw.min()
        if 2.0 * r < 2.0 * h:
            raise ValueError(f"W component {b.tolist()} is thinner than 2*hx and cannot resolve the cutoff ramp")
        t = (hw - np.abs(X - c)) / (0.5 * r)
        val = np.prod(ramp(np.clip(t, 0.0, 1.0)), axis=1)
        inner = np.all(t > 1.0, axis=1)
        val[inner] = 1.0
        eta = np.where(mask, val, eta)
        half |= inner & mask
    eta[~part.control] = 0.0
    eta.setflags(write=False)
    return Cutoff(values=eta, partition=part, half_region=half)


@dataclass(eq=False)
class SpaceTimeField:
    """Lattice field at each time level; ``values`` has shape ``(m + 1, num_nodes)``."""

    values: np.ndarray
    grid: Grid
    time: TimeGrid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.time.m + 1, self.grid.num_nodes)
        if self.values.shape != expected:
            raise ValueError(f"field shape {self.values.shape} does not match grid/time {expected}")

    @classmethod
    def zeros(cls, grid: Grid, time: TimeGrid) -> "SpaceTimeField":
        return cls(np.zeros((time.m + 1, grid.num_nodes)), grid, time)

    @classmethod
    def from_mask_values(cls, grid: Grid, time: TimeGrid, mask: np.ndarray, vals: np.ndarray) -> "SpaceTimeField":
        out = np.zeros((time.m + 1, grid.num_nodes))
        out[:, mask] = vals
        return cls(out, grid, time)

    def restrict(self, mask: np.ndarray) -> np.ndarray:
        return self.values[:, mask]

    def coordinate_labels(self) -> list[str]:
        return [":".join(f"{c:.17g}" for c in node) for node in self.grid.nodes]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + self.coordinate_labels())
            for t, row in zip(self.time.levels, self.values):
                w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path, grid: Grid, time: TimeGrid) -> "SpaceTimeField":
        with open(Path(path), newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if len(header) != grid.num_nodes + 1:
            raise ValueError(f"{path}: header has {len(header) - 1} nodes, grid has {grid.num_nodes}")
        coords = np.array([[float(c) for c in lab.split(":")] for lab in header[1:]])
        if not np.allclose(coords, grid.nodes, atol=1e-9 * grid.half_width):
            raise ValueError(f"{path}: node coordinates do not match the grid")
        vals = np.array([[float(v) for v in r[1:]] for r in body])
        return cls(vals, grid, time)


def _check_mask(mask: np.ndarray, grid: Grid) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (grid.num_nodes,):
        raise ValueError(f"mask shape {mask.shape} does not match grid ({grid.num_nodes} nodes)")
    if not mask.any():
        raise ValueError("empty mask")
    return mask


def _levels(field: SpaceTimeField, time_range) -> tuple[slice, np.ndarray]:
    if time_range is None:
        k0, k1 = 0, field.time.m
    else:
        k0, k1 = time_range
        if not 0 <= k0 < k1 <= field.time.m:
            raise ValueError(f"invalid time level range {time_range}")
    return slice(k0, k1 + 1), time_weights(k1 - k0 + 1, field.time.dt)


def norm_l2(field: SpaceTimeField, mask, time_range=None) -> float:
    """Space-time L2 norm over ``mask`` with trapezoid weights in time."""
    mask = _check_mask(mask, field.grid)
    sl, w = _levels(field, time_range)
    vals = field.values[sl][:, mask]
    return float(np.sqrt(field.grid.cell_volume * np.dot(w, np.sum(vals**2, axis=1))))


def _mask_diff(U: np.ndarray, M: np.ndarray, h: float, axis: int) -> np.ndarray:
    """First difference along ``axis`` restricted to the mask ``M``.

    Centred where both neighbours lie in the mask, one-sided where one does,
    zero where neither does.
    """
    Up = np.roll(U, -1, axis=axis)
    Um = np.roll(U, 1, axis=axis)
    Mp = np.roll(M, -1, axis=axis)
    Mm = np.roll(M, 1, axis=axis)
    n = M.shape[axis]
    idx = np.arange(n)
    shape = [1] * M.ndim
    shape[axis] = n
    idx = idx.reshape(shape)
    Mp = Mp & (idx < n - 1)
    Mm = Mm & (idx > 0)
    both = Mp & Mm
    D = np.zeros_like(U)
    D = np.where(both, (Up - Um) / (2 * h), D)
    D = np.where(Mp & ~Mm, (Up - U) / h, D)
    D = np.where(Mm & ~Mp, (U - Um) / h, D)
    return np.where(M, D, 0.0)


def _time_diff(V: np.ndarray, dt: float) -> np.ndarray:
    return np.gradient(V, dt, axis=0, edge_order=1)


def _space_derivs(V: np.ndarray, field: SpaceTimeField, mask: np.ndarray) -> list[np.ndarray]:
    grid = field.grid
    M = mask.reshape(grid.shape)
    out = []
    for ax in range(grid.dim):
        U = V.reshape((V.shape[0],) + grid.shape)
        D = _mask_diff(U, M[None], grid.spacing, axis=ax + 1)
        out.append(D.reshape(V.shape[0], -1))
    return out


def _weighted_sq(field, arrs, mask, w) -> float:
    hv = field.grid.cell_volume
    return sum(hv * float(np.dot(w, np.sum(a[:, mask] ** 2, axis=1))) for a in arrs)


def norm_h1(field: SpaceTimeField, mask, time_range=None) -> float:
    """Space-time H1 norm: L2 part plus difference quotients in x and t."""
    mask = _check_mask(mask, field.grid)
    sl, w = _levels(field, time_range)
    V = np.where(mask, field.values[sl], 0.0)
    terms = [V, _time_diff(V, field.time.dt)] + _space_derivs(V, field, mask)
    return float(np.sqrt(_weighted_sq(field, terms, mask, w)))


def norm_h2(field: SpaceTimeField, mask, time_range=None) -> float:
    """Space-time H2 norm: H1 terms plus second differences (xx, xt, tt)."""
    mask = _check_mask(mask, field.grid)
    sl, w = _levels(field, time_range)
    V = np.where(mask, field.values[sl], 0.0)
    dt = field.time.dt
    Vt = _time_diff(V, dt)
    Vx = _space_derivs(V, field, mask)
    terms = [V, Vt] + Vx + [_time_diff(Vt, dt)]
    terms += [_time_diff(d, dt) for d in Vx]
    for d in Vx:
        terms += _space_derivs(d, field, mask)
    return float(np.sqrt(_weighted_sq(field, terms, mask, w)))
