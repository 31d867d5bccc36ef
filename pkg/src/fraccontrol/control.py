"""Exterior control synthesis by minimizing the dual energy functional.

With ``phi_v`` the adjoint state driven by ``v`` and ``A`` the discrete
fractional Laplacian, the control map is

    K v = (eta * A phi_v)|_{W x T},      K* w = -(P(eta * w))|_{B x T},

where ``P`` maps exterior data to the interior solution.  The functional

    J(v) = 1/2 |K v|^2 + eps |v| - (h, v)

is minimized over interior space-time fields; the control is
``f = -eta^2 A phi_vhat`` and it reproduces the target to within ``eps``.

All inner products are the trapezoid-in-time, cell-volume-in-space ones, so
``K*`` is the exact adjoint of ``K`` in that geometry.  Fields handled here
are compact: interior arrays of shape ``(m + 1, nI)`` and control-region
arrays of shape ``(m + 1, nW)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.optimize import brentq

from .evolution import Propagator, heat_propagator, wave_propagator
from .fracops import FracOperator
from .lattice import Cutoff, RegionPartition, SpaceTimeField, TimeGrid, make_cutoff, norm_h1, norm_h2

__all__ = [
    "Target",
    "make_target",
    "OptimizerSettings",
    "ControlConfig",
    "ControlResult",
    "ApproximationCheck",
    "CostSweep",
    "GramianSpectrum",
    "NonConvergenceError",
    "apply_K",
    "apply_K_star",
    "evaluate_functional",
    "operator_norm",
    "minimize",
    "verify_approximation",
    "cost_sweep",
    "fit_cost_law",
    "gramian_svd",
    "control_field",
    "AuxiliaryGap",
    "auxiliary_functional_gap",
    "reference_delta",
]

log = logging.getLogger(__name__)


class NonConvergenceError(RuntimeError):
    """Raised by pipelines that require a certified minimizer."""


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Target:
    """Interior target ``h`` with its boundary-vanishing class.

    ``h1_0`` / ``h2_0`` state that the underlying profile vanishes (with its
    first derivatives, for ``h2_0``) on the lateral boundary and at ``t = +-1``.
    """

    field: SpaceTimeField
    name: str
    h1_0: bool
    h2_0: bool


def _profile_cos2(x, t):
    return np.cos(0.5 * np.pi * x) ** 2 * np.cos(0.5 * np.pi * t) ** 2


def _profile_sine(x, t):
    return np.cos(0.5 * np.pi * x) * np.cos(0.5 * np.pi * t)


# name -> (profile, vanishes in H1_0 sense, vanishes in H2_0 sense)
_TARGETS = {
    "cos2": (_profile_cos2, True, True),
    "sine": (_profile_sine, True, False),
}


def make_target(name: str, part: RegionPartition, time: TimeGrid, amplitude: float = 1.0) -> Target:
    """Separable target profile sampled on the interior nodes.

    ``cos2`` is ``cos^2(pi r/2) cos^2(pi t/2)`` (vanishes with its gradient);
    ``sine`` is ``cos(pi r/2) cos(pi t/2)`` (vanishes, gradient does not).
    """
    try:
        prof, h1, h2 = _TARGETS[name]
    except KeyError:
        raise ValueError(f"unknown target profile {name!r}; choose from {sorted(_TARGETS)}") from None
    grid = part.grid
    r = np.linalg.norm(grid.nodes, axis=1)
    vals = amplitude * prof(r[None, :], time.levels[:, None])
    vals[:, ~part.interior] = 0.0
    return Target(SpaceTimeField(vals, grid, time), name, h1, h2)


def target_from_field(fld: SpaceTimeField, part: RegionPartition, name: str = "csv", h2_0: bool = False) -> Target:
    """Wrap an arbitrary field; the end levels must vanish for it to count as H1_0."""
    vals = fld.values
    if np.any(vals[:, ~part.interior] != 0.0):
        raise ValueError("target must vanish off the interior mask")
    scale = np.abs(vals).max()
    ends = max(np.abs(vals[0]).max(), np.abs(vals[-1]).max())
    h1 = bool(ends <= 1e-12 * max(scale, 1e-300))
    return Target(fld, name, h1, h1 and h2_0)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerSettings:
    """Optimizer knobs.

    ``method`` is ``"krylov"`` (Lanczos on ``K*K`` started at ``h`` with an
    exact secular solve in the subspace) or ``"fista"`` (accelerated proximal
    gradient with adaptive restart).
    """

    method: str = "krylov"
    max_iter: int = 2000
    tol: float = 1e-8
    cert_tol: float = 1e-6
    power_iter: int = 200
    power_tol: float = 1e-10
    check_every: int = 25

    def __post_init__(self):
        if self.method not in ("krylov", "fista"):
            raise ValueError(f"optimizer method must be 'krylov' or 'fista', got {self.method!r}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if not (0 < self.tol < 1 and 0 < self.cert_tol < 1):
            raise ValueError("tolerances must lie in (0, 1)")


@dataclass(eq=False)
class ControlConfig:
    """Everything a control run needs; also serves as the solver context."""

    operator: FracOperator
    partition: RegionPartition
    time: TimeGrid
    target: Target
    eps: float
    kind: str = "heat"
    theta: float = 1.0
    cutoff: Cutoff | None = None
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    delta: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("heat", "wave"):
            raise ValueError(f"equation kind must be 'heat' or 'wave', got {self.kind!r}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.kind == "heat" and not self.target.h1_0:
            raise ValueError("heat control needs an H1_0 target (vanishing at t = -1, 1 and on the lateral boundary)")
        if self.kind == "wave" and not self.target.h2_0:
            raise ValueError("wave control needs an H2_0 target (value and first derivatives vanishing on the boundary)")
        if self.cutoff is None:
            self.cutoff = make_cutoff(self.partition)
        if self.cutoff.partition is not self.partition:
            raise ValueError("cutoff was built for a different partition")
        if self.target.field.values.shape != (self.time.m + 1, self.partition.grid.num_nodes):
            raise ValueError("target does not match the grid/time configuration")

    def with_eps(self, eps: float) -> "ControlConfig":
        """Same context (sharing cached factorizations) with a new ``eps``."""
        new = object.__new__(ControlConfig)
        new.__dict__.update(self.__dict__)
        if not eps > 0:
            raise ValueError(f"eps must be positive, got {eps}")
        new.eps = float(eps)
        return new

    @cached_property
    def propagator(self) -> Propagator:
        if self.kind == "heat":
            return heat_propagator(self.operator, self.partition, self.time, float(self.theta))
        return wave_propagator(self.operator, self.partition, self.time)

    @cached_property
    def coupling(self) -> np.ndarray:
        """``A_IW``, shape ``(nI, nW)``."""
        p = self.partition
        return self.operator.block(p.interior_index, p.control_index)

    @cached_property
    def eta_w(self) -> np.ndarray:
        return np.asarray(self.cutoff.values[self.partition.control])

    @cached_property
    def h(self) -> np.ndarray:
        return self.target.field.values[:, self.partition.interior].copy()

    @cached_property
    def level_weights(self) -> np.ndarray:
        return self.time.weights * self.partition.grid.cell_volume

    @cached_property
    def coupling_ld(self) -> np.ndarray:
        return self.coupling.astype(np.longdouble)

    @cached_property
    def eta_ld(self) -> np.ndarray:
        return self.eta_w.astype(np.longdouble)

    @cached_property
    def krylov(self) -> "_Lanczos":
        return _Lanczos(self)

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.dot(self.level_weights, np.sum(a * b, axis=1)))

    def norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(max(self.inner(a, a), 0.0)))


def _compact_interior(v, ctx: ControlConfig) -> np.ndarray:
    if isinstance(v, SpaceTimeField):
        v = v.values
    v = np.asarray(v, dtype=float)
    if v.shape[1] == ctx.partition.grid.num_nodes:
        return v[:, ctx.partition.interior]
    if v.shape[1] != ctx.partition.num_interior:
        raise ValueError(f"field with {v.shape[1]} columns is neither full-lattice nor interior")
    return v


def _compact_control(w, ctx: ControlConfig) -> np.ndarray:
    if isinstance(w, SpaceTimeField):
        w = w.values
    w = np.asarray(w, dtype=float)
    if w.shape[1] == ctx.partition.grid.num_nodes:
        return w[:, ctx.partition.control]
    if w.shape[1] != ctx.partition.num_control:
        raise ValueError(f"field with {w.shape[1]} columns is neither full-lattice nor control-region")
    return w


# ---------------------------------------------------------------------------
# the operator pair
# ---------------------------------------------------------------------------


def apply_K(v, ctx: ControlConfig) -> np.ndarray:
    """``K v = eta * (A phi_v)`` on ``W x T``; accepts a trailing batch axis."""
    v = _compact_interior(v, ctx)
    phi = ctx.propagator.transpose(v)
    # phi vanishes off the interior, so (A phi)|_W = A_WI phi
    Aphi = np.einsum("ij,ki...->kj...", ctx.coupling, phi)
    eta = ctx.eta_w.reshape((1, -1) + (1,) * (Aphi.ndim - 2))
    return eta * Aphi


def apply_K_star(w, ctx: ControlConfig) -> np.ndarray:
    """``K* w = -P(eta * w)`` restricted to ``B x T``."""
    w = _compact_control(w, ctx)
    eta = ctx.eta_w.reshape((1, -1) + (1,) * (w.ndim - 2))
    f = eta * w
    r = -np.einsum("ij,kj...->ki...", ctx.coupling, f)
    u, _ = ctx.propagator.forward(r)
    return -u


def _gram(v, ctx):
    return apply_K_star(apply_K(v, ctx), ctx)


def evaluate_functional(v, ctx: ControlConfig) -> float:
    v = _compact_interior(v, ctx)
    Kv = apply_K(v, ctx)
    return 0.5 * _norm_w(Kv, ctx) ** 2 + ctx.eps * ctx.norm(v) - ctx.inner(ctx.h, v)


def _norm_w(w, ctx) -> float:
    return float(np.sqrt(np.dot(ctx.level_weights, np.sum(w * w, axis=1))))


@dataclass(frozen=True)
class PowerIteration:
    value: float
    iterations: int
    converged: bool


def operator_norm(ctx: ControlConfig, max_iter: int | None = None, tol: float | None = None) -> PowerIteration:
    """``|K|`` by power iteration on ``K*K`` with a seeded start vector."""
    opt = ctx.optimizer
    max_iter = opt.power_iter if max_iter is None else max_iter
    tol = opt.power_tol if tol is None else tol
    rng = np.random.default_rng(ctx.seed)
    x = rng.standard_normal(ctx.h.shape)
    x /= ctx.norm(x)
    lam = 0.0
    for it in range(1, max_iter + 1):
        y = _gram(x, ctx)
        new = ctx.inner(x, y)
        ny = ctx.norm(y)
        if ny == 0.0:
            return PowerIteration(0.0, it, True)
        x = y / ny
        if abs(new - lam) <= tol * abs(new):
            return PowerIteration(float(np.sqrt(new)), it, True)
        lam = new
    return PowerIteration(float(np.sqrt(lam)), max_iter, False)


# ---------------------------------------------------------------------------
# minimization
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ControlResult:
    """Minimizer, synthesized control and optimality certificates.

    ``control`` is the full-lattice field ``f`` (zero off W); ``state`` is the
    interior solution driven by it.
    """

    v: np.ndarray
    control: SpaceTimeField
    state: np.ndarray
    error: float
    cost: float
    functional: float
    Kv_norm: float
    optimality_residual: float
    identity_gap: float
    cost_gap: float
    iterations: int
    converged: bool
    method: str
    eps: float
    target_norm: float
    history: list[dict] = field(default_factory=list, repr=False)

    @property
    def v_norm_zero(self) -> bool:
        return not np.any(self.v)

    def summary(self) -> dict:
        return {
            "eps": self.eps,
            "target_norm": self.target_norm,
            "error": self.error,
            "cost": self.cost,
            "functional": self.functional,
            "minus_half_Kv_sq": -0.5 * self.Kv_norm**2,
            "optimality_residual": self.optimality_residual,
            "identity_gap": self.identity_gap,
            "cost_gap": self.cost_gap,
            "iterations": self.iterations,
            "converged": self.converged,
            "method": self.method,
        }


def control_field(v, ctx: ControlConfig) -> SpaceTimeField:
    """``f = -eta^2 A phi_v`` embedded in the full lattice."""
    v = _compact_interior(v, ctx)
    Kv = apply_K(v, ctx)
    out = np.zeros((ctx.time.m + 1, ctx.partition.grid.num_nodes))
    out[:, ctx.partition.control] = -ctx.eta_w * Kv
    return SpaceTimeField(out, ctx.partition.grid, ctx.time)


def _prox(x: np.ndarray, t: float, ctx) -> np.ndarray:
    nx = ctx.norm(x)
    if nx <= t:
        return np.zeros_like(x)
    return (1.0 - t / nx) * x


def _certify(v: np.ndarray, ctx: ControlConfig, iterations: int, method: str, history, converged_iter: bool) -> ControlResult:
    """Evaluate everything that certifies ``v`` and build the result."""
    eps = ctx.eps
    h = ctx.h
    Kv = apply_K(v, ctx)
    f = -ctx.eta_w * Kv
    # u = P f restricted to the interior; equals K* K v
    r = -np.einsum("ij,kj->ki", ctx.coupling, f)
    u, _ = ctx.propagator.forward(r)
    nv = ctx.norm(v)
    nKv = _norm_w(Kv, ctx)
    J = 0.5 * nKv**2 + eps * nv - ctx.inner(h, v)
    g = u - h
    hn = ctx.norm(h)
    scale_h = hn if hn > 0 else 1.0
    if nv > 0:
        opt = ctx.norm(g + eps * v / nv) / scale_h
    else:
        # 0 is optimal iff |h - K*K 0| <= eps
        opt = max(0.0, ctx.norm(g) - eps) / scale_h
    cost = _norm_w(f, ctx)
    scale = max(abs(J), 0.5 * nKv**2)
    identity_gap = abs(J + 0.5 * nKv**2) / scale if scale > 0 else 0.0
    cost_gap = max(0.0, cost**2 + 2.0 * J) / scale if scale > 0 else max(0.0, cost**2 + 2.0 * J)
    ok = converged_iter and opt <= ctx.optimizer.cert_tol and identity_gap <= ctx.optimizer.cert_tol
    out_full = np.zeros((ctx.time.m + 1, ctx.partition.grid.num_nodes))
    out_full[:, ctx.partition.control] = f
    return ControlResult(
        v=v,
        control=SpaceTimeField(out_full, ctx.partition.grid, ctx.time),
        state=u,
        error=ctx.norm(g),
        cost=cost,
        functional=float(J),
        Kv_norm=nKv,
        optimality_residual=float(opt),
        identity_gap=float(identity_gap),
        cost_gap=float(cost_gap),
        iterations=iterations,
        converged=bool(ok),
        method=method,
        eps=float(eps),
        target_norm=hn,
        history=history,
    )


def _fista(ctx: ControlConfig, v0: np.ndarray | None):
    opt = ctx.optimizer
    pw = operator_norm(ctx)
    if pw.value == 0.0:
        raise RuntimeError("control operator vanishes identically")
    # power iteration underestimates |K|; a small margin keeps the step safe
    tau = 1.0 / (1.01 * pw.value**2)
    h = ctx.h
    x = np.zeros_like(h) if v0 is None else np.array(v0, dtype=float)
    y = x.copy()
    t = 1.0
    history = []
    done = False
    it = 0
    for it in range(1, opt.max_iter + 1):
        grad = _gram(y, ctx) - h
        x_new = _prox(y - tau * grad, tau * ctx.eps, ctx)
        dx = x_new - x
        step = ctx.norm(dx) / max(ctx.norm(x), 1.0)
        if ctx.inner(y - x_new, dx) > 0.0:
            # adaptive restart: momentum points uphill
            t = 1.0
            y = x_new.copy()
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = x_new + ((t - 1.0) / t_new) * dx
            t = t_new
        x = x_new
        if it % opt.check_every == 0 or step <= opt.tol:
            J = evaluate_functional(x, ctx)
            history.append({"iteration": it, "functional": J, "step": step})
            log.debug("fista it=%d J=%.6e step=%.3e", it, J, step)
        if step <= opt.tol:
            res = _certify(x, ctx, it, "fista", history, True)
            if res.converged:
                return res
            if not np.any(x):
                # zero fixed point that fails the subgradient test: keep going
                continue
    return _certify(x, ctx, it, "fista", history, done)


def _gram_extended(q: np.ndarray, ctx: ControlConfig) -> np.ndarray:
    """``K*K q`` with every solve and product carried out in extended precision."""
    ext = ctx.propagator.extended
    A = ctx.coupling_ld
    eta = ctx.eta_ld
    phi = ext.transpose(q)
    Kq = eta * (phi @ A)
    u = ext.forward(-(eta * Kq) @ A.T)
    return -u


def _tridiag_solve(d: np.ndarray, e: np.ndarray, rhs0) -> np.ndarray:
    """Solve ``T y = rhs0 * e_1`` for symmetric positive definite tridiagonal ``T``."""
    k = len(d)
    c = np.zeros(k, dtype=d.dtype)
    g = np.zeros(k, dtype=d.dtype)
    piv = d[0]
    g[0] = rhs0 / piv
    for i in range(1, k):
        c[i - 1] = e[i - 1] / piv
        piv = d[i] - e[i - 1] * c[i - 1]
        g[i] = -e[i - 1] * g[i - 1] / piv
    y = g.copy()
    for i in range(k - 2, -1, -1):
        y[i] = g[i] - c[i] * y[i + 1]
    return y


class _Lanczos:
    """Lanczos basis of ``K*K`` in the weighted geometry, started at ``h``.

    Everything (vectors, recurrence coefficients, reorthogonalization) is in
    extended precision.  The basis does not depend on ``eps``, so every run
    on the same target shares it and only extends it when a smaller ``eps``
    needs more vectors.
    """

    def __init__(self, ctx: ControlConfig):
        self.ctx = ctx
        self.w = ctx.level_weights.astype(np.longdouble)
        h = ctx.h.astype(np.longdouble)
        self.beta0 = self._norm(h)
        self.Q: list[np.ndarray] = []
        self.alpha: list = []
        self.beta: list = []
        self.exhausted = self.beta0 == 0
        if not self.exhausted:
            self.Q.append(h / self.beta0)

    def _inner(self, a, b):
        return np.dot(self.w, np.sum(a * b, axis=1))

    def _norm(self, a):
        return np.sqrt(self._inner(a, a))

    @property
    def size(self) -> int:
        return len(self.alpha)

    def extend(self) -> None:
        q = self.Q[-1]
        w = _gram_extended(q, self.ctx)
        a = self._inner(q, w)
        w = w - a * q
        if self.beta:
            w -= self.beta[-1] * self.Q[-2]
        for _ in range(2):
            for qq in self.Q:
                w -= self._inner(qq, w) * qq
        b = self._norm(w)
        self.alpha.append(a)
        self.beta.append(b)
        if b <= 1e-18 * abs(self.alpha[0]) or len(self.Q) >= self.ctx.h.size:
            self.exhausted = True
            return
        self.Q.append(w / b)

    def _mu_estimate(self, eps: float) -> float | None:
        """Root of ``mu |(T + mu)^-1 beta0 e_1| = eps`` from a double-precision eigensolve."""
        k = self.size
        lam, S = eigh_tridiagonal(np.array(self.alpha, dtype=float), np.array(self.beta[: k - 1], dtype=float))
        lam = np.maximum(lam, 0.0)
        c = float(self.beta0) * S[0, :]

        def phi(logmu):
            mu = np.exp(logmu)
            return np.log(mu * np.linalg.norm(c / (lam + mu))) - np.log(eps)

        lo = np.log(1e-30 * lam.max()) if lam.max() > 0 else np.log(1e-300)
        hi = np.log(max(lam.max(), 1.0) * float(self.beta0) / eps * 10.0)
        if phi(lo) >= 0.0:
            return None
        return float(np.exp(brentq(phi, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)))

    def solve(self, eps: float, polish: bool = False):
        """Subspace minimizer: (coefficients, mu, residual norm) or ``None`` if infeasible.

        With ``polish`` the secular equation is re-solved by secant steps on
        extended-precision tridiagonal solves.
        """
        mu = self._mu_estimate(eps)
        if mu is None:
            return None
        k = self.size
        ld = np.longdouble
        d = np.array(self.alpha, dtype=ld)
        e = np.array(self.beta[: k - 1], dtype=ld)

        def y_of(mu_):
            return _tridiag_solve(d + mu_, e, self.beta0)

        mu = ld(mu)
        y = y_of(mu)
        if polish:
            target = np.log(ld(eps))

            def g(lm):
                return np.log(np.exp(lm) * np.sqrt(np.sum(y_of(np.exp(lm)) ** 2))) - target

            x0 = np.log(mu)
            x1 = x0 + ld(1e-6)
            g0, g1 = g(x0), g(x1)
            for _ in range(30):
                if g1 == g0:
                    break
                x0, x1 = x1, x1 - g1 * (x1 - x0) / (g1 - g0)
                g0, g1 = g1, g(x1)
                if abs(g1) <= 8 * np.finfo(ld).eps:
                    break
            mu = np.exp(x1)
            y = y_of(mu)
        resid = abs(self.beta[-1] * y[-1])
        return y, float(mu), float(resid)

    def assemble(self, y: np.ndarray) -> np.ndarray:
        return np.tensordot(y, np.array(self.Q[: len(y)]), axes=1)


def _krylov(ctx: ControlConfig):
    opt = ctx.optimizer
    lz = ctx.krylov
    hn = float(lz.beta0)
    history = []
    best = None
    while True:
        if lz.size > 0:
            sol = lz.solve(ctx.eps)
            if sol is None:
                # the subspace problem is unbounded below: the discrete range
                # misses more than eps of h
                history.append({"iteration": lz.size, "mu": 0.0, "residual": float("inf")})
            else:
                y, mu, resid = sol
                history.append({"iteration": lz.size, "mu": mu, "residual": resid / hn})
                log.debug("krylov k=%d mu=%.3e resid=%.3e", lz.size, mu, resid / hn)
                if resid <= opt.tol * hn or lz.exhausted:
                    y, mu, resid = lz.solve(ctx.eps, polish=True)
                    v = lz.assemble(y).astype(float)
                    res = _certify(v, ctx, lz.size, "krylov", history, True)
                    if res.converged:
                        return res
                    best = res
        if lz.size >= opt.max_iter or lz.exhausted:
            if best is None:
                sol = lz.solve(ctx.eps, polish=True) if lz.size else None
                v = lz.assemble(sol[0]).astype(float) if sol is not None else np.zeros_like(ctx.h)
                best = _certify(v, ctx, lz.size, "krylov", history, False)
            best.converged = False
            return best
        lz.extend()


def minimize(ctx: ControlConfig, v0: np.ndarray | None = None) -> ControlResult:
    """Minimize ``J_eps``; ``v0`` warm-starts the FISTA iteration.

    The result is flagged ``converged=False`` when the iteration cap is hit
    before the certificates hold; the best iterate is still returned.
    """
    h = ctx.h
    hn = ctx.norm(h)
    if hn <= ctx.eps:
        # (h, v) <= |h||v| <= eps|v| makes v = 0 optimal
        return _certify(np.zeros_like(h), ctx, 0, ctx.optimizer.method, [], True)
    if ctx.optimizer.method == "fista":
        return _fista(ctx, v0)
    return _krylov(ctx)


# ---------------------------------------------------------------------------
# verification and experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ApproximationCheck:
    error: float
    weak_residual: float
    within_eps: bool


def verify_approximation(result: ControlResult, ctx: ControlConfig, samples: int = 20) -> ApproximationCheck:
    """Re-solve the forward problem with the synthesized control and measure ``|u - h|``.

    The weak residual is ``max |(u - h, v)| / |v|`` over seeded random ``v``.
    """
    from .evolution import HeatProblem, WaveProblem, solve_heat, solve_wave

    f = result.control.values
    if ctx.kind == "heat":
        u = solve_heat(HeatProblem(ctx.operator, ctx.partition, ctx.time, exterior=f, theta=ctx.theta)).values
    else:
        u = solve_wave(WaveProblem(ctx.operator, ctx.partition, ctx.time, exterior=f)).values
    g = u[:, ctx.partition.interior] - ctx.h
    err = ctx.norm(g)
    rng = np.random.default_rng(ctx.seed + 1)
    weak = 0.0
    for _ in range(samples):
        v = rng.standard_normal(g.shape)
        weak = max(weak, abs(ctx.inner(g, v)) / ctx.norm(v))
    tol = ctx.optimizer.tol
    return ApproximationCheck(error=err, weak_residual=weak, within_eps=bool(err <= ctx.eps * (1.0 + 10.0 * tol)))


@dataclass(eq=False)
class CostSweep:
    rows: list[dict]
    fit: dict | None
    target_norm: float
    target_norm_h: float
    regularity: str

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows])


def fit_cost_law(eps: np.ndarray, cost: np.ndarray, sigma_grid: np.ndarray | None = None) -> dict | None:
    """Fit ``log cost = a + b eps^-sigma`` with ``sigma`` profiled over a grid.

    Only rows with positive cost enter.  With three or fewer points the fit
    is exact for many ``sigma``; the smallest residual (then smallest sigma)
    is kept.
    """
    eps = np.asarray(eps, dtype=float)
    cost = np.asarray(cost, dtype=float)
    keep = cost > 0
    if keep.sum() < 2:
        return None
    le, lc = eps[keep], np.log(cost[keep])
    if sigma_grid is None:
        sigma_grid = np.linspace(0.05, 4.0, 80)
    best = None
    for sg in sigma_grid:
        X = np.column_stack([np.ones_like(le), le ** (-sg)])
        coef, *_ = np.linalg.lstsq(X, lc, rcond=None)
        res = float(np.sum((X @ coef - lc) ** 2))
        if best is None or res < best[0] - 1e-12 * (1 + best[0]):
            best = (res, float(sg), float(coef[0]), float(coef[1]))
    res, sg, a, b = best
    return {"a": a, "b": b, "sigma": sg, "residual": res, "points": int(keep.sum())}


def cost_sweep(ctx: ControlConfig, eps_list, on_row=None) -> CostSweep:
    """Run ``minimize`` for each ``eps`` (decreasing), warm-starting along the chain.

    ``on_row`` is called with each finished row, so callers can flush
    partial results.
    """
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    if ctx.optimizer.method == "krylov":
        ctx.krylov  # build once so every eps shares the basis
    rows = []
    v_prev = None
    all_ok = True
    for eps in eps_list:
        c = ctx.with_eps(eps)
        res = minimize(c, v0=v_prev)
        chk = verify_approximation(res, c)
        rows.append(
            {
                "eps": eps,
                "cost": res.cost,
                "error": chk.error,
                "iterations": res.iterations,
                "functional": res.functional,
                "converged": res.converged,
            }
        )
        if on_row is not None:
            on_row(rows[-1])
        all_ok &= res.converged
        if res.converged and np.any(res.v):
            v_prev = res.v
    fit = fit_cost_law([r["eps"] for r in rows], [r["cost"] for r in rows]) if all_ok else None
    fld = ctx.target.field
    if ctx.kind == "heat":
        nh, reg = norm_h1(fld, ctx.partition.interior), "H1"
    else:
        nh, reg = norm_h2(fld, ctx.partition.interior), "H2"
    return CostSweep(rows=rows, fit=fit, target_norm=ctx.norm(ctx.h), target_norm_h=nh, regularity=reg)


@dataclass(frozen=True)
class GramianSpectrum:
    """Singular values of ``K`` in the weighted geometry, sorted descending."""

    values: np.ndarray
    dropped_rows: int
    dropped_cols: int
    modes: np.ndarray | None = field(default=None, repr=False)

    @property
    def normalized(self) -> np.ndarray:
        return self.values / self.values[0]

    def first_below(self, threshold: float) -> int | None:
        """0-based index of the first mode with ``sigma_k/sigma_1 < threshold``."""
        idx = np.flatnonzero(self.normalized < threshold)
        return int(idx[0]) if idx.size else None


def gramian_svd(ctx: ControlConfig, budget: int = 4096, vectors: bool = False) -> GramianSpectrum:
    """Dense SVD of ``D_W^{1/2} K D_B^{-1/2}`` assembled column by column.

    Levels that ``K`` never sees (or never produces, e.g. the initial level
    of an implicit Euler run) give structurally zero columns/rows; they are
    dropped before the decomposition.  With ``vectors`` the right singular
    vectors are returned as interior fields ``(k, m + 1, nI)``, orthonormal in
    the weighted inner product.
    """
    m1 = ctx.time.m + 1
    nI = ctx.partition.num_interior
    dim = m1 * nI
    if dim > budget:
        raise ValueError(f"Gramian dimension {dim} exceeds the budget {budget}; use a coarser grid")
    E = np.eye(dim).reshape(m1, nI, dim)
    Km = apply_K(E, ctx).reshape(-1, dim)
    dB = np.repeat(ctx.level_weights, nI)
    dW = np.repeat(ctx.level_weights, ctx.partition.num_control)
    Kt = np.sqrt(dW)[:, None] * Km / np.sqrt(dB)[None, :]
    rows = np.any(Kt != 0.0, axis=1)
    cols = np.any(Kt != 0.0, axis=0)
    sub = Kt[rows][:, cols]
    modes = None
    if vectors:
        _, sv, Vt = np.linalg.svd(sub, full_matrices=False)
        full = np.zeros((len(sv), dim))
        full[:, cols] = Vt / np.sqrt(dB[cols])[None, :]
        modes = full.reshape(len(sv), m1, nI)
    else:
        sv = np.linalg.svd(sub, compute_uv=False)
    return GramianSpectrum(values=sv, dropped_rows=int((~rows).sum()), dropped_cols=int((~cols).sum()), modes=modes)


# ---------------------------------------------------------------------------
# auxiliary functional shift
# ---------------------------------------------------------------------------


def reference_delta(ctx: ControlConfig, C: float = 1.0) -> float:
    """``(eps / (C |h|_{H1} + 1))^{1 / max(s, 1 - s)}``."""
    s = ctx.operator.s
    hn = norm_h1(ctx.target.field, ctx.partition.interior)
    return float((ctx.eps / (C * hn + 1.0)) ** (1.0 / max(s, 1.0 - s)))


@dataclass(frozen=True)
class AuxiliaryGap:
    """Both sides of the positivity condition for the height-``delta`` functional."""

    delta: float
    lhs: float
    shift: float
    time_part: float
    flux_part: float
    reference_delta: float

    @property
    def holds(self) -> bool:
        return self.lhs + self.shift >= 0.0

    def as_dict(self) -> dict:
        return {
            "delta": self.delta,
            "lhs": self.lhs,
            "shift": self.shift,
            "time_part": self.time_part,
            "flux_part": self.flux_part,
            "reference_delta": self.reference_delta,
            "holds": self.holds,
        }


def auxiliary_functional_gap(ctx: ControlConfig, v, delta: float, strip=None, c_s: float | None = None) -> AuxiliaryGap:
    """``lhs = (eps/2)|v|`` and the shift ``int h (-d_t + d^s_y)[Phi(., delta, .) - Phi(., 0, .)]``.

    ``Phi`` is the extension of the adjoint state ``phi_v`` slice by slice and
    ``d^s_y Phi = -c_s y^{1-2s} d_y Phi``, which at ``y = 0`` is the operator
    applied to ``phi_v``.  The time part is integrated by parts onto ``h``,
    which vanishes at both ends of the time interval.
    """
    from .extension import _level_flux, _level_interp, calibrate_cs, make_strip, neumann_trace, solve_extension

    if ctx.kind != "heat":
        raise ValueError("the auxiliary functional is defined for the heat equation")
    if not 0.0 < delta < 0.5:
        raise ValueError(f"delta must lie in (0, 1/2), got {delta}")
    part = ctx.partition
    if isinstance(v, ControlResult):
        v = v.v
    v = _compact_interior(v, ctx)
    ref = reference_delta(ctx)
    nv = ctx.norm(v)
    if nv == 0.0:
        return AuxiliaryGap(float(delta), 0.0, 0.0, 0.0, 0.0, ref)
    if strip is None:
        strip = make_strip(part.grid)
    s = ctx.operator.s
    if c_s is None:
        c_s = calibrate_cs(s, strip)
    phi = np.zeros((ctx.time.m + 1, part.grid.num_nodes))
    phi[:, part.interior] = ctx.propagator.transpose(v)
    ext = solve_extension(phi, s, strip)
    lat = strip.lattice
    I = part.interior
    D = _level_interp(ext, delta)[:, lat][:, I] - phi[:, I]
    flux_delta = -c_s * _level_flux(ext, delta)[:, lat][:, I]
    flux_zero = neumann_trace(ext, c_s)[:, I]
    h = ctx.h
    ht = np.gradient(h, ctx.time.dt, axis=0)
    time_part = ctx.inner(ht, D)
    flux_part = ctx.inner(h, flux_delta - flux_zero)
    return AuxiliaryGap(
        delta=float(delta),
        lhs=0.5 * ctx.eps * nv,
        shift=float(time_part + flux_part),
        time_part=float(time_part),
        flux_part=float(flux_part),
        reference_delta=ref,
    )
