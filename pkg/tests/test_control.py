import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from conftest import random_control, random_interior
from fraccontrol.control import (
    ControlConfig,
    OptimizerSettings,
    Target,
    apply_K,
    apply_K_star,
    auxiliary_functional_gap,
    control_field,
    cost_sweep,
    evaluate_functional,
    fit_cost_law,
    gramian_svd,
    make_target,
    minimize,
    operator_norm,
    reference_delta,
    target_from_field,
    verify_approximation,
)
from fraccontrol.evolution import HeatProblem, solve_heat
from fraccontrol.extension import calibrate_cs, make_strip
from fraccontrol.fracops import assemble
from fraccontrol.lattice import SpaceTimeField, TimeGrid, build_grid, partition


@pytest.fixture(scope="module")
def time16():
    return TimeGrid(16)


@pytest.fixture(scope="module")
def ctx65(op65, part65, time16):
    return ControlConfig(op65, part65, time16, make_target("cos2", part65, time16), 1.0)


@pytest.fixture(scope="module")
def ctx129(op129, part129, time32):
    return ControlConfig(op129, part129, time32, make_target("cos2", part129, time32), 1.0)


def _rel_eps(ctx, rel):
    return ctx.with_eps(rel * ctx.norm(ctx.h))


def test_adjointness(ctx129, rng):
    for _ in range(10):
        v = random_interior(rng, ctx129.partition, ctx129.time)
        w = random_control(rng, ctx129.partition, ctx129.time)
        Kv = apply_K(v, ctx129)
        Ksw = apply_K_star(w, ctx129)
        lhs = np.dot(ctx129.level_weights, np.sum(Kv * w[:, ctx129.partition.control], axis=1))
        rhs = ctx129.inner(v[:, ctx129.partition.interior], Ksw)
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs), 1e-300) or abs(lhs - rhs) <= 1e-12


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_K_linear(ctx65, seed, a, b):
    r = np.random.default_rng(seed)
    v1, v2 = (random_interior(r, ctx65.partition, ctx65.time) for _ in range(2))
    lhs = apply_K(a * v1 + b * v2, ctx65)
    rhs = a * apply_K(v1, ctx65) + b * apply_K(v2, ctx65)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * max(np.linalg.norm(rhs), 1.0)


def test_K_matches_adjoint_heat_solve(ctx129, rng):
    # second route: backward heat problem from the evolution module
    p, op = ctx129.partition, ctx129.operator
    v = random_interior(rng, p, ctx129.time)
    phi = solve_heat(HeatProblem(op, p, ctx129.time, source=v, direction="adjoint")).values
    ref = ctx129.eta_w * (phi @ op.matrix.T)[:, p.control]
    got = apply_K(v, ctx129)
    assert np.linalg.norm(got - ref) <= 1e-12 * np.linalg.norm(ref)
    # K* w is minus the forward state driven by the exterior datum eta w
    w = random_control(rng, p, ctx129.time)
    u = solve_heat(HeatProblem(op, p, ctx129.time, exterior=ctx129.cutoff.values[None, :] * w)).values
    assert np.linalg.norm(apply_K_star(w, ctx129) + u[:, p.interior]) <= 1e-12 * np.linalg.norm(u)


def test_K_batch_axis(ctx65, rng):
    V = np.stack([random_interior(rng, ctx65.partition, ctx65.time)[:, ctx65.partition.interior] for _ in range(3)], axis=-1)
    B = apply_K(V, ctx65)
    for j in range(3):
        np.testing.assert_allclose(B[..., j], apply_K(V[..., j], ctx65), rtol=1e-13, atol=1e-14)


def test_K_rejects_wrong_width(ctx65):
    with pytest.raises(ValueError):
        apply_K(np.zeros((ctx65.time.m + 1, 3)), ctx65)


def test_power_iteration_matches_svd(ctx65):
    pw = operator_norm(ctx65)
    sp = gramian_svd(ctx65)
    assert pw.converged
    assert pw.value == pytest.approx(sp.values[0], rel=1e-6)


def test_functional_basic_values(ctx65, rng):
    assert evaluate_functional(np.zeros_like(ctx65.h), ctx65) == 0.0
    zero_target = Target(SpaceTimeField.zeros(ctx65.partition.grid, ctx65.time), "zero", True, True)
    c0 = ControlConfig(ctx65.operator, ctx65.partition, ctx65.time, zero_target, 0.1)
    for _ in range(5):
        v = random_interior(rng, ctx65.partition, ctx65.time)
        assert evaluate_functional(v, c0) >= 0.0


def test_zero_target_or_large_eps_gives_zero_minimizer(ctx65):
    big = _rel_eps(ctx65, 1.0)
    res = minimize(big)
    assert res.v_norm_zero and res.cost == 0.0 and res.converged
    zero_target = Target(SpaceTimeField.zeros(ctx65.partition.grid, ctx65.time), "zero", True, True)
    res0 = minimize(ControlConfig(ctx65.operator, ctx65.partition, ctx65.time, zero_target, 0.1))
    assert res0.v_norm_zero and res0.cost == 0.0


def _secular_reference(ctx):
    """Minimizer from the dense SVD of K in weighted coordinates.

    The optimality condition ``(K*K + mu) v = h`` with ``mu |v| = eps`` is
    solved by bisection in ``mu``; the component of ``h`` outside the range
    of ``K*`` enters as ``h_perp / mu``.
    """
    sp = gramian_svd(ctx, vectors=True)
    sv = sp.values
    V = sp.modes.reshape(len(sv), -1)
    shape = ctx.h.shape
    hc = np.array([ctx.inner(ctx.h, V[k].reshape(shape)) for k in range(len(sv))])
    hp = ctx.h - (hc @ V).reshape(shape)
    nhp = ctx.norm(hp)

    def err(lm):
        mu = np.exp(lm)
        return np.sqrt(np.sum((mu * hc / (sv**2 + mu)) ** 2) + nhp**2) - ctx.eps

    mu = np.exp(brentq(err, -60.0, 30.0, xtol=1e-14))
    return ((hc / (sv**2 + mu)) @ V).reshape(shape) + hp / mu


@pytest.mark.parametrize("rel", [0.5, 0.25])
def test_minimizer_matches_secular_reference(ctx65, rel):
    c = _rel_eps(ctx65, rel)
    res = minimize(c)
    ref = _secular_reference(c)
    assert res.converged
    assert c.norm(res.v - ref) <= 1e-6 * c.norm(ref)


@pytest.mark.parametrize("rel", [0.5, 0.25, 0.125])
def test_certificates(ctx129, rel):
    c = _rel_eps(ctx129, rel)
    res = minimize(c)
    assert res.converged
    assert res.error <= c.eps * (1 + 10 * c.optimizer.tol)
    assert res.identity_gap <= 1e-6
    assert res.cost_gap <= 1e-6
    assert res.optimality_residual <= 1e-6
    chk = verify_approximation(res, c)
    assert chk.within_eps
    assert chk.error == pytest.approx(res.error, rel=1e-8)
    assert chk.weak_residual <= chk.error + 1e-10


def test_fista_certifies_at_half(ctx129):
    c = _rel_eps(ctx129, 0.5)
    cf = ControlConfig(c.operator, c.partition, c.time, c.target, c.eps, optimizer=OptimizerSettings(method="fista", max_iter=5000))
    a = minimize(cf)
    b = minimize(c)
    assert a.converged and a.method == "fista"
    assert a.error <= c.eps * (1 + 10 * c.optimizer.tol)
    assert c.norm(a.v - b.v) <= 1e-3 * c.norm(b.v)


def test_reachable_target_cost_bound(op129, part129, time32):
    # h = P(eta g0): the dual problem is min |w| subject to |K* w - h| <= eps,
    # and w = -g0 is feasible with zero error, so cost <= |g0|
    tmp = ControlConfig(op129, part129, time32, make_target("cos2", part129, time32), 1.0)
    x = part129.grid.axis
    g0 = np.zeros((time32.m + 1, part129.grid.num_nodes))
    g0[:, part129.control] = np.sin(np.pi * (x[part129.control] - 1.5))[None, :] * (1 + time32.levels[:, None])
    u = solve_heat(HeatProblem(op129, part129, time32, exterior=tmp.cutoff.values[None, :] * g0)).values
    h = np.where(part129.interior[None, :], u, 0.0)
    # the vanishing class only gates the configuration, not the duality bound
    tgt = Target(SpaceTimeField(h, part129.grid, time32), "reachable", True, True)
    c = ControlConfig(op129, part129, time32, tgt, 1.0)
    c = c.with_eps(0.1 * c.norm(c.h))
    res = minimize(c)
    g0n = float(np.sqrt(np.dot(c.level_weights, np.sum(g0[:, part129.control] ** 2, axis=1))))
    f0n = float(np.sqrt(np.dot(c.level_weights, np.sum((c.eta_w * g0[:, part129.control]) ** 2, axis=1))))
    assert res.converged
    assert res.error <= c.eps * (1 + 10 * c.optimizer.tol)
    assert res.cost <= g0n * (1 + 1e-8)
    assert res.cost <= 10.0 * f0n


def test_control_supported_in_W_and_vanishes_at_edges(ctx129):
    c = _rel_eps(ctx129, 0.25)
    res = minimize(c)
    f = control_field(res.v, c).values
    np.testing.assert_array_equal(f, res.control.values)
    p = c.partition
    assert not np.any(f[:, ~p.control])
    edge = c.cutoff.values == 0.0
    assert not np.any(f[:, edge])


@pytest.mark.slow
@pytest.mark.parametrize("rel", [0.5, 0.25])
def test_control_second_differences_bounded_under_refinement(rel):
    ratios = []
    for n in (129, 257):
        g = build_grid(1, 4.0, n)
        p = partition(g, [(1.5, 2.5)])
        tg = TimeGrid(32)
        c = _rel_eps(ControlConfig(assemble(g, 0.5), p, tg, make_target("cos2", p, tg), 1.0), rel)
        res = minimize(c)
        assert res.converged
        fw = res.control.values[:, p.control]
        d2 = np.abs(np.diff(fw, 2, axis=1)).max() / g.spacing**2
        ratios.append(d2 / c.norm(res.v))
    assert max(ratios) <= 10.0
    assert ratios[1] <= 2.0 * ratios[0]


def test_cost_sweep_monotone(ctx65):
    hn = ctx65.norm(ctx65.h)
    rows = []
    sw = cost_sweep(ctx65, [2 * hn, hn, 0.5 * hn, 0.25 * hn], on_row=rows.append)
    cost = sw.column("cost")
    assert len(rows) == 4
    assert cost[0] == 0.0 and cost[1] == 0.0
    assert np.all(np.diff(cost) >= 0)
    assert sw.fit is not None and sw.fit["b"] >= 0
    assert np.all(sw.column("error") <= sw.column("eps") * (1 + 1e-7))
    with pytest.raises(ValueError):
        cost_sweep(ctx65, [0.1, 0.2])


def test_fit_cost_law_recovers_exact_law():
    eps = np.array([1.0, 0.5, 0.25, 0.125, 0.0625])
    cost = np.exp(0.3 + 0.7 * eps ** (-1.0))
    fit = fit_cost_law(eps, cost, sigma_grid=np.linspace(0.5, 1.5, 11))
    assert fit["sigma"] == pytest.approx(1.0)
    assert fit["a"] == pytest.approx(0.3, abs=1e-10)
    assert fit["b"] == pytest.approx(0.7, abs=1e-10)
    assert fit_cost_law(eps, np.zeros_like(eps)) is None


def test_gramian_properties(ctx65):
    sp = gramian_svd(ctx65, vectors=True)
    sv = sp.values
    assert np.all(sv > 0)
    assert np.all(np.diff(sv) <= 0)
    # theta = 1 leaves the initial level inactive on both sides
    assert sp.dropped_cols == ctx65.partition.num_interior
    k = 8
    M = sp.modes[:k]
    G = np.array([[ctx65.inner(M[i], M[j]) for j in range(k)] for i in range(k)])
    np.testing.assert_allclose(G, np.eye(k), atol=1e-10)
    for i in range(k):
        Kv = apply_K(M[i], ctx65)
        nrm = np.sqrt(np.dot(ctx65.level_weights, np.sum(Kv * Kv, axis=1)))
        assert nrm == pytest.approx(sv[i], rel=1e-8)
    with pytest.raises(ValueError):
        gramian_svd(ctx65, budget=10)


def test_config_validation(op129, part129, time32):
    sine = make_target("sine", part129, time32)
    with pytest.raises(ValueError, match="H2_0"):
        ControlConfig(op129, part129, time32, sine, 0.1, kind="wave")
    cos2 = make_target("cos2", part129, time32)
    with pytest.raises(ValueError):
        ControlConfig(op129, part129, time32, cos2, 0.0)
    with pytest.raises(ValueError):
        ControlConfig(op129, part129, time32, cos2, 0.1, kind="schrodinger")
    with pytest.raises(ValueError):
        OptimizerSettings(method="newton")
    with pytest.raises(ValueError):
        make_target("nope", part129, time32)
    # a field that is nonzero at the final level is not H1_0
    vals = np.zeros((time32.m + 1, part129.grid.num_nodes))
    vals[:, part129.interior] = 1.0
    t = target_from_field(SpaceTimeField(vals, part129.grid, time32), part129)
    assert not t.h1_0
    with pytest.raises(ValueError):
        ControlConfig(op129, part129, time32, t, 0.1)


@pytest.fixture(scope="module")
def strip129(grid129):
    return make_strip(grid129)


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_auxiliary_gap(grid129, part129, strip129, s):
    tg = TimeGrid(16)
    op = assemble(grid129, s)
    c = ControlConfig(op, part129, tg, make_target("cos2", part129, tg), 1.0)
    c = _rel_eps(c, 0.5)
    res = minimize(c)
    cs = calibrate_cs(s, strip129)
    z = auxiliary_functional_gap(c, np.zeros_like(c.h), 0.1, strip129, cs)
    assert (z.lhs, z.shift) == (0.0, 0.0)
    deltas = np.array([0.4, 0.2, 0.1, 0.05, 0.025])
    gaps = [auxiliary_functional_gap(c, res, d, strip129, cs) for d in deltas]
    assert all(g.lhs == pytest.approx(0.5 * c.eps * c.norm(res.v)) for g in gaps)
    # the shift is an upper-bounded perturbation that vanishes at least like delta^min(s, 1-s)
    slope = np.polyfit(np.log(deltas), np.log(np.abs([g.shift for g in gaps])), 1)[0]
    assert slope >= min(s, 1 - s)
    ref = reference_delta(c)
    assert 0 < ref < 0.5
    assert auxiliary_functional_gap(c, res, ref, strip129, cs).holds
    assert all(g.holds for g in gaps if g.delta <= ref)


def test_auxiliary_gap_rejects(ctx129, grid129):
    with pytest.raises(ValueError):
        auxiliary_functional_gap(ctx129, np.zeros_like(ctx129.h), 0.6)
    g = build_grid(1, 4.0, 129)
    p = partition(g, [(1.5, 2.5)])
    tg = TimeGrid(16)
    w = ControlConfig(assemble(g, 0.5), p, tg, make_target("cos2", p, tg), 0.1, kind="wave")
    with pytest.raises(ValueError):
        auxiliary_functional_gap(w, np.zeros_like(w.h), 0.1)


def test_wave_control_reaches_half(op129, part129, time32):
    c = ControlConfig(op129, part129, time32, make_target("cos2", part129, time32), 1.0, kind="wave")
    c = _rel_eps(c, 0.5)
    res = minimize(c)
    assert res.converged
    assert verify_approximation(res, c).within_eps
