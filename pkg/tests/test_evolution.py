import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from conftest import random_control, random_interior
from fraccontrol.evolution import (
    HeatProblem,
    WaveProblem,
    duality_residual,
    energy_report,
    solve_heat,
    solve_heat_galerkin,
    solve_wave,
    wave_energy,
    wave_states,
)
from fraccontrol.fracops import assemble, dirichlet_spectrum
from fraccontrol.lattice import TimeGrid, build_grid, partition


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_zero_data_gives_zero(op129, part129, time32):
    u = solve_heat(HeatProblem(op129, part129, time32))
    assert not np.any(u.values)
    phi = solve_heat(HeatProblem(op129, part129, time32, direction="adjoint"))
    assert not np.any(phi.values)
    w = solve_wave(WaveProblem(op129, part129, time32))
    assert not np.any(w.values)


def test_validation(op129, part129, time32, rng):
    bad = random_interior(rng, part129, time32)
    with pytest.raises(ValueError):
        HeatProblem(op129, part129, time32, exterior=bad)
    with pytest.raises(ValueError):
        HeatProblem(op129, part129, time32, source=random_control(rng, part129, time32))
    with pytest.raises(ValueError):
        HeatProblem(op129, part129, time32, direction="sideways")
    with pytest.raises(ValueError):
        HeatProblem(op129, part129, time32, theta=0.3)
    with pytest.raises(ValueError):
        HeatProblem(op129, part129, time32, exterior=random_control(rng, part129, time32), direction="adjoint")
    with pytest.raises(ValueError):
        HeatProblem(op129, part129, time32, source=np.zeros((5, 3)))


@pytest.mark.parametrize("theta", [1.0, 0.5])
def test_exterior_constraint_exact(op129, part129, time32, rng, theta):
    f = random_control(rng, part129, time32)
    u = solve_heat(HeatProblem(op129, part129, time32, exterior=f, theta=theta)).values
    np.testing.assert_array_equal(u[:, part129.control], f[:, part129.control])
    assert not np.any(u[:, part129.zero])
    # initial level carries the exterior datum and zero on B
    assert not np.any(u[0, part129.interior])


def test_wave_exterior_constraint_exact(op129, part129, time32, rng):
    f = random_control(rng, part129, time32)
    u = solve_wave(WaveProblem(op129, part129, time32, exterior=f)).values
    np.testing.assert_array_equal(u[:, part129.control], f[:, part129.control])
    assert not np.any(u[:, part129.zero])


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-2, 2), b=st.floats(-2, 2))
def test_superposition(op129, part129, time32, seed, a, b):
    r = np.random.default_rng(seed)
    f1, f2 = random_control(r, part129, time32), random_control(r, part129, time32)
    F1, F2 = random_interior(r, part129, time32), random_interior(r, part129, time32)

    def run(f, F):
        return solve_heat(HeatProblem(op129, part129, time32, exterior=f, source=F)).values

    lhs = run(a * f1 + b * f2, a * F1 + b * F2)
    rhs = a * run(f1, F1) + b * run(f2, F2)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * max(np.linalg.norm(rhs), 1.0)


def test_dissipative(op129, part129, time32, rng):
    u0 = rng.standard_normal(part129.num_interior)
    u = solve_heat(HeatProblem(op129, part129, time32, initial=u0)).values[:, part129.interior]
    norms = np.linalg.norm(u, axis=1)
    assert np.all(np.diff(norms) <= 1e-14 * norms[0])


def _modal_heat_error(op, part, lam, phi, m, theta):
    tg = TimeGrid(m)
    F = np.zeros((m + 1, part.grid.num_nodes))
    F[:, part.interior] = phi
    u = solve_heat(HeatProblem(op, part, tg, source=F, theta=theta)).values[:, part.interior]
    exact = ((1 - np.exp(-lam * (tg.levels + 1))) / lam)[:, None] * phi[None, :]
    return np.max(np.abs(u - exact)) / np.max(np.abs(exact))


@pytest.mark.parametrize("theta,order", [(1.0, 1.0), (0.5, 2.0)])
def test_heat_modal_closed_form_order(op129, part129, theta, order):
    spec = dirichlet_spectrum(op129, part129, 1)
    lam, phi = spec.eigenvalues[0], spec.vectors[:, 0]
    errs = [_modal_heat_error(op129, part129, lam, phi, m, theta) for m in (16, 32, 64)]
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > order - 0.15)
    assert errs[-1] < (0.05 if order == 1 else 1e-3)


def test_wave_modal_closed_form_order(op129, part129):
    spec = dirichlet_spectrum(op129, part129, 1)
    lam, phi = spec.eigenvalues[0], spec.vectors[:, 0]
    errs = []
    for m in (16, 32, 64):
        tg = TimeGrid(m)
        u = solve_wave(WaveProblem(op129, part129, tg, initial=phi)).values[:, part129.interior]
        exact = np.cos(np.sqrt(lam) * (tg.levels + 1))[:, None] * phi[None, :]
        errs.append(np.max(np.abs(u - exact)) / np.max(np.abs(phi)))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.85)


def test_wave_energy_conserved(op129, part129, rng):
    tg = TimeGrid(64)
    u0 = rng.standard_normal(part129.num_interior)
    w0 = rng.standard_normal(part129.num_interior)
    u, w = wave_states(WaveProblem(op129, part129, tg, initial=u0, velocity=w0))
    E = wave_energy(op129, part129, u, w)
    assert np.max(np.abs(E - E[0])) / E[0] <= 1e-8


@pytest.mark.parametrize("theta", [1.0, 0.5])
def test_galerkin_full_rank_matches_grid(op129, part129, time32, rng, theta):
    K = part129.num_interior
    for direction in ("forward", "adjoint"):
        F = random_interior(rng, part129, time32)
        pb = HeatProblem(op129, part129, time32, source=F, direction=direction, theta=theta)
        a = solve_heat(pb).values
        b = solve_heat_galerkin(pb, K).values
        assert _rel(b, a) <= 1e-8


def test_galerkin_mode_orthogonality(op129, part129, time32):
    spec = dirichlet_spectrum(op129, part129, 2)
    F = np.zeros((time32.m + 1, part129.grid.num_nodes))
    F[:, part129.interior] = spec.vectors[:, 1]
    u = solve_heat_galerkin(HeatProblem(op129, part129, time32, source=F), 1).values
    assert np.max(np.abs(u)) <= 1e-12


def test_galerkin_converges_in_K(op129, part129, time32):
    x = op129.grid.axis
    F = np.zeros((time32.m + 1, op129.grid.num_nodes))
    prof = np.where(part129.interior, np.exp(-4 * (x - 0.2) ** 2) * (1 - x**2), 0.0)
    F[:] = np.sin(np.pi * time32.levels)[:, None] * prof[None, :]
    pb = HeatProblem(op129, part129, time32, source=F)
    ref = solve_heat(pb).values
    errs = [_rel(solve_heat_galerkin(pb, K).values, ref) for K in (2, 4, 8, 16, part129.num_interior - 1)]
    assert np.all(np.diff(errs) < 0)
    with pytest.raises(ValueError):
        solve_heat_galerkin(pb, part129.num_interior + 1)


@pytest.mark.parametrize("theta", [1.0, 0.5])
def test_duality_residual(op129, part129, time32, rng, theta):
    for _ in range(5):
        f = random_control(rng, part129, time32)
        v = random_interior(rng, part129, time32)
        assert duality_residual(f, v, op129, part129, time32, theta) <= 1e-10
    z = np.zeros((time32.m + 1, part129.grid.num_nodes))
    assert duality_residual(z, v, op129, part129, time32) == 0.0
    assert duality_residual(f, z, op129, part129, time32) == 0.0


def test_energy_report_zero(op129, part129, time32):
    pb = HeatProblem(op129, part129, time32)
    rep = energy_report(solve_heat(pb), pb)
    assert all(v == 0.0 for v in rep.as_dict().values())


def test_energy_report_modal_closed_form(op129, part129):
    spec = dirichlet_spectrum(op129, part129, 1)
    lam, phi = spec.eigenvalues[0], spec.vectors[:, 0]
    tg = TimeGrid(256)
    F = np.zeros((tg.m + 1, part129.grid.num_nodes))
    F[:, part129.interior] = phi
    pb = HeatProblem(op129, part129, tg, source=F)
    rep = energy_report(solve_heat(pb), pb)

    def a(t):
        return (1 - np.exp(-lam * (t + 1))) / lam

    def da(t):
        return np.exp(-lam * (t + 1))

    sup = a(1.0)
    hs = np.sqrt((lam + 1) * integrate.quad(lambda t: a(t) ** 2, -1, 1)[0])
    dual = np.sqrt(integrate.quad(lambda t: da(t) ** 2, -1, 1)[0] / lam)
    rhs = np.sqrt(2.0 / lam)
    assert rep.sup_l2 == pytest.approx(sup, rel=0.02)
    assert rep.l2_hs == pytest.approx(hs, rel=0.02)
    assert rep.dt_dual_surrogate == pytest.approx(dual, rel=0.05)
    assert rep.rhs_dual == pytest.approx(rhs, rel=1e-3)
    assert rep.constant == pytest.approx((sup + hs + dual) / rhs, rel=0.03)


def test_energy_constant_uniform_over_draws_and_grids():
    consts = {}
    for n in (129, 257):
        g = build_grid(1, 4.0, n)
        p = partition(g, [(1.5, 2.5)])
        op = assemble(g, 0.5)
        tg = TimeGrid(32)
        r = np.random.default_rng(7)
        cs = []
        for _ in range(20):
            F = random_interior(r, p, tg)
            pb = HeatProblem(op, p, tg, source=F)
            rep = energy_report(solve_heat(pb), pb)
            assert all(np.isfinite(v) and v >= 0 for v in rep.as_dict().values())
            cs.append(rep.constant)
        consts[n] = np.array(cs)
    allc = np.concatenate(list(consts.values()))
    assert allc.max() / allc.min() < 5.0
    assert consts[257].max() < 2.0 * consts[129].max()
