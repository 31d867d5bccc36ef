"""Config-driven experiment runner.

Every subcommand reads one INI file, validates it completely, runs the
pipeline and writes CSV/JSON artifacts plus ``manifest.json`` into the output
directory.  Wall time goes to ``timing.json`` so that everything else is
reproducible bit for bit.

Config sections and keys::

    [grid]       d, L, n
    [time]       m
    [operator]   s, equation (heat | wave), theta
    [regions]    W = a b[, a b ...]          (1D intervals)
    [target]     profile (cos2 | sine) | csv, amplitude, h2_0,
                 eps | eps_rel, eps_list | eps_list_rel
    [optimizer]  method (krylov | fista), max_iter, tol, cert_tol
    [extension]  levels, height, grading, lateral_factor, delta_list, ell,
                 draws, delta
    [output]     directory, dump_matrix
    [run]        seed

Exit codes: 0 success, 2 config validation, 3 non-convergence, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import platform
import sys
import time as _time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, _kernels

log = logging.getLogger("fraccontrol")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONV, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = ("operator", "control", "sweep", "gramian", "extension-check", "smallness")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class NonConvergence(RuntimeError):
    """A run finished without its optimality certificate."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    d: int
    L: float
    n: int
    m: int
    s: float
    equation: str
    theta: float
    W: list | None
    target: dict
    optimizer: dict
    extension: dict | None
    out: Path
    seed: int
    dump_matrix: bool
    text: str = field(repr=False, default="")

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()


def _get(cp, section, key, conv, default=None, required=False):
    if not cp.has_option(section, key):
        if required:
            raise ConfigError(f"[{section}] {key} is required")
        return default
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None


def _floats(raw: str) -> list[float]:
    return [float(x) for x in raw.replace(",", " ").split()]


def _intervals(raw: str) -> list[tuple[float, float]]:
    out = []
    for part in raw.split(","):
        vals = [float(x) for x in part.split()]
        if len(vals) != 2:
            raise ValueError(f"interval {part.strip()!r} needs two endpoints")
        if vals[0] >= vals[1]:
            raise ValueError(f"interval {part.strip()!r} is empty")
        out.append((vals[0], vals[1]))
    return out


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "yes", "true", "on"):
        return True
    if v in ("0", "no", "false", "off"):
        return False
    raise ValueError("expected yes/no")


def load_config(path, out: str | None = None, seed: int | None = None) -> ExperimentConfig:
    """Parse and validate the scalar content of a config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    text = path.read_text()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    d = _get(cp, "grid", "d", int, 1)
    L = _get(cp, "grid", "L", float, 4.0)
    n = _get(cp, "grid", "n", int, 257)
    m = _get(cp, "time", "m", int, 64)
    s = _get(cp, "operator", "s", float, required=True)
    equation = _get(cp, "operator", "equation", str, "heat").strip().lower()
    theta = _get(cp, "operator", "theta", float, 1.0)
    if d not in (1, 2):
        raise ConfigError(f"[grid] d must be 1 or 2, got {d}")
    if n % 2 == 0 or n < 17:
        raise ConfigError(f"[grid] n must be odd and >= 17, got {n}")
    if not L > 1:
        raise ConfigError(f"[grid] L must exceed 1, got {L}")
    if m < 2:
        raise ConfigError(f"[time] m must be >= 2, got {m}")
    if not 0 < s < 1:
        raise ConfigError(f"[operator] s must lie in (0, 1), got {s}")
    if equation not in ("heat", "wave"):
        raise ConfigError(f"[operator] equation must be heat or wave, got {equation!r}")
    if not 0.5 <= theta <= 1.0:
        raise ConfigError(f"[operator] theta must lie in [1/2, 1], got {theta}")
    W = _get(cp, "regions", "W", _intervals) if cp.has_section("regions") else None

    target = {
        "profile": _get(cp, "target", "profile", str, None),
        "csv": _get(cp, "target", "csv", str, None),
        "amplitude": _get(cp, "target", "amplitude", float, 1.0),
        "h2_0": _get(cp, "target", "h2_0", _bool, False),
        "eps": _get(cp, "target", "eps", float, None),
        "eps_rel": _get(cp, "target", "eps_rel", float, None),
        "eps_list": _get(cp, "target", "eps_list", _floats, None),
        "eps_list_rel": _get(cp, "target", "eps_list_rel", _floats, None),
    }
    if target["csv"] is not None and not Path(target["csv"]).is_absolute():
        target["csv"] = str((path.parent / target["csv"]).resolve())
    optimizer = {
        "method": _get(cp, "optimizer", "method", str, "krylov").strip().lower(),
        "max_iter": _get(cp, "optimizer", "max_iter", int, 2000),
        "tol": _get(cp, "optimizer", "tol", float, 1e-8),
        "cert_tol": _get(cp, "optimizer", "cert_tol", float, 1e-6),
    }
    if optimizer["method"] not in ("krylov", "fista"):
        raise ConfigError(f"[optimizer] method must be krylov or fista, got {optimizer['method']!r}")
    if optimizer["max_iter"] < 1 or not optimizer["tol"] > 0 or not optimizer["cert_tol"] > 0:
        raise ConfigError("[optimizer] max_iter, tol and cert_tol must be positive")
    extension = None
    if cp.has_section("extension"):
        extension = {
            "levels": _get(cp, "extension", "levels", int, 128),
            "height": _get(cp, "extension", "height", float, None),
            "grading": _get(cp, "extension", "grading", float, None),
            "lateral_factor": _get(cp, "extension", "lateral_factor", float, 3.0),
            "delta_list": _get(cp, "extension", "delta_list", _floats, None),
            "ell": _get(cp, "extension", "ell", float, 0.5),
            "draws": _get(cp, "extension", "draws", int, 10),
            "delta": _get(cp, "extension", "delta", float, None),
        }
    directory = _get(cp, "output", "directory", str, "out")
    if out is not None:
        directory = out
    # relative directories resolve against the working directory
    outdir = Path(directory)
    dump = _get(cp, "output", "dump_matrix", _bool, False)
    cfg_seed = _get(cp, "run", "seed", int, 0)
    if seed is not None:
        cfg_seed = seed
    return ExperimentConfig(
        d=d, L=L, n=n, m=m, s=s, equation=equation, theta=theta, W=W, target=target,
        optimizer=optimizer, extension=extension, out=outdir, seed=int(cfg_seed), dump_matrix=dump, text=text,
    )


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else repr(x)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")


def _versions() -> dict:
    import scipy

    out = {"fraccontrol": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}
    try:
        import numba

        out["numba"] = numba.__version__
    except ImportError:  # pragma: no cover
        out["numba"] = None
    out["kernel_backend"] = _kernels.backend()
    return out


def write_manifest(cfg: ExperimentConfig, command: str, outputs: list[str], status: str) -> None:
    digests = {}
    for name in sorted(outputs):
        digests[name] = hashlib.sha256((cfg.out / name).read_bytes()).hexdigest()
    write_json(
        cfg.out / "manifest.json",
        {
            "command": command,
            "config_sha256": cfg.sha256,
            "config": cfg.text,
            "seed": cfg.seed,
            "versions": _versions(),
            "outputs": digests,
            "status": status,
        },
    )


# ---------------------------------------------------------------------------
# setup shared by the pipelines
# ---------------------------------------------------------------------------


def _grid(cfg):
    from .lattice import build_grid

    return build_grid(cfg.d, cfg.L, cfg.n)


def _partition(cfg, grid):
    from .lattice import partition

    if not cfg.W:
        raise ConfigError("[regions] W is required for this command")
    try:
        return partition(grid, cfg.W)
    except ValueError as exc:
        raise ConfigError(f"[regions] W: {exc}") from None


def _control_context(cfg, need_eps=True):
    from .control import ControlConfig, OptimizerSettings, make_target, target_from_field
    from .fracops import assemble
    from .lattice import SpaceTimeField, TimeGrid

    grid = _grid(cfg)
    part = _partition(cfg, grid)
    tg = TimeGrid(cfg.m)
    t = cfg.target
    if t["profile"] is None and t["csv"] is None:
        raise ConfigError("[target] needs profile or csv")
    try:
        if t["csv"] is not None:
            fld = SpaceTimeField.from_csv(t["csv"], grid, tg)
            target = target_from_field(fld, part, name=Path(t["csv"]).name, h2_0=t["h2_0"])
        else:
            target = make_target(t["profile"], part, tg, t["amplitude"])
    except (ValueError, OSError) as exc:
        raise ConfigError(f"[target]: {exc}") from None
    op = assemble(grid, cfg.s)
    opt = OptimizerSettings(
        method=cfg.optimizer["method"], max_iter=cfg.optimizer["max_iter"], tol=cfg.optimizer["tol"], cert_tol=cfg.optimizer["cert_tol"]
    )
    try:
        ctx = ControlConfig(op, part, tg, target, eps=1.0, kind=cfg.equation, theta=cfg.theta, optimizer=opt, seed=cfg.seed)
    except ValueError as exc:
        msg = str(exc)
        if "H2_0" in msg:
            msg += " (the wave approximation result assumes an H2_0 target)"
        raise ConfigError(f"[target]: {msg}") from None
    hn = ctx.norm(ctx.h)
    if need_eps:
        if t["eps"] is None and t["eps_rel"] is None:
            raise ConfigError("[target] eps (or eps_rel) is required")
        eps = t["eps"] if t["eps"] is not None else t["eps_rel"] * hn
        if not eps > 0:
            raise ConfigError(f"[target] eps must be positive, got {eps}")
        ctx = ctx.with_eps(eps)
    return ctx


def _strip(cfg, grid):
    from .extension import make_strip

    e = cfg.extension or {}
    try:
        return make_strip(
            grid,
            height=e.get("height"),
            levels=e.get("levels", 128),
            grading=e.get("grading"),
            lateral_factor=e.get("lateral_factor", 3.0),
        )
    except ValueError as exc:
        raise ConfigError(f"[extension]: {exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_operator(cfg: ExperimentConfig) -> list[str]:
    from scipy.linalg import eigh

    from .fracops import assemble, dump_operator, fft_reference_apply, gaussian_reference

    grid = _grid(cfg)
    op = assemble(grid, cfg.s)
    A = op.matrix
    off = A - np.diag(np.diag(A))
    report = {
        "d": cfg.d,
        "L": cfg.L,
        "n": cfg.n,
        "s": cfg.s,
        "c_ns": op.c_ns,
        "symmetry_residual": float(np.max(np.abs(A - A.T))),
        "min_diagonal": float(np.min(np.diag(A))),
        "max_offdiagonal": float(np.max(off)),
    }
    # FFT oracle on exp(-|x|^2) over |x| <= 2
    X = grid.nodes
    r = np.linalg.norm(X, axis=1)
    u = np.exp(-(r**2))
    Au = A @ u
    near = r <= 2.0
    if cfg.d == 1:
        h = grid.spacing
        k = np.arange(-(3 * (grid.n - 1)) // 2, (3 * (grid.n - 1)) // 2 + 1)
        ref_full = fft_reference_apply(np.exp(-((k * h) ** 2)), cfg.s, h)
        lo = int(np.flatnonzero(k == -(grid.n - 1) // 2)[0])
        ref = ref_full[lo : lo + grid.n]
    else:
        ref = gaussian_reference(r, cfg.s, 2)
    report["fft_oracle_error"] = float(np.linalg.norm(Au[near] - ref[near]) / np.linalg.norm(ref[near]))
    # Dirichlet spectrum of the interior block, with a coarser-grid comparison in 1D
    interior = np.flatnonzero(r < 1.0 - 1e-12)
    lam = eigh(A[np.ix_(interior, interior)], eigvals_only=True, subset_by_index=(0, min(4, len(interior) - 1)))
    report["eigenvalues"] = lam
    report["interior_positive_definite"] = bool(lam[0] > 0)
    if cfg.d == 1 and (cfg.n + 1) // 2 >= 17 and ((cfg.n + 1) // 2) % 2 == 1:
        from .lattice import build_grid

        g2 = build_grid(1, cfg.L, (cfg.n + 1) // 2)
        A2 = assemble(g2, cfg.s).matrix
        i2 = np.flatnonzero(np.abs(g2.axis) < 1.0 - 1e-12)
        lam2 = eigh(A2[np.ix_(i2, i2)], eigvals_only=True, subset_by_index=(0, 0))[0]
        report["lambda1_coarse"] = float(lam2)
        report["lambda1_refinement_change"] = float(abs(lam[0] - lam2) / lam[0])
    outputs = ["operator_report.json", "oracle.csv"]
    write_json(cfg.out / "operator_report.json", report)
    cols = [f"x{i}" for i in range(cfg.d)]
    write_csv(cfg.out / "oracle.csv", cols + ["u", "Au", "reference"], (list(x) + [a, b, c] for x, a, b, c in zip(X, u, Au, ref)))
    if cfg.dump_matrix:
        dump_operator(op, cfg.out / "operator")
        outputs += ["operator.npy", "operator.json"]
    return outputs


def _field_csv(path: Path, values, grid, time) -> None:
    from .lattice import SpaceTimeField

    SpaceTimeField(np.asarray(values), grid, time).to_csv(path)


def cmd_control(cfg: ExperimentConfig) -> list[str]:
    from .control import auxiliary_functional_gap, minimize, reference_delta, verify_approximation

    ctx = _control_context(cfg)
    aux_delta = None
    if cfg.extension is not None and ctx.kind == "heat":
        strip = _strip(cfg, ctx.partition.grid)
        aux_delta = cfg.extension["delta"]
        if aux_delta is not None and not 0 < aux_delta < 0.5:
            raise ConfigError(f"[extension] delta must lie in (0, 1/2), got {aux_delta}")
    res = minimize(ctx)
    chk = verify_approximation(res, ctx)
    out = {
        "equation": ctx.kind,
        "s": cfg.s,
        "result": res.summary(),
        "verification": {"error": chk.error, "weak_residual": chk.weak_residual, "within_eps": chk.within_eps},
    }
    if aux_delta is not None or (cfg.extension is not None and ctx.kind == "heat"):
        d = aux_delta if aux_delta is not None else reference_delta(ctx)
        d = min(d, 0.49)
        gap = auxiliary_functional_gap(ctx, res, d, strip)
        out["auxiliary_gap"] = gap.as_dict()
    grid, tg = ctx.partition.grid, ctx.time
    write_json(cfg.out / "control.json", out)
    res.control.to_csv(cfg.out / "control.csv")
    resid = np.zeros((tg.m + 1, grid.num_nodes))
    resid[:, ctx.partition.interior] = res.state - ctx.h
    _field_csv(cfg.out / "residual.csv", resid, grid, tg)
    keys = sorted({k for row in res.history for k in row})
    write_csv(cfg.out / "history.csv", keys, ([row.get(k, "") for k in keys] for row in res.history))
    outputs = ["control.json", "control.csv", "residual.csv", "history.csv"]
    if not res.converged:
        raise NonConvergence(f"minimizer not certified (optimality residual {res.optimality_residual:.3g}); best iterate saved", outputs)
    return outputs


def cmd_sweep(cfg: ExperimentConfig) -> list[str]:
    from .control import cost_sweep

    ctx = _control_context(cfg, need_eps=False)
    t = cfg.target
    hn = ctx.norm(ctx.h)
    if t["eps_list"] is not None:
        eps_list = list(t["eps_list"])
    elif t["eps_list_rel"] is not None:
        eps_list = [e * hn for e in t["eps_list_rel"]]
    else:
        raise ConfigError("[target] eps_list (or eps_list_rel) is required for sweep")
    if not eps_list or any(e <= 0 for e in eps_list):
        raise ConfigError("[target] eps_list must hold positive values")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigError("[target] eps_list must be strictly decreasing")
    header = ["eps", "cost", "error", "iterations", "functional", "converged"]
    path = cfg.out / "sweep.csv"
    fh = open(path, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)

    def flush(row):
        w.writerow([_fmt(row[k]) for k in header])
        fh.flush()

    try:
        sw = cost_sweep(ctx, eps_list, on_row=flush)
    finally:
        fh.close()
    cost = sw.column("cost")
    summary = {
        "equation": ctx.kind,
        "target_norm": sw.target_norm,
        "target_norm_" + sw.regularity.lower(): sw.target_norm_h,
        "fit": sw.fit,
        "monotone_cost": bool(np.all(np.diff(cost) >= 0)),
        "rows": sw.rows,
    }
    write_json(cfg.out / "sweep.json", summary)
    outputs = ["sweep.csv", "sweep.json"]
    if not all(r["converged"] for r in sw.rows):
        raise NonConvergence("sweep contains non-converged rows; fit skipped", outputs)
    return outputs


def cmd_gramian(cfg: ExperimentConfig) -> list[str]:
    from .control import gramian_svd

    ctx = _control_context(cfg, need_eps=False)
    dim = (ctx.time.m + 1) * ctx.partition.num_interior
    if dim > 4096:
        raise ConfigError(f"Gramian dimension {dim} exceeds 4096; coarsen [grid] n or [time] m")
    G = gramian_svd(ctx)
    nv = G.normalized
    write_csv(cfg.out / "gramian.csv", ["k", "sigma", "normalized"], ((k, a, b) for k, (a, b) in enumerate(zip(G.values, nv))))
    write_json(
        cfg.out / "gramian.json",
        {
            "modes": len(G.values),
            "dropped_rows": G.dropped_rows,
            "dropped_cols": G.dropped_cols,
            "all_positive": bool(np.all(G.values > 0)),
            "first_below_1e-4": G.first_below(1e-4),
            "first_below_1e-8": G.first_below(1e-8),
            "sigma_1": G.values[0],
        },
    )
    return ["gramian.csv", "gramian.json"]


def cmd_extension_check(cfg: ExperimentConfig) -> list[str]:
    from .extension import (
        _VALIDATION_BUMP,
        calibrate_cs,
        calibration_residual,
        classical_cs,
        energy_pairing,
        fft_reference_on_grid,
        gaussian_bump,
        neumann_trace,
        solve_extension,
    )
    from .fracops import assemble

    if cfg.d != 1:
        raise ConfigError("[grid] d must be 1 for the extension check")
    grid = _grid(cfg)
    strip = _strip(cfg, grid)
    op = assemble(grid, cfg.s)
    c, w = _VALIDATION_BUMP
    x = grid.axis
    v = gaussian_bump(x, c, w)
    cs = calibrate_cs(cfg.s, strip)
    ext = solve_extension(v, cfg.s, strip)
    tr = neumann_trace(ext, cs)
    direct = op.matrix @ v
    fft = fft_reference_on_grid(lambda z: gaussian_bump(z, c, w), grid, cfg.s)
    near = np.abs(x) <= 2.0
    err_op = float(np.linalg.norm(tr[near] - direct[near]) / np.linalg.norm(direct[near]))
    err_fft = float(np.linalg.norm(tr[near] - fft[near]) / np.linalg.norm(fft[near]))
    rng = np.random.default_rng(cfg.seed)
    vr = np.zeros_like(x)
    inside = np.abs(x) < 1.0
    vr[inside] = rng.standard_normal(inside.sum())
    pair, energy = energy_pairing(solve_extension(vr, cfg.s, strip))
    report = {
        "s": cfg.s,
        "c_s_calibrated": cs,
        "c_s_classical": classical_cs(cfg.s),
        "calibration_residual": calibration_residual(cfg.s, strip),
        "trace_vs_operator": err_op,
        "trace_vs_fft": err_fft,
        "energy_ratio": pair / energy,
        "strip": {"levels": strip.levels, "height": strip.height, "grading": strip.grading, "lateral": strip.lateral},
    }
    write_json(cfg.out / "extension.json", report)
    write_csv(cfg.out / "extension.csv", ["x", "datum", "trace", "operator", "fft"], zip(x, v, tr, direct, fft))
    return ["extension.json", "extension.csv"]


def cmd_smallness(cfg: ExperimentConfig) -> list[str]:
    from .extension import SmallnessSetup, ensemble_fit, smallness_report
    from .fracops import assemble
    from .lattice import TimeGrid

    e = cfg.extension
    if e is None:
        raise ConfigError("[extension] section is required for smallness")
    if not e["delta_list"]:
        raise ConfigError("[extension] delta_list must not be empty")
    if any(not 0 < d < 1 for d in e["delta_list"]):
        raise ConfigError("[extension] delta_list values must lie in (0, 1)")
    if not 0 < e["ell"] <= 1:
        raise ConfigError(f"[extension] ell must lie in (0, 1], got {e['ell']}")
    if e["draws"] < 2:
        raise ConfigError("[extension] draws must be >= 2")
    if cfg.d != 1:
        raise ConfigError("[grid] d must be 1 for smallness diagnostics")
    grid = _grid(cfg)
    part = _partition(cfg, grid)
    strip = _strip(cfg, grid)
    tg = TimeGrid(cfg.m)
    setup = SmallnessSetup(assemble(grid, cfg.s), part, tg, strip, theta=cfg.theta)
    rng = np.random.default_rng(cfg.seed)
    reports = []
    rows = []
    for k in range(e["draws"]):
        v = np.zeros((tg.m + 1, grid.num_nodes))
        v[:, part.interior] = rng.standard_normal((tg.m + 1, part.num_interior))
        rep = smallness_report(v, e["delta_list"], e["ell"], setup)
        reports.append(rep)
        for d, t, f, nchain in zip(rep.deltas, rep.trace_norm, rep.flux_norm, rep.chain_length):
            rows.append((k, d, t, f, rep.boundary_norm, rep.source_norm, nchain))
    fit = ensemble_fit(reports)
    write_csv(cfg.out / "smallness.csv", ["draw", "delta", "trace_norm", "flux_norm", "boundary_norm", "source_norm", "chain_length"], rows)
    write_json(cfg.out / "smallness.json", {"c_s": setup.c_s, "ensemble": fit, "reports": [r.as_dict() for r in reports]})
    return ["smallness.csv", "smallness.json"]


HANDLERS = {
    "operator": cmd_operator,
    "control": cmd_control,
    "sweep": cmd_sweep,
    "gramian": cmd_gramian,
    "extension-check": cmd_extension_check,
    "smallness": cmd_smallness,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (e.g. ``heat_s05.cfg``)."""
    return Path(str(resources.files("fraccontrol") / "configs" / name))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fraccontrol", description="Exterior control experiments for fractional heat/wave equations.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="INI config file (or the name of a bundled config)")
    p.add_argument("--out", default=None, help="output directory (overrides [output] directory)")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (overrides [run] seed)")
    p.add_argument("--verbose", "-v", action="store_true")
    return p


def run(command: str, config, out=None, seed=None) -> int:
    """Run one subcommand; returns the exit code."""
    try:
        path = Path(config)
        if not path.is_file() and bundled_config(str(config)).is_file():
            path = bundled_config(str(config))
        cfg = load_config(path, out=out, seed=seed)
        cfg.out.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    t0 = _time.perf_counter()
    code, status, outputs = EXIT_OK, "ok", []
    try:
        outputs = HANDLERS[command](cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NonConvergence as exc:
        msg, outputs = exc.args
        log.error("non-convergence: %s", msg)
        code, status = EXIT_NONCONV, "non-converged"
    except (ValueError, RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s: %s", type(exc).__name__, exc)
        return EXIT_NUMERIC
    write_manifest(cfg, command, outputs, status)
    write_json(cfg.out / "timing.json", {"wall_time_s": _time.perf_counter() - t0})
    log.info("%s finished (%s); artifacts in %s", command, status, cfg.out)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    return run(args.command, args.config, args.out, args.seed)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
