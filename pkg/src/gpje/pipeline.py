"""check -> init -> solve -> verify -> export orchestration with file artifacts.

Each stage returns (exit_code, report) and writes its artifacts under the
configured output directory.  Exit codes: 0 success, 1 validation failure,
2 runtime failure.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .conditions import check_all, constants_A5
from .config import RunConfig, Setup
from .domains import Grid, build_grid
from .dualmaps import dual_yz, solve_duals, Jet1
from .gconvex import ConstructionError, prepare_initial
from .genfun import QuadraticOT, Reflection, Refraction
from .solver import HomotopyParams, HomotopySolver, Problem, SolverError, image_orientation
from .verify import VerifyError, _cell_integral, pushforward_histogram, trace_field

log = logging.getLogger(__name__)

OK, INVALID, RUNTIME = 0, 1, 2


class StageError(RuntimeError):
    def __init__(self, msg, code=RUNTIME):
        super().__init__(msg)
        self.code = code


# --------------------------------------------------------------------------
# artifact helpers


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else ("nan" if math.isnan(v) else ("inf" if v > 0 else "-inf"))
    return v


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def read_json(path: Path) -> dict:
    return json.loads(Path(path).read_text())


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def write_field(path: Path, grid: Grid, **fields) -> None:
    header, rows = grid.to_rows(**fields)
    write_csv(path, header, rows)


def read_field(path: Path, grid: Grid, name: str = "u") -> np.ndarray:
    if not Path(path).exists():
        raise StageError(f"missing artifact {path}", RUNTIME)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != grid.size:
        raise StageError(f"{path}: {len(rows)} rows, grid has {grid.size} nodes (re-run init)", INVALID)
    xy = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    if np.abs(xy - grid.points).max() > 1e-9:
        raise StageError(f"{path}: node coordinates do not match the configured grid (re-run init)", INVALID)
    return np.array([float(r[name]) for r in rows])


def _stamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# --------------------------------------------------------------------------
# shared setup


class Context:
    def __init__(self, cfg: RunConfig, seed=None):
        self.cfg = cfg
        self.seed = int(cfg.seed if seed is None else seed)
        self.out = Path(cfg.output_dir)
        self.setup: Setup = cfg.build()
        self.grid = build_grid(self.setup.source, cfg.grid.n_r, cfg.grid.n_theta)

    @property
    def spec(self):
        return self.setup.spec

    def constants(self):
        return constants_A5(self.spec, self.setup.source, self.setup.target, delta=self.cfg.gconvex.delta,
                            seed=self.seed)

    def y0(self):
        g = self.cfg.gconvex
        return np.asarray(g.y0 if g.y0 is not None else self.setup.target.center, float)


# --------------------------------------------------------------------------
# stages


def run_check(cfg: RunConfig, seed=None):
    ctx = Context(cfg, seed)
    c = cfg.checks
    rep = check_all(ctx.spec, ctx.setup.source, ctx.setup.target, tuple(c.window), seed=ctx.seed,
                    n_samples=c.n_samples, tol=c.tol, delta=cfg.gconvex.delta)
    out = rep.to_dict()
    out["config_hash"] = cfg.content_hash()
    out["model"] = ctx.spec.to_dict()
    write_json(ctx.out / "check.json", out)
    return (OK if rep.theorem_hypotheses else INVALID), out


def _check_passed(ctx: Context) -> bool:
    p = ctx.out / "check.json"
    if p.exists():
        rep = read_json(p)
        if rep.get("config_hash") == ctx.cfg.content_hash():
            return bool(rep.get("theorem_hypotheses"))
    code, _ = run_check(ctx.cfg, ctx.seed)
    return code == OK


def run_init(cfg: RunConfig, seed=None, force=False, skip_envelope=False):
    ctx = Context(cfg, seed)
    if not force and not _check_passed(ctx):
        raise StageError("condition check failed (see check.json); use --force to override", INVALID)
    g = cfg.gconvex
    consts = ctx.constants()
    try:
        init = prepare_initial(ctx.spec, ctx.setup.source, ctx.setup.target, ctx.grid, y0=ctx.y0(), z0=g.z0,
                               rho=g.rho, envelope=g.envelope and not skip_envelope, eps_moll=g.eps_moll,
                               t_adj=g.t_adj, n_boundary=g.n_boundary, constants=consts,
                               require_range=g.require_range)
    except ConstructionError as exc:
        raise StageError(f"initial construction: {exc}", INVALID) from exc
    rep = dict(init.report)
    rep.update(config_hash=cfg.content_hash(), constants=consts, skip_envelope=bool(skip_envelope),
               grid={"n_r": ctx.grid.n_r, "n_theta": ctx.grid.n_theta})
    write_field(ctx.out / "u0.csv", ctx.grid, u=init.u, Tu_x=init.Tu[:, 0], Tu_y=init.Tu[:, 1],
                margin=init.margin)
    b = ctx.grid.boundary_index
    write_csv(ctx.out / "omega_star.csv", ["node", "theta", "y1", "y2"],
              [[int(k), float(ctx.grid.theta[ctx.grid.col[k]]), float(init.Tu[k, 0]), float(init.Tu[k, 1])]
               for k in b])
    write_json(ctx.out / "init.json", rep)
    return OK, rep


def mass_factor(ctx: Context):
    """Factor c with integral(f) = c * integral(f*) (quadrature on both domains)."""
    src = float(_cell_integral(ctx.grid, ctx.setup.f).sum())
    tg = Grid(ctx.setup.target, max(16, ctx.cfg.grid.n_r), max(16, ctx.cfg.grid.n_theta))
    tgt = float(_cell_integral(tg, ctx.setup.f_star).sum())
    return src / tgt, src, tgt


def build_problem(ctx: Context):
    factor, src, tgt = mass_factor(ctx)
    fs = ctx.setup.f_star
    f_star = (lambda y: factor * np.asarray(fs(y), float)) if abs(factor - 1) > 0 else fs
    consts = ctx.constants()
    K0 = consts["K0"] if ctx.cfg.homotopy.grad_guard else np.inf
    tc = np.asarray(ctx.setup.target.center, float)
    pb = Problem(ctx.spec, ctx.grid, ctx.setup.source, ctx.setup.target, ctx.setup.f, f_star, K0=K0,
                 target_center=tc)
    return pb, {"mass_factor": factor, "source_mass": src, "target_mass": tgt, "constants": consts}


def homotopy_params(cfg: RunConfig) -> HomotopyParams:
    h = cfg.homotopy
    return HomotopyParams(tau=h.tau, tau_safety=h.tau_safety, eps0=h.eps0, eps_factor=h.eps_factor,
                          eps_min=h.eps_min, dt0=h.dt0, dt_min=h.dt_min, newton_tol=h.newton_tol,
                          max_newton=h.max_newton, delta_min=h.delta_min, pin=h.pin,
                          anchor_value=h.anchor_value)


def _trace_rows(trace):
    keys = ["phase", "t", "eps", "dt", "newton_iters", "res_interior", "res_boundary", "min_lambda",
            "min_oblique", "clamps", "penalty", "max_grad", "lam", "accepted", "note"]
    return keys, [[r.get(k) for k in keys] for r in trace]


def run_solve(cfg: RunConfig, seed=None):
    ctx = Context(cfg, seed)
    u0 = read_field(ctx.out / "u0.csv", ctx.grid)
    pb, meta = build_problem(ctx)
    prm = homotopy_params(cfg)
    t0 = time.perf_counter()
    try:
        solver = HomotopySolver(pb, prm, u0)
    except SolverError as exc:
        raise StageError(f"solver setup: {exc}") from exc
    if prm.pin == "anchor" and prm.anchor_value is None and ctx.setup.manufactured is not None:
        prm.anchor_value = float(solver.anchor_w @ ctx.setup.manufactured.field.value(ctx.grid.points))
    try:
        st = solver.solve()
    except SolverError as exc:
        write_csv(ctx.out / "trace.csv", *_trace_rows(exc.trace))
        write_json(ctx.out / "solve.json", {"status": "failed", "error": str(exc),
                                            "config_hash": cfg.content_hash(), **meta})
        raise StageError(f"solver: {exc}") from exc
    wall = time.perf_counter() - t0
    Du = solver.ops.gradient(st.u)
    d = solve_duals(ctx.spec, Jet1(ctx.grid.points, st.u, Du), strict=False)
    lam_min = np.linalg.eigvalsh(ctx.grid.operators().hessian(st.u) - d.A)[:, 0]
    orient = image_orientation(ctx.grid, d.Y)
    write_field(ctx.out / "solution.csv", ctx.grid, u=st.u, Du_x=Du[:, 0], Du_y=Du[:, 1], Tu_x=d.Y[:, 0],
                Tu_y=d.Y[:, 1], margin=lam_min)
    write_csv(ctx.out / "trace.csv", *_trace_rows(solver.trace))
    out = {"status": "converged", "config_hash": cfg.content_hash(), "tau": solver.tau,
           "eps_schedule": [r["eps"] for r in solver.trace if r["phase"] == "eps" and r["accepted"]],
           "grid": {"n_r": ctx.grid.n_r, "n_theta": ctx.grid.n_theta, "h": ctx.grid.h},
           "res_interior": st.res_interior, "res_boundary": st.res_boundary, "min_lambda": st.min_lambda,
           "min_oblique": st.min_oblique, "clamps": st.clamps, "multiplier": st.lam, "eps": st.eps,
           "max_grad": st.max_grad, "image": orient, "n_steps": len(solver.trace),
           "timing": {"wall_time": wall, "finished": _stamp()}, **meta}
    if isinstance(ctx.spec, QuadraticOT):
        out["identity_error"] = float(np.abs(Du - ctx.grid.points).max())
    man = ctx.setup.manufactured
    if man is not None:
        out["manufactured"] = {"Tu_error": float(np.abs(d.Y - man.Tu(ctx.grid.points)).max()),
                               "u_error": float(np.abs(st.u - man.field.value(ctx.grid.points)).max())}
    write_json(ctx.out / "solve.json", out)
    return OK, out


def run_verify(cfg: RunConfig, seed=None):
    ctx = Context(cfg, seed)
    v = cfg.verify
    which = v.field
    src = ctx.out / ("u0.csv" if which == "initial" else "solution.csv")
    u = read_field(src, ctx.grid)
    out = {"config_hash": cfg.content_hash(), "field": which}
    ok = True
    if isinstance(ctx.spec, (Reflection, Refraction)):
        ray = trace_field(ctx.spec, u, ctx.grid, v.n_rays, seed=ctx.seed)
        out["rays"] = ray.to_dict()
        ok &= ray.misses == 0 and ray.max_deviation < v.max_ray_deviation
    factor, _, _ = mass_factor(ctx)
    fs = ctx.setup.f_star
    try:
        mass = pushforward_histogram(ctx.spec, u, ctx.grid, ctx.setup.f, lambda y: factor * np.asarray(fs(y)),
                                     ctx.setup.target, bins=tuple(v.bins), n_samples=v.n_samples, seed=ctx.seed)
    except VerifyError as exc:
        raise StageError(f"verify: {exc}") from exc
    out["mass"] = mass.to_dict()
    ok &= mass.contained and mass.max_rel_mismatch < v.max_mass_mismatch and mass.identity_error < 1e-10
    if v.exact_gradient_tol is not None and isinstance(ctx.spec, QuadraticOT):
        Du = ctx.grid.operators().gradient(u)
        err = float(np.abs(Du - ctx.grid.points).max())
        out["identity_error"] = err
        ok &= err < v.exact_gradient_tol
    out["passed"] = bool(ok)
    write_json(ctx.out / ("verify_initial.json" if which == "initial" else "verify.json"), out)
    return (OK if ok else INVALID), out


def run_export(cfg: RunConfig, seed=None):
    """Plot-friendly layout: (ring, col) tables of the solution and its boundary image."""
    ctx = Context(cfg, seed)
    exp = ctx.out / "export"
    u = read_field(ctx.out / "solution.csv", ctx.grid)
    Du = ctx.grid.operators().gradient(u)
    Y = dual_yz(ctx.spec, ctx.grid.points, u, Du)[0]
    g = ctx.grid
    rows = [[int(g.ring[k]), int(g.col[k]), float(g.S[k]), float(g.TH[k]), float(g.points[k, 0]),
             float(g.points[k, 1]), float(u[k]), float(Y[k, 0]), float(Y[k, 1])] for k in range(g.size)]
    write_csv(exp / "field.csv", ["ring", "col", "s", "theta", "x", "y", "u", "Tu_x", "Tu_y"], rows)
    b = g.boundary_index
    th = g.theta[g.col[b]]
    tb = ctx.setup.target.boundary(th).x
    write_csv(exp / "boundary.csv", ["theta", "x", "y", "Tu_x", "Tu_y", "target_x", "target_y"],
              [[float(th[i]), *map(float, g.points[k]), *map(float, Y[k]), *map(float, tb[i])]
               for i, k in enumerate(b)])
    (exp / "config.toml").write_text(cfg.dumps())
    meta = {"config_hash": cfg.content_hash(), "files": ["field.csv", "boundary.csv", "config.toml"],
            "n_nodes": g.size}
    write_json(exp / "export.json", meta)
    return OK, meta


STAGES = {"check": run_check, "init": run_init, "solve": run_solve, "verify": run_verify, "export": run_export}
