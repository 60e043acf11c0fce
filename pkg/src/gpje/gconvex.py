"""g-affine functions, the g_rho initial solution, envelope extension and mollification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import quad
from scipy.spatial import cKDTree

from .domains import DomainSpec, Grid
from .dualmaps import Jet1, dual_gstar, dual_yz, solve_duals
from .genfun import GeneratingFunction


class ConstructionError(RuntimeError):
    """Initial-solution construction failed a required property."""


@dataclass(frozen=True)
class GAffine:
    """x -> g(x, y0, z0)."""

    spec: GeneratingFunction
    y0: tuple
    z0: float

    def __call__(self, x):
        return self.spec.evaluate(x, np.asarray(self.y0, float), self.z0).g

    def gradient(self, x):
        return self.spec.evaluate(x, np.asarray(self.y0, float), self.z0).g_x


# --------------------------------------------------------------------------
# g_rho


@dataclass
class GRho:
    value: np.ndarray
    y: np.ndarray
    z: np.ndarray
    grad: np.ndarray


def _ball_point(y0, z0, rho, v):
    w = 1.0 / np.sqrt(1.0 + np.sum(v * v, -1))
    return y0 + rho * w[..., None] * v, z0 - rho * w


def g_rho(spec: GeneratingFunction, y0, z0: float, rho: float, x, *, n_coarse: int = 24,
          iters: int = 60) -> GRho:
    """sup over y in B_rho(y0) of g(x, y, z0 - sqrt(rho^2 - |y - y0|^2)).

    The hemisphere is parametrized by v in R^2 (y = y0 + rho v / sqrt(1+|v|^2)),
    which keeps iterates inside the open ball; the sup is interior because the
    hemisphere is vertical at its rim.  Coarse search, then damped Newton with
    a finite-difference Hessian of the exact gradient.  By the envelope
    theorem Du = g_x(x, y*, z*), so Tu = y*.
    """
    x = np.atleast_2d(np.asarray(x, float))
    y0 = np.asarray(y0, float)
    m = len(x)

    def F(v, xx):
        y, z = _ball_point(y0, z0, rho, v)
        return spec.value(xx, y, z)

    def grad(v, xx):
        w = 1.0 / np.sqrt(1.0 + np.sum(v * v, -1))
        y, z = _ball_point(y0, z0, rho, v)
        gv = spec.evaluate(xx, y, z)
        # dy/dv = rho (w I - w^3 v v^T), dz/dv = rho w^3 v
        w3 = w**3
        gy_v = rho * (w[..., None] * gv.g_y - (w3 * np.sum(gv.g_y * v, -1))[..., None] * v)
        return gy_v + (rho * w3 * gv.g_z)[..., None] * v

    # coarse search on a polar pattern of the unit ball in w-coordinates
    r = np.linspace(0.0, 0.95, 8)
    t = np.linspace(0, 2 * np.pi, n_coarse, endpoint=False)
    W = np.concatenate([[[0.0, 0.0]], (r[1:, None, None] * np.stack([np.cos(t), np.sin(t)], -1)).reshape(-1, 2)])
    V = W / np.sqrt(1.0 - np.sum(W * W, -1))[:, None]
    vals = F(V[None, :, :], x[:, None, :])
    v = V[np.argmax(vals, 1)].copy()
    h = 1e-6
    for _ in range(iters):
        gr = grad(v, x)
        H = np.empty((m, 2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h * (1 + np.abs(v).max())
            H[:, :, k] = (grad(v + e, x) - grad(v - e, x)) / (2 * e[k])
        H = 0.5 * (H + np.swapaxes(H, 1, 2))
        # ascent direction: Newton where H is negative definite, gradient otherwise
        ev = np.linalg.eigvalsh(H)
        nd = ev[:, -1] < 0
        step = np.where(nd[:, None], -np.linalg.solve(np.where(nd[:, None, None], H, -np.eye(2)), gr[..., None])[..., 0], gr)
        f0 = F(v, x)
        a = np.ones(m)
        for _ls in range(40):
            ok = F(v + a[:, None] * step, x) >= f0 - 1e-15 * (1 + np.abs(f0))
            if ok.all():
                break
            a = np.where(ok, a, 0.5 * a)
        v = v + a[:, None] * step
        if np.max(np.abs(gr)) < 1e-13 * (1 + rho):
            break
    y, z = _ball_point(y0, z0, rho, v)
    gv = spec.evaluate(x, y, z)
    return GRho(value=gv.g, y=y, z=z, grad=gv.g_x)


def g_rho_dense(spec, y0, z0, rho, x, n: int = 1000, levels: int = 4):
    """Brute-force oracle: dense polar sampling of B_rho, zoomed around the best point."""
    x = np.atleast_2d(np.asarray(x, float))
    y0 = np.asarray(y0, float)
    out = np.empty(len(x))
    k = int(np.sqrt(n))
    for i, xi in enumerate(x):
        c, width = y0.copy(), rho
        best = -np.inf
        for _ in range(levels):
            g1 = np.linspace(-width, width, k)
            Y = c + np.stack(np.meshgrid(g1, g1, indexing="ij"), -1).reshape(-1, 2)
            d2 = np.sum((Y - y0) ** 2, -1)
            Y = Y[d2 < rho * rho]
            Z = z0 - np.sqrt(rho * rho - np.sum((Y - y0) ** 2, -1))
            val = spec.evaluate(xi, Y, Z).g
            j = int(np.argmax(val))
            best = max(best, float(val[j]))
            c, width = Y[j], 4 * width / k
        out[i] = best
    return out


# --------------------------------------------------------------------------
# initial field


@dataclass
class GConvexField:
    grid: Grid
    u: np.ndarray
    margin: np.ndarray
    Tu: Optional[np.ndarray] = None
    Du: Optional[np.ndarray] = None
    report: dict = field(default_factory=dict)


def ellipticity_margin(spec, grid: Grid, u, Du=None, nodes=None):
    """Smallest eigenvalue of D^2u - A(x, u, Du) with discrete derivatives."""
    ops = grid.operators()
    if Du is None:
        Du = ops.gradient(u)
    H = ops.hessian(u)
    d = solve_duals(spec, Jet1(grid.points, u, Du), strict=False)
    lam = np.full(len(u), -np.inf)
    ok = d.ok
    M = H[ok] - d.A[ok]
    lam[ok] = np.linalg.eigvalsh(0.5 * (M + np.swapaxes(M, 1, 2)))[:, 0]
    if nodes is not None:
        lam = lam[nodes]
    return lam, d


def gamma0_admissible(spec, source: DomainSpec, y0, z0, rho, m: int = 256) -> bool:
    """Whether closure(source) x B_rho(y0) x [z0 - rho, z0] lies in the admissible set."""
    th = np.linspace(0, 2 * np.pi, m, endpoint=False)
    xb = np.concatenate([source.boundary(th).x, [source.center]])
    ring = np.asarray(y0, float) + rho * np.stack([np.cos(th), np.sin(th)], -1)
    ys = np.concatenate([ring, [y0]])
    X = np.repeat(xb, len(ys), 0)
    Y = np.tile(ys, (len(xb), 1))
    for z in (z0 - rho, z0):
        lo, hi = spec.z_bounds(X, Y)
        if not np.all((z > lo) & (z < hi)):
            return False
    return True


def ball_inside(target: DomainSpec, y0, rho, m: int = 512) -> bool:
    th = np.linspace(0, 2 * np.pi, m, endpoint=False)
    ring = np.asarray(y0, float) + rho * np.stack([np.cos(th), np.sin(th)], -1)
    return bool(np.all(target.phi(ring) < 0) and target.phi(np.asarray(y0, float)[None])[0] < 0)


def default_rho(spec, source, target, y0, z0, rho_max: float = 1.0) -> float:
    """Largest rho on a halving ladder passing the admissibility scan, halved."""
    rho = rho_max
    for _ in range(60):
        if ball_inside(target, y0, rho) and gamma0_admissible(spec, source, y0, z0, rho):
            return 0.5 * rho
        rho *= 0.8
    raise ConstructionError("no admissible rho found")


def build_initial(spec, source: DomainSpec, target: DomainSpec, y0, z0: float, rho: float,
                  grid: Grid, *, constants: Optional[dict] = None, require_range: bool = True) -> GConvexField:
    """u0 = g_rho at the grid nodes, with ellipticity and image checks."""
    y0 = np.asarray(y0, float)
    if not ball_inside(target, y0, rho):
        raise ConstructionError(f"B_rho(y0) is not contained in the target (rho={rho:g})")
    if not gamma0_admissible(spec, source, y0, z0, rho):
        raise ConstructionError("closure(source) x B_rho x [z0 - rho, z0] leaves the admissible set")
    gr = g_rho(spec, y0, z0, rho, grid.points)
    u = gr.value
    dist = np.linalg.norm(gr.y - y0, axis=-1)
    inside_nodes = grid.inside
    violations = int(np.sum(dist[inside_nodes] >= rho))
    nodes = _margin_nodes(grid)
    lam, d = ellipticity_margin(spec, grid, u, Du=gr.grad)
    Tu_disc = dual_yz(spec, grid.points, u, grid.operators().gradient(u))[0]
    report = {
        "rho": rho, "y0": y0.tolist(), "z0": z0,
        "min_lambda": float(lam[nodes].min()),
        "image_violations": violations,
        "max_image_radius": float(dist[inside_nodes].max()),
        "max_discrete_image_radius": float(np.nanmax(np.linalg.norm(Tu_disc[inside_nodes] - y0, axis=-1))),
        "u_range": [float(u[inside_nodes].min()), float(u[inside_nodes].max())],
    }
    if constants is not None:
        diam = 2 * source.max_radius
        K0 = constants["K0"]
        lo, hi = constants["J0"]
        rng_lo = report["u_range"][0] - K0 * diam
        rng_hi = report["u_range"][1] + K0 * diam
        report["range_condition"] = bool(lo < rng_lo and rng_hi < hi)
        report["range_interval"] = [rng_lo, rng_hi]
        if require_range and not report["range_condition"]:
            raise ConstructionError(
                f"range condition violated: [{rng_lo:.4g}, {rng_hi:.4g}] not inside J0 = ({lo:.4g}, {hi:.4g})")
    if report["min_lambda"] <= 0:
        raise ConstructionError(f"initial field not elliptic (min lambda {report['min_lambda']:.3e})")
    if violations:
        raise ConstructionError(f"image escapes B_rho(y0) at {violations} nodes")
    return GConvexField(grid=grid, u=u, margin=lam, Tu=gr.y, Du=gr.grad, report=report)


def _margin_nodes(grid: Grid):
    """Nodes whose Hessian stencil is centered (drops the outermost ring)."""
    return grid.ring < grid.n_rings - 1


# --------------------------------------------------------------------------
# envelope extension


@dataclass
class Envelope:
    u1: np.ndarray
    theta_b: np.ndarray
    x_b: np.ndarray
    y_b: np.ndarray
    z_b: np.ndarray
    s_b: np.ndarray
    interior_excess: float
    spec: object = None
    u0_fun: object = None

    def value(self, x, chunk: int = 32):
        """max(u0, g(., y_b, z_b)) at arbitrary points."""
        x = np.atleast_2d(x)
        out = self.u0_fun(x)[0]
        for c in np.array_split(np.arange(len(self.z_b)), max(1, len(self.z_b) // chunk)):
            out = np.maximum(out, self.spec.value(x[:, None, :], self.y_b[None, c], self.z_b[None, c]).max(1))
        return out


def _ray_root(spec, target, x, u, p0, gamma, s_max=1e3):
    """First s > 0 with target.phi(Y(x, u, p0 + s gamma)) = 0, bisection then secant polish."""
    m = len(u)

    def G(s):
        Y, _, ok, _ = dual_yz(spec, x, u, p0 + s[:, None] * gamma)
        return np.where(ok, target.phi(np.where(ok[:, None], Y, target.center)), 1.0)

    g0 = G(np.zeros(m))
    if np.any(g0 >= 0):
        raise ConstructionError("ray start already outside the target")
    ladder = 1e-4 * 1.5 ** np.arange(60)
    ladder = ladder[ladder < s_max]
    a = np.zeros(m)
    b = np.full(m, np.nan)
    crossings = np.zeros(m, int)
    prev = g0 < 0
    for lo, hi in zip(np.concatenate([[0.0], ladder[:-1]]), ladder):
        val = G(np.full(m, hi))
        cur = val < 0
        new = np.isnan(b) & prev & ~cur
        a[new], b[new] = lo, hi
        crossings += (prev != cur)
        prev = cur
    if np.isnan(b).any():
        bad = int(np.argmax(np.isnan(b)))
        raise ConstructionError(f"no root along the ray from x_b = {x[bad].tolist()}")
    for _ in range(80):
        mid = 0.5 * (a + b)
        inside = G(mid) < 0
        a = np.where(inside, mid, a)
        b = np.where(inside, b, mid)
    return 0.5 * (a + b), crossings


def envelope_extend(spec, u0_fun, source: DomainSpec, target: DomainSpec, grid: Grid, *,
                    n_boundary: int = 256) -> Envelope:
    """u1 = max(u0, g(., y_b, z_b)) over boundary samples x_b, with u1 = u0 on the domain.

    ``u0_fun(x)`` returns (value, gradient) of the uniformly g-convex field.
    For each x_b, y_b is where the ray Du0(x_b) + s gamma0 leaves the target
    in the dual picture and z_b = g*(x_b, y_b, u0(x_b)).
    """
    # nested in n_boundary under doubling, so the envelope is monotone in it
    th = 2 * np.pi * np.arange(n_boundary) / n_boundary
    bp = source.boundary(th)
    ub, pb = u0_fun(bp.x)
    s, crossings = _ray_root(spec, target, bp.x, ub, pb, bp.normal)
    if np.any(crossings > 1):
        raise ConstructionError("ray crossed the target boundary more than once (target not Y*-convex?)")
    Y, Z, ok, _ = dual_yz(spec, bp.x, ub, pb + s[:, None] * bp.normal)
    zb = dual_gstar(spec, bp.x, Y, ub)
    u0_nodes, _ = u0_fun(grid.points)
    fam = np.full(grid.size, -np.inf)
    for chunk in np.array_split(np.arange(n_boundary), max(1, n_boundary // 32)):
        vals = spec.evaluate(grid.points[:, None, :], Y[None, chunk], zb[None, chunk]).g
        fam = np.maximum(fam, vals.max(1))
    excess = float(np.max(fam[grid.inside] - u0_nodes[grid.inside]))
    u1 = np.where(grid.inside, u0_nodes, np.maximum(u0_nodes, fam))
    return Envelope(u1=u1, theta_b=th, x_b=bp.x, y_b=Y, z_b=zb, s_b=s, interior_excess=excess,
                    spec=spec, u0_fun=u0_fun)


# --------------------------------------------------------------------------
# mollification


def bump_constant() -> float:
    """Normalization of exp(-1/(1-r^2)) on the unit disc."""
    val, _ = quad(lambda r: 2 * np.pi * r * np.exp(-1.0 / (1.0 - r * r)), 0, 1, epsabs=1e-14, epsrel=1e-13)
    return 1.0 / val


def bump(r, eps):
    r = np.asarray(r, float) / eps
    out = np.zeros_like(r)
    inside = r < 1
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out * bump_constant() / eps**2


def distance_to_domain(d: DomainSpec, x, m: int = 4096):
    th = np.linspace(0, 2 * np.pi, m, endpoint=False)
    out = np.zeros(len(x))
    outside = d.phi(x) > 0
    if outside.any():
        out[outside] = cKDTree(d.boundary(th).x).query(x[outside])[0]
    return out


def mollifier_rule(eps: float, n_r: int = 8, n_a: int = 16):
    """Offsets and weights of a polar product rule for the bump of radius eps (weights sum to 1)."""
    r, wr = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * (r + 1) * eps
    wr = 0.5 * eps * wr * r * bump(r, eps)
    a = 2 * np.pi * (np.arange(n_a) + 0.5) / n_a
    off = (r[:, None, None] * np.stack([np.cos(a), np.sin(a)], -1)[None]).reshape(-1, 2)
    w = np.repeat(wr, n_a) * (2 * np.pi / n_a)
    return off, w / w.sum()


def mollify_adjust(spec, u1_fun, grid: Grid, source: DomainSpec, *, t_adj: float = 1.0,
                   eps_moll: float, check: bool = True, n_r: int = 8, n_a: int = 16):
    """u_eps = bump * (u1 + t_adj d^2) at the domain nodes, d the distance to the source.

    ``u1_fun`` evaluates the extended field at arbitrary points; the convolution
    uses a polar product rule, so it does not depend on the grid spacing.
    Returns (u_eps, lambda per node, report).
    """
    off, w = mollifier_rule(eps_moll, n_r, n_a)
    dom = grid.domain_index
    x = grid.points[dom]
    ue = np.empty(len(x))
    for idx in np.array_split(np.arange(len(x)), max(1, len(x) * len(w) // 16384)):
        q = (x[idx, None, :] + off[None]).reshape(-1, 2)
        d = distance_to_domain(source, q)
        ue[idx] = (u1_fun(q) + t_adj * d * d).reshape(len(idx), len(w)) @ w
    g = grid.without_collar() if grid.n_collar else grid
    lam, _ = ellipticity_margin(spec, g, ue)
    rep = {"eps_moll": eps_moll, "t_adj": t_adj, "min_lambda_domain": float(lam.min()),
           "quadrature_points": int(len(w))}
    if check and rep["min_lambda_domain"] <= 0:
        raise ConstructionError(
            f"mollified field not elliptic (min lambda {rep['min_lambda_domain']:.3e}); "
            "try a smaller eps_moll or larger t_adj")
    return ue, lam, rep


# --------------------------------------------------------------------------
# positivity test


@dataclass
class TouchingReport:
    n_cases: int
    failures: int
    worst_min_h: float
    cases: list


def touching_case(spec, source, grid: Grid, y0, z0, rho, node: int, s: float):
    """min over nodes other than x0 of h = u - g0, with g0 touching u at x0 with Dh = -s gamma0."""
    gr = g_rho(spec, y0, z0, rho, grid.points)
    x0 = grid.points[node]
    th = grid.theta[grid.col[node]]
    gamma = source.boundary(np.array([th])).normal[0]
    p = gr.grad[node] + s * gamma
    Y, Z, ok, _ = dual_yz(spec, x0[None], np.array([gr.value[node]]), p[None])
    if not ok[0]:
        raise ConstructionError("touching jet outside the admissible set")
    g0 = spec.evaluate(grid.points, Y[0], Z[0])
    h = gr.value - g0.g
    dh = gr.grad[node] - g0.g_x[node]
    defect = max(abs(h[node]), np.max(np.abs(dh + s * gamma)))
    if defect > 1e-8:
        raise ConstructionError(f"touching conditions met only to {defect:.2e}")
    mask = np.ones(grid.size, bool)
    mask[node] = False
    mask &= grid.inside
    return float(h[mask].min()), Y[0]


def touching_test(spec, source, target, grid: Grid, *, n_cases: int = 50, seed: int = 0,
                 z0: float, s_range=(0.01, 0.5), rho_frac: float = 0.5) -> TouchingReport:
    rng = np.random.default_rng(seed)
    cases, fails, worst = [], 0, np.inf
    bnodes = grid.boundary_index
    for _ in range(n_cases):
        y0 = target.sample_interior(rng, 1, shrink=0.5)[0]
        rho = rho_frac * default_rho(spec, source, target, y0, z0)
        node = int(rng.choice(bnodes))
        s = float(rng.uniform(*s_range))
        mh, yt = touching_case(spec, source, grid, y0, z0, rho, node, s)
        fails += mh <= 0
        worst = min(worst, mh)
        cases.append({"y0": y0.tolist(), "rho": rho, "node": node, "s": s, "min_h": mh,
                      "y_touch": yt.tolist()})
    return TouchingReport(n_cases=n_cases, failures=int(fails), worst_min_h=float(worst), cases=cases)


# --------------------------------------------------------------------------
# initial data pipeline


def prepare_initial(spec, source: DomainSpec, target: DomainSpec, grid: Grid, *, y0, z0: float,
                    rho: Optional[float] = None, envelope: bool = True, eps_moll: float = 0.2,
                    t_adj: float = 1.0, n_boundary: int = 256, constants: Optional[dict] = None,
                    require_range: bool = True) -> GConvexField:
    """Uniformly g-convex starting field on the grid.

    With ``envelope`` the bare g_rho field is extended by the boundary envelope
    and mollified, so that its image spreads toward the target; otherwise the
    bare g_rho field is returned.
    """
    y0 = np.asarray(y0, float)
    if rho is None:
        rho = default_rho(spec, source, target, y0, z0)
    base = build_initial(spec, source, target, y0, z0, rho, grid, constants=constants,
                         require_range=require_range)
    base.report["path"] = "bare"
    if not envelope:
        return base

    def u0_fun(x):
        r = g_rho(spec, y0, z0, rho, x)
        return r.value, r.grad

    env = envelope_extend(spec, u0_fun, source, target, grid, n_boundary=n_boundary)
    ue, lam, rep = mollify_adjust(spec, env.value, grid, source, t_adj=t_adj, eps_moll=eps_moll)
    Du = grid.operators().gradient(ue)
    Y = dual_yz(spec, grid.points, ue, Du)[0]
    report = dict(base.report)
    report.update(path="envelope", envelope_interior_excess=env.interior_excess,
                  min_lambda=rep["min_lambda_domain"], eps_moll=eps_moll, t_adj=t_adj,
                  n_boundary=n_boundary, u_range=[float(ue.min()), float(ue.max())],
                  max_image_phi=float(np.nanmax(target.phi(Y))))
    return GConvexField(grid=grid, u=ue, margin=lam, Tu=Y, Du=Du, report=report)
