"""Physics-level checks: ray tracing against the generated map and pushforward mass."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .domains import DomainSpec, Grid
from .dualmaps import dual_yz
from .genfun import Reflection, Refraction, TargetProfile


class VerifyError(RuntimeError):
    """A verification could not be carried out."""


@dataclass
class RayReport:
    deviation: np.ndarray
    max_deviation: float
    mean_deviation: float
    misses: int
    tir: int = 0
    n_samples: int = 0

    def to_dict(self, worst: int = 10):
        order = np.argsort(np.nan_to_num(self.deviation, nan=np.inf))[::-1][:worst]
        return {"max_deviation": self.max_deviation, "mean_deviation": self.mean_deviation,
                "misses": self.misses, "total_internal_reflection": self.tir,
                "n_samples": self.n_samples, "worst_indices": order.tolist()}


@dataclass
class MassReport:
    bin_mass: np.ndarray
    bin_expected: np.ndarray
    rel_mismatch: np.ndarray
    max_rel_mismatch: float
    total_weight: float
    total_binned: float
    escaped_mass: float
    identity_error: float
    source_mass: float
    target_mass: float
    escaped_beyond_tol: int
    empty_bins: int
    contained: bool
    n_samples: int

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if not isinstance(v, np.ndarray)}
        d["rel_mismatch"] = self.rel_mismatch.tolist()
        return d


# --------------------------------------------------------------------------
# ray geometry


def surface_normal(p):
    """Unit normal (p, -1)/sqrt(1 + |p|^2) of the graph of u, pointing down."""
    p = np.asarray(p, float)
    nu = np.concatenate([p, -np.ones(p.shape[:-1] + (1,))], -1)
    return nu / np.linalg.norm(nu, axis=-1, keepdims=True)


def reflect(d, nu):
    return d - 2 * np.sum(d * nu, -1, keepdims=True) * nu


def refract(d, nu, kappa):
    """Vector Snell law with nu facing the incoming ray; NaN where totally reflected."""
    c1 = -np.sum(d * nu, -1)
    disc = 1.0 - kappa**2 * (1.0 - c1**2)
    with np.errstate(invalid="ignore"):
        out = kappa * d + (kappa * c1 - np.sqrt(disc))[..., None] * nu
    out[disc < 0] = np.nan
    return out, disc >= 0


def hit_graph(start, direction, profile: TargetProfile, s_max: float, n_scan: int = 64, iters: int = 200):
    """First s in (0, s_max] with start_z + s d_z = Phi(start_xy + s d_xy); NaN on a miss."""
    m = len(start)

    def F(s):
        q = start + s[:, None] * direction
        return q[:, -1] - profile.value(q[:, :-1])

    ok = np.all(np.isfinite(direction), -1)
    d = np.where(ok[:, None], direction, 0.0)
    direction = d
    grid_s = s_max * (np.arange(1, n_scan + 1) / n_scan) ** 2
    f0 = F(np.zeros(m))
    a = np.zeros(m)
    b = np.full(m, np.nan)
    prev_s, prev_f = np.zeros(m), f0
    for s in grid_s:
        fs = F(np.full(m, s))
        new = np.isnan(b) & (np.sign(fs) != np.sign(prev_f)) & ok
        a[new], b[new] = prev_s[new], s
        prev_s, prev_f = np.full(m, s), fs
    found = ~np.isnan(b)
    lo, hi = a.copy(), np.where(found, b, 1.0)
    flo = F(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = F(mid)
        same = np.sign(fm) == np.sign(flo)
        lo, flo = np.where(same, mid, lo), np.where(same, fm, flo)
        hi = np.where(same, hi, mid)
        if np.all(hi - lo <= 4e-16 * np.maximum(hi, 1.0)):
            break
    s = 0.5 * (lo + hi)
    s[~found] = np.nan
    return start + s[:, None] * direction, s


def trace_jets(spec, x, u, p, *, slab: Optional[float] = None) -> tuple:
    """Physical hit points of the vertical beam through jets (x, u, p); returns (y_hit, tir mask)."""
    x, u, p = np.asarray(x, float), np.asarray(u, float), np.asarray(p, float)
    if not isinstance(spec, (Reflection, Refraction)):
        raise VerifyError("ray tracing needs a reflection or refraction model")
    m = len(u)
    start = np.concatenate([x, u[:, None]], -1)
    d = np.zeros((m, x.shape[1] + 1))
    d[:, -1] = 1.0
    nu = surface_normal(p)
    if isinstance(spec, Reflection):
        out, tir = reflect(d, nu), np.zeros(m, bool)
    else:
        out, ok = refract(d, nu, spec.kappa)
        tir = ~ok
    if slab is None:
        slab = 10.0 * max(1.0, float(np.ptp(x, 0).max()), float(np.abs(u - spec.profile.value(x)).max()))
    hit, s = hit_graph(start, out, spec.profile, slab)
    return hit[:, :-1], tir


def trace_reflection(spec: Reflection, x, u, p, **kw) -> RayReport:
    return _ray_report(spec, x, u, p, **kw)


def trace_refraction(spec: Refraction, x, u, p, **kw) -> RayReport:
    return _ray_report(spec, x, u, p, **kw)


def _ray_report(spec, x, u, p, slab=None) -> RayReport:
    y_hit, tir = trace_jets(spec, x, u, p, slab=slab)
    Y, _, ok, _ = dual_yz(spec, np.asarray(x, float), np.asarray(u, float), np.asarray(p, float))
    dev = np.linalg.norm(y_hit - Y, axis=-1)
    miss = ~np.isfinite(dev) | ~ok
    good = dev[~miss]
    return RayReport(deviation=dev, max_deviation=float(good.max()) if good.size else np.nan,
                     mean_deviation=float(good.mean()) if good.size else np.nan,
                     misses=int(miss.sum()), tir=int(tir.sum()), n_samples=len(dev))


# --------------------------------------------------------------------------
# field interpolation


@dataclass
class FieldInterpolant:
    """Bicubic spline of a grid field in (s, theta) with the antipodal extension across s = 0."""

    grid: Grid
    values: np.ndarray
    pad: int = 3

    def __post_init__(self):
        g = self.grid
        if g.n_theta % 2:
            raise VerifyError("antipodal extension needs an even number of angles")
        U = np.asarray(self.values, float)[: g.n_r * g.n_theta].reshape(g.n_r, g.n_theta)
        half = g.n_theta // 2
        mirror = np.roll(U, -half, axis=1)[::-1]  # (-s_i, theta) = (s_i, theta + pi)
        s_ext = np.concatenate([-g.s[: g.n_r][::-1], g.s[: g.n_r]])
        U_ext = np.concatenate([mirror, U], 0)
        k = self.pad
        th_ext = np.concatenate([g.theta[-k:] - 2 * np.pi, g.theta, g.theta[:k] + 2 * np.pi])
        U_ext = np.concatenate([U_ext[:, -k:], U_ext, U_ext[:, :k]], 1)
        self._spl = RectBivariateSpline(s_ext, th_ext, U_ext, kx=3, ky=3, s=0)

    def __call__(self, x):
        """Value and physical gradient at points x."""
        g = self.grid
        s, th = g.inverse_map(x)
        s = np.minimum(s, g.s[g.n_r - 1])
        v = self._spl.ev(s, th)
        vs = self._spl.ev(s, th, dx=1)
        vt = self._spl.ev(s, th, dy=1)
        rho = g._rho(s, th)
        rs = g._rho(s, th, (1, 0))
        rt = g._rho(s, th, (0, 1))
        e = np.stack([np.cos(th), np.sin(th)], -1)
        ep = np.stack([-np.sin(th), np.cos(th)], -1)
        xs = rs[:, None] * e
        xt = rt[:, None] * e + rho[:, None] * ep
        J = np.stack([xs, xt], -1)
        grad = np.linalg.solve(np.swapaxes(J, 1, 2), np.stack([vs, vt], -1)[..., None])[..., 0]
        return v, grad


def trace_field(spec, u_field, grid: Grid, n_samples: int, seed: int = 0) -> RayReport:
    """Ray report at interpolated jets of a grid field, sampled in the source domain."""
    rng = np.random.default_rng(seed)
    x = grid.domain.sample_interior(rng, n_samples, shrink=0.98)
    u, p = FieldInterpolant(grid, u_field)(x)
    return _ray_report(spec, x, u, p)


# --------------------------------------------------------------------------
# pushforward mass


def _cell_bins(target_grid: Grid, y, tol: float):
    s, th = target_grid.inverse_map(y)
    n_r, n_t = target_grid.n_r, target_grid.n_theta
    ring = np.minimum(np.floor(s / target_grid.h).astype(int), n_r - 1)
    col = np.mod(np.rint(th / target_grid.dtheta).astype(int), n_t)
    phi = target_grid.domain.phi(y)
    inside = phi <= 0
    near = (phi > 0) & (phi <= tol)
    return ring * n_t + col, inside, near


def _cell_integral(grid: Grid, fn, n_gauss: int = 6):
    """Integral of fn over each domain cell (Gauss in s and theta with the map Jacobian)."""
    gl, gw = np.polynomial.legendre.leggauss(n_gauss)
    lo = np.maximum(grid.s[: grid.n_r] - 0.5 * grid.h, 0.0)
    hi = np.minimum(grid.s[: grid.n_r] + 0.5 * grid.h, 1.0)
    hi[grid.n_r - 1] = 1.0
    out = np.zeros((grid.n_r, grid.n_theta))
    for a, wa in zip(gl, gw):
        s = 0.5 * (lo + hi) + 0.5 * (hi - lo) * a
        for b, wb in zip(gl, gw):
            th = grid.theta + 0.5 * grid.dtheta * b
            S, TH = np.meshgrid(s, th, indexing="ij")
            x = grid.map(S, TH)
            jac = grid._rho(S, TH) * grid._rho(S, TH, (1, 0))
            val = np.asarray(fn(x.reshape(-1, 2)), float).reshape(S.shape)
            out += wa * wb * 0.25 * (hi - lo)[:, None] * grid.dtheta * val * jac
    return out.ravel()


def pushforward_histogram(spec, u_field, grid: Grid, f: Callable, f_star: Callable, target: DomainSpec,
                          bins=(4, 8), n_samples: int = 10**6, seed: int = 0,
                          coverage_frac: float = 0.5) -> MassReport:
    """Bin the pushforward of f under Tu into the target's own grid cells.

    Samples are jittered on sub-cells of the source cells in (s, theta) and
    weighted by f times the map Jacobian; the weights sum to the quadrature of
    f.  Bin expectations are the cell integrals of f* rescaled to that total.
    Containment fails if mass lands beyond one bin width outside the target or
    a bin receives less than ``coverage_frac`` of its expected mass.
    """
    rng = np.random.default_rng(seed)
    tg = Grid(target, int(bins[0]), int(bins[1]))
    interp = FieldInterpolant(grid, u_field)
    n_cells = grid.n_r * grid.n_theta
    ks = max(1, int(np.ceil(np.sqrt(n_samples / n_cells))))  # at least n_samples
    k = ks * ks
    sub = np.arange(k)
    lo = np.maximum(grid.s[: grid.n_r] - 0.5 * grid.h, 0.0)
    hi = np.minimum(grid.s[: grid.n_r] + 0.5 * grid.h, 1.0)
    hi[grid.n_r - 1] = 1.0
    ring = np.repeat(np.arange(grid.n_r), grid.n_theta)
    col = np.tile(np.arange(grid.n_theta), grid.n_r)
    nb = tg.n_r * tg.n_theta
    bin_mass = np.zeros(nb)
    escaped = 0.0
    escaped_far = 0
    total_w = 0.0
    width = tg.h * target.max_radius
    for chunk in np.array_split(np.arange(n_cells), max(1, n_cells * k // 200000)):
        r, c = np.repeat(ring[chunk], k), np.repeat(col[chunk], k)
        ds = hi[r] - lo[r]
        # jittered ks x ks sub-cells of each source cell
        a = np.tile(sub // ks, len(chunk))
        b = np.tile(sub % ks, len(chunk))
        s = lo[r] + ds * (a + rng.random(len(r))) / ks
        th = grid.theta[c] + grid.dtheta * ((b + rng.random(len(r))) / ks - 0.5)
        x = grid.map(s, th)
        w = np.asarray(f(x), float) * grid._rho(s, th) * grid._rho(s, th, (1, 0)) * ds * grid.dtheta / k
        u, p = interp(x)
        Y, _, ok, _ = dual_yz(spec, x, u, p)
        if not np.all(ok):
            raise VerifyError("generated map undefined at some samples")
        idx, inside, near = _cell_bins(tg, Y, width)
        keep = inside | near
        bin_mass += np.bincount(idx[keep], weights=w[keep], minlength=nb)
        escaped += float(w[~keep].sum())
        escaped_far += int((~keep).sum())
        total_w += float(w.sum())
    src = float(_cell_integral(grid, f).sum())
    tgt_cells = _cell_integral(tg, f_star)
    tgt = float(tgt_cells.sum())
    expected = tgt_cells * (total_w / tgt)
    rel = np.abs(bin_mass - expected) / expected
    binned = float(bin_mass.sum())
    ident = abs(binned + escaped - total_w) / total_w
    empty = int(np.sum(bin_mass < coverage_frac * expected))
    return MassReport(bin_mass=bin_mass, bin_expected=expected, rel_mismatch=rel,
                      max_rel_mismatch=float(rel.max()), total_weight=total_w, total_binned=binned,
                      escaped_mass=escaped, identity_error=float(ident), source_mass=src,
                      target_mass=tgt, escaped_beyond_tol=escaped_far, empty_bins=empty,
                      contained=bool(escaped_far == 0 and empty == 0), n_samples=int(k * n_cells))
