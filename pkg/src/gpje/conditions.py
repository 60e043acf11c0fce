"""Sampled verification of the structure conditions and the gradient-bound constants."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .domains import DomainSpec, check_Y_convexity, check_Ystar_convexity
from .dualmaps import dual_gstar, dual_yz, matrix_E, map_Q
from .genfun import GeneratingFunction, QuadraticOT, Reflection, Refraction

HOLDS, STRICT, FAILS, INCONCLUSIVE = "holds", "holds strictly", "fails", "inconclusive"


@dataclass
class ConditionEntry:
    name: str
    status: str
    margin: float
    n_samples: int
    n_excluded: int = 0
    worst: dict = field(default_factory=dict)
    note: str = ""

    def to_dict(self):
        return {"status": self.status, "margin": self.margin, "n_samples": self.n_samples,
                "n_excluded": self.n_excluded, "worst": self.worst, "note": self.note}


@dataclass
class ConditionReport:
    entries: dict
    constants: dict
    theorem_hypotheses: bool = False

    def __getitem__(self, key):
        return self.entries[key]

    def to_dict(self):
        return {"conditions": {k: v.to_dict() for k, v in self.entries.items()},
                "constants": self.constants, "theorem_hypotheses": self.theorem_hypotheses}


# --------------------------------------------------------------------------
# sampling


def sample_jets(spec: GeneratingFunction, source: DomainSpec, target: DomainSpec, window,
                m: int, rng, *, boundary: bool = False):
    """Jets (x, u, p) with x in the source, u in ``window`` and Y(x, u, p) in the target.

    Returns (x, u, p, y, z) after dropping samples with u outside J(x, y).
    """
    if boundary:
        x = source.boundary(rng.uniform(0, 2 * np.pi, m)).x
    else:
        x = source.sample_interior(rng, m)
    y = target.sample_interior(rng, m, shrink=0.98)
    u = rng.uniform(window[0], window[1], m)
    jl, jh = spec.interval_J(x, y)
    keep = (u > jl) & (u < jh)
    x, y, u = x[keep], y[keep], u[keep]
    z = dual_gstar(spec, x, y, u)
    p = spec.evaluate(x, y, z).g_x
    return x, u, p, y, z


def _A_safe(spec, x, u, p):
    Y, Z, ok, _ = dual_yz(spec, x, u, p)
    A = spec.closed_form_A(x, u, p, np.where(ok, Z, 1.0))
    if A is None:
        A = spec.evaluate(x, np.where(ok[:, None], Y, x), np.where(ok, Z, 1.0)).g_xx
    A = np.where(ok[:, None, None], A, np.nan)
    return A, ok


# --------------------------------------------------------------------------
# A3w / A3


def check_A3w(spec, source, target, window, *, n_samples: int = 500, n_directions: int = 32,
              seed: int = 0, strict_tol: float = 1e-6, weak_tol: float = 1e-6) -> ConditionEntry:
    """Min over jets and orthogonal unit pairs of D^2_{p_k p_l} A_ij xi_i xi_j eta_k eta_l.

    The second derivative uses centered differences in p with step 1e-3 * (1 + |p|).
    """
    rng = np.random.default_rng(seed)
    x, u, p, _, _ = sample_jets(spec, source, target, window, n_samples, rng)
    alpha = np.pi * np.arange(n_directions) / n_directions
    xi = np.stack([np.cos(alpha), np.sin(alpha)], -1)
    eta = np.stack([-np.sin(alpha), np.cos(alpha)], -1)
    hp = 1e-3 * (1.0 + np.linalg.norm(p, axis=-1))
    m, d = len(u), n_directions
    X = np.repeat(x, d, 0)
    U = np.repeat(u, d)
    P = np.repeat(p, d, 0)
    XI = np.tile(xi, (m, 1))
    ETA = np.tile(eta, (m, 1))
    H = np.repeat(hp, d)
    A0, ok0 = _A_safe(spec, X, U, P)
    Ap, okp = _A_safe(spec, X, U, P + H[:, None] * ETA)
    Am, okm = _A_safe(spec, X, U, P - H[:, None] * ETA)
    q = lambda A: np.einsum("mi,mij,mj->m", XI, A, XI)
    form = (q(Ap) - 2 * q(A0) + q(Am)) / H**2
    good = (ok0 & okp & okm).reshape(m, d).all(1)
    excluded = int(m - good.sum())
    form = form.reshape(m, d)[good]
    if excluded > 0.1 * max(m, 1) or not good.any():
        return ConditionEntry("A3w", INCONCLUSIVE, float("nan"), m, excluded,
                              note="more than 10% of jets excluded by dual-map failures")
    scale = 1.0 + np.abs(A0.reshape(m, d, 2, 2)[good]).max()
    k = np.unravel_index(np.argmin(form), form.shape)
    margin = float(form[k])
    if margin > strict_tol:
        status = STRICT
    elif margin >= -weak_tol * scale:
        status = HOLDS
    else:
        status = FAILS
    idx = np.nonzero(good)[0][k[0]]
    return ConditionEntry("A3w", status, margin, m, excluded,
                          worst={"x": x[idx].tolist(), "u": float(u[idx]), "p": p[idx].tolist(),
                                 "xi": xi[k[1]].tolist()})


# --------------------------------------------------------------------------
# A4w / A4*w


def check_A4(spec, source, target, window, *, n_samples: int = 500, seed: int = 0,
             tol: float = 1e-8) -> ConditionEntry:
    """Eigenvalue range of D_u A; A4w if it is >= 0, A4*w if <= 0."""
    rng = np.random.default_rng(seed)
    x, u, p, _, _ = sample_jets(spec, source, target, window, n_samples, rng)
    hu = 1e-4 * (1.0 + np.abs(u))
    Ap, okp = _A_safe(spec, x, u + hu, p)
    Am, okm = _A_safe(spec, x, u - hu, p)
    good = okp & okm
    m = len(u)
    excluded = int(m - good.sum())
    if excluded > 0.1 * max(m, 1) or not good.any():
        return ConditionEntry("A4", INCONCLUSIVE, float("nan"), m, excluded)
    dA = (Ap[good] - Am[good]) / (2 * hu[good, None, None])
    dA = 0.5 * (dA + np.swapaxes(dA, -1, -2))
    eig = np.linalg.eigvalsh(dA)
    lo, hi = float(eig[:, 0].min()), float(eig[:, -1].max())
    scale = 1.0 + np.abs(Ap[good]).max()
    t = tol * scale
    inc, dec = lo >= -t, hi <= t
    status = "both" if inc and dec else "A4w" if inc else "A4*w" if dec else "neither"
    return ConditionEntry("A4", status, lo if inc else -hi, m, excluded,
                          note=f"min eig D_uA = {lo:.6g}, max eig D_uA = {hi:.6g}")


# --------------------------------------------------------------------------
# A1, A2, A1*


def check_A1_A2_A1star(spec, source, target, window, *, n_samples: int = 10000, seed: int = 0,
                       n_groups: int = 50) -> dict:
    rng = np.random.default_rng(seed)
    x, u, p, y, z = sample_jets(spec, source, target, window, n_samples, rng)
    v = spec.evaluate(x, y, z)
    out = {}
    gz = float(v.g_z.max())
    _, _, detE = matrix_E(spec, x, y, z, check=False)
    dmin = float(np.abs(detE).min())
    ok2 = gz < 0 and dmin > 1e-12
    out["A2"] = ConditionEntry("A2", HOLDS if ok2 else FAILS, min(-gz, dmin), len(u),
                               note=f"max g_z = {gz:.6g}, min |det E| = {dmin:.6g}")
    Y, Z, ok, _ = dual_yz(spec, x, v.g, v.g_x)
    err = np.where(ok, np.maximum(np.abs(Y - y).max(-1), np.abs(Z - z)), np.inf)
    e = float(err.max())
    out["A1"] = ConditionEntry("A1", HOLDS if e < 1e-8 else FAILS, -e, len(u),
                               note=f"max round-trip error {e:.3e}")
    # A1*: Q(., y, z) injective on sampled x; nonsingular Jacobian -E^T/g_z
    collisions, checked = 0, 0
    per = max(len(u) // n_groups, 2)
    for g in range(n_groups):
        k = g % len(u)
        xs = source.sample_interior(rng, per)
        yk = np.broadcast_to(y[k], xs.shape)
        zk = np.full(per, z[k])
        lo, hi = spec.z_bounds(xs, yk)
        adm = (zk > lo) & (zk < hi)
        xs, yk, zk = xs[adm], yk[adm], zk[adm]
        if len(xs) < 2:
            continue
        Q = map_Q(spec, xs, yk, zk)
        dq = np.linalg.norm(Q[:, None] - Q[None], axis=-1)
        dx = np.linalg.norm(xs[:, None] - xs[None], axis=-1)
        collisions += int(np.sum((dq < 1e-8) & (dx > 1e-6)) // 2)
        checked += len(xs)
    ok1s = collisions == 0 and dmin > 1e-12
    out["A1*"] = ConditionEntry("A1*", HOLDS if ok1s else FAILS, float(-collisions), checked,
                                note=f"{collisions} collisions among Q images")
    return out


# --------------------------------------------------------------------------
# A5 constants


def _max_distance(a: DomainSpec, b: DomainSpec, m: int = 2048) -> float:
    if a.kind == "disc" and b.kind == "disc":
        return float(np.linalg.norm(np.subtract(a.center, b.center)) + a.radii[0] + b.radii[0])
    th = np.linspace(0, 2 * np.pi, m, endpoint=False)
    pa, pb = a.boundary(th).x, b.boundary(th).x
    best = 0.0
    for chunk in np.array_split(pa, 16):
        best = max(best, float(np.linalg.norm(chunk[:, None] - pb[None], axis=-1).max()))
    return best


def _support(d: DomainSpec, v, m: int = 2048):
    """sup_{x in d} x.v for directions v (k, 2)."""
    th = np.linspace(0, 2 * np.pi, m, endpoint=False)
    pts = d.boundary(th).x
    return (np.atleast_2d(v) @ pts.T).max(1)


def _sup_over(fun, target: DomainSpec, rng, m: int = 4000):
    """Dense sampling of the target plus local refinement of the best points."""
    th = rng.uniform(0, 2 * np.pi, m // 2)
    pts = np.concatenate([target.sample_interior(rng, m // 2), target.boundary(th).x])
    vals = fun(pts)
    best = float(vals.max())
    for k in np.argsort(vals)[-5:]:
        def obj(y):
            pen = max(target.phi(y[None])[0], 0.0)
            return -fun(y[None])[0] + 1e6 * pen * pen
        res = minimize(obj, pts[k], method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-14})
        if target.phi(res.x[None])[0] <= 1e-12:
            best = max(best, float(-res.fun))
    return best


def constants_A5(spec: GeneratingFunction, source: DomainSpec, target: DomainSpec, *,
                 delta: float = 0.5, seed: int = 0) -> dict:
    """J_0 endpoints and the gradient bound K_0 for the model variant."""
    rng = np.random.default_rng(seed)
    if isinstance(spec, QuadraticOT):
        th = np.linspace(0, 2 * np.pi, 4096, endpoint=False)
        K0 = float(np.linalg.norm(target.boundary(th).x, axis=-1).max())
        if target.kind == "disc":
            K0 = float(np.linalg.norm(target.center) + target.radii[0])
        return {"J0": [-np.inf, np.inf], "K0": K0}
    prof = spec.profile
    if isinstance(spec, Reflection):
        if prof.kind == "constant":
            m0, K0 = float(prof.c), 1.0
        else:
            f = lambda y: prof.value(y) - np.sum(y * prof.grad(y), -1) + _support(source, prof.grad(y))
            m0 = _sup_over(f, target, rng)
            gnorm = lambda y: (lambda g: np.sqrt(1 + g * g) + g)(np.linalg.norm(prof.grad(y), axis=-1))
            K0 = _sup_over(gnorm, target, rng)
        return {"J0": [m0, np.inf], "m0": m0, "K0": K0}
    if isinstance(spec, Refraction):
        k, kp = spec.kappa, spec.kappa_prime
        d = delta if k < 1 else 0.0
        coef = min(k, 1.0) / kp * (1 + d)
        if prof.kind == "constant":
            M0 = float(prof.c - coef * _max_distance(source, target))
        else:
            th = np.linspace(0, 2 * np.pi, 512, endpoint=False)
            xb = source.boundary(th).x

            def neg_inner(y):
                w = xb[None] - y[:, None]
                tan = prof.value(y)[:, None] + np.einsum("mki,mi->mk", w, prof.grad(y))
                cone = prof.value(y)[:, None] - coef * np.linalg.norm(w, axis=-1)
                return -np.minimum(tan, cone).min(1)

            M0 = -_sup_over(neg_inner, target, rng)
        K0 = 2.0 / (k * kp * d) if k < 1 else 1.0 / kp
        out = {"J0": [-np.inf, M0], "M0": M0, "K0": K0, "kappa_prime": kp}
        if k < 1:
            out["delta"] = d
        return out
    raise TypeError(f"no A5 constants for {type(spec).__name__}")


def check_A5(spec, source, target, window, constants, *, n_samples: int = 2000, seed: int = 0):
    """Sampled |g_x| against K_0 on the height window (which must lie in J_0)."""
    rng = np.random.default_rng(seed)
    lo, hi = constants["J0"]
    inside = lo <= window[0] and window[1] <= hi
    x, u, p, _, _ = sample_jets(spec, source, target, window, n_samples, rng)
    gmax = float(np.linalg.norm(p, axis=-1).max())
    margin = constants["K0"] - gmax
    ok = inside and margin > 0
    note = f"max |g_x| = {gmax:.6g}; window {'inside' if inside else 'outside'} J0"
    return ConditionEntry("A5", HOLDS if ok else FAILS, margin, len(u), note=note)


# --------------------------------------------------------------------------
# full suite


def check_all(spec, source, target, window, *, delta: float = 0.5, seed: int = 0,
              n_samples: int = 2000, tol: float = 1e-6) -> ConditionReport:
    """Everything needed to decide whether the existence hypotheses hold at the sampled tolerance."""
    consts = constants_A5(spec, source, target, delta=delta, seed=seed)
    entries = check_A1_A2_A1star(spec, source, target, window, n_samples=n_samples, seed=seed)
    entries["A3w"] = check_A3w(spec, source, target, window, n_samples=max(n_samples // 10, 50), seed=seed)
    entries["A4"] = check_A4(spec, source, target, window, n_samples=n_samples // 4, seed=seed)
    entries["A5"] = check_A5(spec, source, target, window, consts, n_samples=n_samples, seed=seed)
    yc = check_Y_convexity(source, target, window, spec, n_samples=n_samples, seed=seed, tol=tol)
    ysc = check_Ystar_convexity(target, source, window, spec, seed=seed, tol=tol)
    entries["Y-convex"] = ConditionEntry("Y-convex", STRICT if yc.convex else FAILS, yc.margin,
                                         yc.n_samples, worst=yc.worst)
    entries["Y*-convex"] = ConditionEntry("Y*-convex", STRICT if ysc.convex else FAILS, ysc.margin,
                                          ysc.n_samples, worst=ysc.worst)
    good = lambda k: entries[k].status in (HOLDS, STRICT)
    a3w = good("A3w")
    structure = (entries["A4"].status in ("A4w", "A4*w", "both")) or entries["A3w"].status == STRICT
    ok = all(good(k) for k in ("A1", "A2", "A1*", "A5", "Y-convex", "Y*-convex")) and a3w and structure
    return ConditionReport(entries=entries, constants=consts, theorem_hypotheses=bool(ok))
