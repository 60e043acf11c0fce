"""Dual quantities Y, Z, E, A, B, Q of a generating function and the T-map."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .genfun import AdmissibilityError, GeneratingFunction, GValues

F_STAR_FLOOR = 1e-8


class DualMapError(ArithmeticError):
    """The generating equations have no admissible solution for a jet."""


class DegeneracyError(ArithmeticError):
    """det E is numerically zero."""


@dataclass
class Jet1:
    """One-jet (x, u, p); arrays with a shared batch shape."""

    x: np.ndarray
    u: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, float)
        self.p = np.asarray(self.p, float)
        self.u = np.asarray(self.u, float)


@dataclass
class DualEval:
    Y: np.ndarray
    Z: np.ndarray
    E: np.ndarray
    Einv: np.ndarray
    detE: np.ndarray
    A: np.ndarray
    Q: np.ndarray
    residual: np.ndarray
    ok: np.ndarray
    G_p: Optional[np.ndarray] = None


def _residual(spec, x, u, p, y, z):
    v = spec.evaluate(x, y, z)
    r = np.concatenate([(v.g - u)[..., None], v.g_x - p], axis=-1)
    return r, v


def _inside_bounds(spec, x, y, z):
    lo, hi = spec.z_bounds(x, y)
    return (z > lo) & (z < hi)


def dual_yz(spec: GeneratingFunction, x, u, p, *, tol: float = 1e-13, maxiter: int = 60):
    """Solve g(x, Y, Z) = u, g_x(x, Y, Z) = p.

    Returns (Y, Z, ok, residual).  Entries that fail are NaN with ok False.
    Closed forms are used where exact; otherwise damped Newton on the
    (n+1)-system seeded from the flat-target closed form.
    """
    x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
    u = np.broadcast_to(np.asarray(u, float), x.shape[:-1]).astype(float)
    with np.errstate(all="ignore"):
        Y, Z = spec.flat_duals(x, u, p)
        Y = np.array(Y, dtype=float)
        Z = np.array(Z, dtype=float)
        if not spec.has_exact_duals:
            Y, Z = _newton_duals(spec, x, u, p, Y, Z, tol=tol, maxiter=maxiter)
        ok, res = _accept(spec, x, u, p, Y, Z)
        if not spec.has_exact_duals and not ok.all() and hasattr(spec, "profile"):
            bad = ~ok
            Yb, Zb = _height_reduction(spec, x[bad], u[bad], p[bad])
            Yb, Zb = _newton_duals(spec, x[bad], u[bad], p[bad], Yb, Zb, tol=tol, maxiter=maxiter)
            Y[bad], Z[bad] = Yb, Zb
            ok, res = _accept(spec, x, u, p, Y, Z)
    Y = np.where(ok[..., None], Y, np.nan)
    Z = np.where(ok, Z, np.nan)
    return Y, Z, ok, np.where(ok, res, np.inf)


def _accept(spec, x, u, p, Y, Z):
    ok = np.isfinite(Z) & np.all(np.isfinite(Y), -1)
    Ys = np.where(ok[..., None], Y, x)
    Zs = np.where(ok, Z, _safe_z(spec, x, Ys))
    ok &= _inside_bounds(spec, x, Ys, Zs)
    r, _ = _residual(spec, x, u, p, Ys, Zs)
    res = np.max(np.abs(r), -1)
    scale = 1.0 + np.abs(u) + np.max(np.abs(p), -1)
    ok &= res <= 1e-8 * scale
    return ok, res


def _height_reduction(spec, x, u, p):
    """Scalar fallback for g = Phi(y) + h(x - y, z).

    The duals coincide with the flat duals at frozen height c = Phi(Y), so
    we root-find F(c) = c - Phi(Y_flat(c)) on the admissible side of u.
    """
    side = spec.height_side(u, p)
    ladder = np.concatenate([[0.0], 2.0 ** np.arange(-30, 21)])

    def F(t):
        c = u[:, None] + side[:, None] * t
        Yc, _ = spec.flat_duals(x[:, None, :], u[:, None], p[:, None, :], phi=c)
        return c - spec.profile.value(Yc)

    with np.errstate(all="ignore"):
        vals = F(np.broadcast_to(ladder[1:], (len(u), len(ladder) - 1)))
        sgn = np.sign(vals)
        change = (sgn[:, :-1] * sgn[:, 1:] <= 0) & np.isfinite(vals[:, :-1]) & np.isfinite(vals[:, 1:])
        has = change.any(1)
        k = np.argmax(change, 1)
        a = np.where(has, ladder[1:][k], np.nan)
        b = np.where(has, ladder[1:][k + 1], np.nan)
        fa = vals[np.arange(len(u)), k]
        for _ in range(100):
            m = 0.5 * (a + b)
            fm = F(m[:, None])[:, 0]
            left = np.sign(fm) == np.sign(fa)
            a = np.where(left, m, a)
            fa = np.where(left, fm, fa)
            b = np.where(left, b, m)
        t = 0.5 * (a + b)
        return spec.flat_duals(x, u, p, phi=u + side * t)


def _newton_duals(spec, x, u, p, Y, Z, *, tol, maxiter):
    with np.errstate(all="ignore"):
        return _newton_duals_impl(spec, x, u, p, Y, Z, tol=tol, maxiter=maxiter)


def _newton_duals_impl(spec, x, u, p, Y, Z, *, tol, maxiter):
    n = x.shape[-1]
    shape = x.shape[:-1]
    xf, pf, uf = x.reshape(-1, n), p.reshape(-1, n), u.reshape(-1)
    y, z = Y.reshape(-1, n).copy(), Z.reshape(-1).copy()
    # seed repair: keep z inside its open bounds
    lo, hi = spec.z_bounds(xf, y)
    bad = ~((z > lo) & (z < hi)) | ~np.isfinite(z)
    if np.any(bad):
        mid = np.where(np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi),
                       np.where(np.isfinite(lo), lo + 1.0, hi - 1.0))
        z[bad] = mid[bad]
    active = np.ones(len(z), bool)
    r, v = _residual(spec, xf, uf, pf, y, z)
    rn = np.linalg.norm(r, axis=-1)
    for _ in range(maxiter):
        active &= rn > tol * (1.0 + np.abs(uf))
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        J = np.zeros((len(idx), n + 1, n + 1))
        J[:, 0, :n] = v.g_y[idx]
        J[:, 0, n] = v.g_z[idx]
        J[:, 1:, :n] = v.g_xy[idx]
        J[:, 1:, n] = v.g_xz[idx]
        try:
            step = -np.linalg.solve(J, r[idx][..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.zeros((len(idx), n + 1))
            for k in range(len(idx)):
                step[k] = -np.linalg.lstsq(J[k], r[idx[k]], rcond=None)[0]
        alpha = np.ones(len(idx))
        accepted = np.zeros(len(idx), bool)
        for _ls in range(30):
            yt = y[idx] + alpha[:, None] * step[:, :n]
            zt = z[idx] + alpha * step[:, n]
            inb = _inside_bounds(spec, xf[idx], yt, zt)
            rt, _ = _residual(spec, xf[idx], uf[idx], pf[idx], yt, np.where(inb, zt, z[idx]))
            rtn = np.where(inb, np.linalg.norm(rt, axis=-1), np.inf)
            good = (rtn < (1 - 1e-4 * alpha) * rn[idx]) & ~accepted
            sel = idx[good]
            y[sel] = yt[good]
            z[sel] = zt[good]
            accepted |= good
            if accepted.all():
                break
            alpha = np.where(accepted, alpha, 0.5 * alpha)
        stalled = idx[~accepted]
        active[stalled] = False
        r, v = _residual(spec, xf, uf, pf, y, z)
        rn = np.linalg.norm(r, axis=-1)
    return y.reshape(shape + (n,)), z.reshape(shape)


def solve_duals(spec: GeneratingFunction, jet: Jet1, *, strict: bool = True,
                target_grad: Optional[Callable] = None) -> DualEval:
    """Full dual evaluation at a jet.

    With ``strict`` a failure anywhere raises DualMapError; otherwise failed
    entries are NaN and flagged in ``ok``.  ``target_grad`` (a callable giving
    D phi* at Y) adds the obliqueness vector G_p = E^{-T} D phi*(Y).
    """
    Y, Z, ok, res = dual_yz(spec, jet.x, jet.u, jet.p)
    ok = np.asarray(ok)
    if strict and not ok.all():
        bad = np.argmin(ok.reshape(-1))
        raise DualMapError(
            f"generating equations not solvable (jet outside U) at entry {bad}: "
            f"x={jet.x.reshape(-1, jet.x.shape[-1])[bad]}, u={np.ravel(jet.u)[bad] if jet.u.ndim else jet.u}"
        )
    Ys = np.where(ok[..., None], Y, jet.x)
    Zs = np.where(ok, Z, _safe_z(spec, jet.x, Ys))
    v = spec.evaluate(jet.x, Ys, Zs)
    E = _E_from_values(v)
    detE = np.linalg.det(E)
    with np.errstate(all="ignore"):
        Einv = np.linalg.inv(np.where((np.abs(detE) > 0)[..., None, None], E, np.eye(E.shape[-1])))
    A = spec.closed_form_A(jet.x, jet.u, jet.p, Zs)
    if A is None:
        A = v.g_xx
    Q = -v.g_y / v.g_z[..., None]
    nanm = ~ok
    for arr in (E, Einv, A):
        arr[nanm] = np.nan
    Q[nanm] = np.nan
    detE = np.where(ok, detE, np.nan)
    G_p = None
    if target_grad is not None:
        G_p = np.einsum("...ji,...j->...i", Einv, target_grad(Ys))
        G_p[nanm] = np.nan
    return DualEval(Y=Y, Z=Z, E=E, Einv=Einv, detE=detE, A=A, Q=Q, residual=res, ok=ok, G_p=G_p)


def _safe_z(spec, x, y):
    lo, hi = spec.z_bounds(x, y)
    with np.errstate(invalid="ignore"):
        return np.where(np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi),
                        np.where(np.isfinite(lo), lo + 1.0, np.where(np.isfinite(hi), hi - 1.0, 0.0)))


def _E_from_values(v: GValues):
    return v.g_xy - np.einsum("...i,...j->...ij", v.g_xz, v.g_y) / v.g_z[..., None, None]


def matrix_E(spec: GeneratingFunction, x, y, z, *, check: bool = True):
    """E = g_xy - g_xz (x) g_y / g_z with inverse and determinant."""
    v = spec.evaluate(x, y, z)
    E = _E_from_values(v)
    detE = np.linalg.det(E)
    if check and np.any(np.abs(detE) < 1e-12):
        raise DegeneracyError(f"|det E| below 1e-12 (min {np.min(np.abs(detE)):.3e})")
    return E, np.linalg.inv(E), detE


def matrix_A(spec: GeneratingFunction, jet: Jet1) -> np.ndarray:
    """A(x, u, p) = g_xx(x, Y, Z); closed form for the optics models."""
    Y, Z, ok, _ = dual_yz(spec, jet.x, jet.u, jet.p)
    if not ok.all():
        raise DualMapError("matrix_A: jet outside the admissible set")
    A = spec.closed_form_A(jet.x, jet.u, jet.p, Z)
    if A is None:
        A = spec.evaluate(jet.x, Y, Z).g_xx
    return A


def scalar_B(spec: GeneratingFunction, jet: Jet1, f: Callable, f_star: Callable) -> np.ndarray:
    """B = |det E| f(x) / f*(Y) for the separable optics right-hand side."""
    Y, Z, ok, _ = dual_yz(spec, jet.x, jet.u, jet.p)
    if not ok.all():
        raise DualMapError("scalar_B: jet outside the admissible set")
    _, _, detE = matrix_E(spec, jet.x, Y, Z)
    fs = np.asarray(f_star(Y), float)
    if np.any(fs < F_STAR_FLOOR):
        raise ValueError(f"f* below positive floor {F_STAR_FLOOR:g} at a target point")
    return np.abs(detE) * np.asarray(f(jet.x), float) / fs


def dual_gstar(spec: GeneratingFunction, x, y, u, *, check: bool = True, tol: float = 1e-13):
    """z = g*(x, y, u), the root of g(x, y, z) = u (g strictly decreasing in z).

    Bracketing ladder from the finite end of I(x, y), bisection, then Newton.
    """
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    u = np.broadcast_to(np.asarray(u, float), x.shape[:-1]).astype(float)
    if spec.name == "quadratic_ot":
        return np.sum(x * y, -1) - u
    if check:
        jlo, jhi = spec.interval_J(x, y)
        if np.any(~((u > jlo) & (u < jhi))):
            raise AdmissibilityError("dual_gstar: u outside the range J(x, y)")
    shape = u.shape
    n = x.shape[-1]
    xf, yf, uf = x.reshape(-1, n), y.reshape(-1, n), u.reshape(-1)
    lo, hi = spec.z_bounds(xf, yf)
    m = len(uf)
    ladder = 2.0 ** np.arange(-50, 51)
    # candidate z values, ordered increasing
    with np.errstate(all="ignore"):
        if np.all(np.isfinite(lo)):
            cand = lo[:, None] + ladder[None, :]
        else:
            cand = hi[:, None] - ladder[None, ::-1]
        gv = spec.evaluate(xf[:, None, :], yf[:, None, :], cand).g - uf[:, None]
    # g decreasing: find first index with gv < 0
    neg = gv < 0
    has = neg.any(1) & (gv[:, 0] > 0 if True else True)
    first = np.argmax(neg, axis=1)
    ok = has & (first > 0)
    a = np.where(ok, cand[np.arange(m), np.maximum(first - 1, 0)], np.nan)
    b = np.where(ok, cand[np.arange(m), first], np.nan)
    # the root may sit below the first ladder rung (close to a finite endpoint)
    edge = has & (first == 0)
    if np.any(edge):
        if np.all(np.isfinite(lo)):
            a = np.where(edge, lo, a)
            b = np.where(edge, cand[:, 0], b)
        else:
            a = np.where(edge, cand[:, 0], a)
            b = np.where(edge, hi, b)
        ok |= edge
    with np.errstate(all="ignore"):
        for _ in range(80):
            mid = 0.5 * (a + b)
            gm = spec.evaluate(xf, yf, mid).g - uf
            a = np.where(gm > 0, mid, a)
            b = np.where(gm > 0, b, mid)
        z = 0.5 * (a + b)
        for _ in range(3):
            v = spec.evaluate(xf, yf, z)
            zn = z - (v.g - uf) / v.g_z
            inside = (zn > lo) & (zn < hi)
            z = np.where(inside, zn, z)
        res = np.abs(spec.evaluate(xf, yf, z).g - uf)
    ok &= res <= 1e-10 * (1 + np.abs(uf))
    if check and not ok.all():
        raise AdmissibilityError("dual_gstar: no root of g(x, y, .) = u in I(x, y)")
    return np.where(ok, z, np.nan).reshape(shape)


def map_Q(spec: GeneratingFunction, x, y, z):
    """Q = -g_y / g_z (the dual map of condition A1*)."""
    v = spec.evaluate(x, y, z)
    return -v.g_y / v.g_z[..., None]


@dataclass
class TMap:
    Tu: np.ndarray
    Z: np.ndarray
    detDTu: np.ndarray
    detDTu_fd: np.ndarray
    detE: np.ndarray
    M: np.ndarray
    min_eig: np.ndarray
    elliptic: np.ndarray
    ok: np.ndarray


def map_T(spec: GeneratingFunction, u_field, grid) -> TMap:
    """Discrete T-map Tu = Y(x, u, Du) and det DTu = det(D^2u - A)/det E.

    The finite-difference Jacobian of the nodal Tu field is returned as a
    cross-check in ``detDTu_fd``.
    """
    ops = grid.operators()
    u = np.asarray(u_field, float)
    p = ops.gradient(u)
    H = ops.hessian(u)
    d = solve_duals(spec, Jet1(grid.points, u, p), strict=False)
    M = H - d.A
    eig = np.linalg.eigvalsh(np.where(d.ok[:, None, None], M, np.eye(2)))
    mineig = np.where(d.ok, eig[:, 0], np.nan)
    detDTu = np.linalg.det(M) / d.detE
    Y = np.where(d.ok[:, None], d.Y, 0.0)
    DT = np.stack([ops.gradient(Y[:, 0]), ops.gradient(Y[:, 1])], axis=1)
    detfd = np.linalg.det(DT)
    return TMap(Tu=d.Y, Z=d.Z, detDTu=detDTu, detDTu_fd=detfd, detE=d.detE, M=M,
                min_eig=mineig, elliptic=d.ok & (mineig > 0), ok=d.ok)
