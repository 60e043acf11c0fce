"""Homotopy continuation for the second boundary value problem.

At level t the discrete problem is

    log det(D^2u - A) = [tau (1 - t) + eps] (u - u0) + lam + log B_t   (interior)
    G_t(Y(x, u, Du)) = 0                                              (boundary)

with B_t = |det E| [t f + (1 - t) f*(Tu0) |det DTu0|] / f*(Y) and G_t the
defining function of a star-shaped domain moving radially from the image of
u0 to the target (see TargetPath).  At t = 0 the field u0 solves both
equations exactly.  ``lam`` is an optional scalar multiplier,
paired with one linear normalization of u, that absorbs the discrete
compatibility defect once the zeroth-order pin becomes weak.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import CubicSpline
from scipy.sparse.linalg import splu

from .domains import DomainSpec, Grid
from .dualmaps import Jet1, dual_yz, solve_duals

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Continuation could not proceed."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass
class HomotopyParams:
    tau: Optional[float] = None
    tau_safety: float = 4.0
    tau_min: float = 1.0
    eps0: float = 1e-2
    eps_factor: float = 0.25
    eps_min: float = 1e-6
    dt0: float = 0.1
    dt_min: float = 1e-4
    dt_max: float = 0.5
    grow: float = 1.5
    fast_iters: int = 4
    newton_tol: float = 1e-9
    max_newton: int = 15
    delta_min: float = 1e-8
    pin: str = "mean"  # mean | anchor | none
    anchor_value: Optional[float] = None
    multiplier_from_start: bool = True
    grad_guard_tol: float = 1e-3


@dataclass
class Problem:
    spec: object
    grid: Grid
    source: DomainSpec
    target: DomainSpec
    f: Callable
    f_star: Callable
    K0: float = np.inf
    target_center: Optional[np.ndarray] = None

    def __post_init__(self):
        b = self.grid.boundary_index
        self.gamma = self.source.boundary(self.grid.theta).normal
        self.bidx = b
        self.iidx = self.grid.interior_index
        self.fx = np.asarray(self.f(self.grid.points), float)


class TargetPath:
    """Star-shaped targets interpolated radially from omega* = Tu0(source) to the target.

    Both domains are written in polar form about a common center c; level t has
    radius (1 - t) r_omega + t r_target and boundary function |y - c| - r_t(angle).
    r_omega interpolates the images of the boundary nodes exactly, so the
    boundary condition holds at u0 for t = 0.  At t = 1 the target's own
    defining function is used.
    """

    def __init__(self, target: DomainSpec, Tu0_boundary, center, n_fine: int = 2048):
        self.target = target
        self.c = np.asarray(center, float)
        if target.phi(self.c[None])[0] >= 0:
            raise SolverError("homotopy center lies outside the target")
        v = np.asarray(Tu0_boundary, float) - self.c
        ang = np.arctan2(v[:, 1], v[:, 0])
        order = np.argsort(ang)
        a, r = ang[order], np.linalg.norm(v, axis=-1)[order]
        if np.any(np.diff(a) <= 0):
            raise SolverError("image of the boundary is not star-shaped about the homotopy center")
        self.r_omega = CubicSpline(np.append(a, a[0] + 2 * np.pi), np.append(r, r[0]), bc_type="periodic")
        th = np.linspace(-np.pi, np.pi, n_fine + 1)
        e = np.stack([np.cos(th[:-1]), np.sin(th[:-1])], -1)
        lo = np.zeros(n_fine)
        hi = np.full(n_fine, 4.0 * target.max_radius + np.linalg.norm(self.c - np.asarray(target.center)))
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            inside = target.phi(self.c + mid[:, None] * e) < 0
            lo, hi = np.where(inside, mid, lo), np.where(inside, hi, mid)
        rt = 0.5 * (lo + hi)
        self.r_target = CubicSpline(th, np.append(rt, rt[0]), bc_type="periodic")
        # star-shapedness of the target about c: a single crossing per ray
        probe = self.c + (0.999 * rt)[:, None] * e * np.linspace(0.01, 1, 50)[:, None, None]
        if np.any(target.phi(probe.reshape(-1, 2)) >= 0):
            raise SolverError("target is not star-shaped about the homotopy center")

    def radius(self, ang, t):
        a = np.mod(ang + np.pi, 2 * np.pi) - np.pi
        return (1 - t) * self.r_omega(np.mod(a - self.r_omega.x[0], 2 * np.pi) + self.r_omega.x[0]) + t * self.r_target(a)

    def G(self, y, t):
        if t >= 1.0:
            return self.target.phi(y)
        v = y - self.c
        return np.linalg.norm(v, axis=-1) - self.radius(np.arctan2(v[:, 1], v[:, 0]), t)


@dataclass
class SolverState:
    u: np.ndarray
    t: float
    eps: float
    lam: float
    u0: np.ndarray
    Tu0: np.ndarray
    detDTu0: np.ndarray
    phi_Tu0: np.ndarray
    fstar_Tu0: np.ndarray
    res_interior: float = np.nan
    res_boundary: float = np.nan
    min_oblique: float = np.nan
    min_lambda: float = np.nan
    clamps: int = 0
    penalty: float = 0.0
    max_grad: float = np.nan


def _ldet(M, delta):
    """log det with a C^2 extension of log below delta; returns value, dF/dM, clamp count, penalty."""
    Ms = 0.5 * (M + np.swapaxes(M, -1, -2))
    lam, V = np.linalg.eigh(Ms)
    small = lam < delta
    with np.errstate(divide="ignore", invalid="ignore"):
        d = lam - delta
        ext = np.log(delta) + d / delta - 0.5 * (d / delta) ** 2
        val = np.where(small, ext, np.log(np.where(small, 1.0, lam)))
        der = np.where(small, 1.0 / delta - d / delta**2, 1.0 / np.where(small, 1.0, lam))
    pen = np.where(small, (d / delta) ** 2, 0.0).sum(-1)
    Finv = np.einsum("...ik,...k,...jk->...ij", V, der, V)
    return val.sum(-1), Finv, int(small.any(-1).sum()), float(pen.sum()), lam[..., 0]


class HomotopySolver:
    def __init__(self, problem: Problem, params: HomotopyParams, u0: np.ndarray):
        self.pb = problem
        self.prm = params
        g = problem.grid
        self.ops = g.operators()
        self.D = self.ops.D
        self.D2 = self.ops.D2
        u0 = np.asarray(u0, float)
        Du0 = self.ops.gradient(u0)
        d0 = solve_duals(problem.spec, Jet1(g.points, u0, Du0))
        M0 = self.ops.hessian(u0) - d0.A
        det0 = np.linalg.det(M0)
        if np.any(det0[self.pb.iidx] <= 0):
            raise SolverError("initial field is not elliptic at every interior node")
        self.detDTu0 = det0 / np.abs(d0.detE)
        self.Tu0 = d0.Y
        fs = np.asarray(problem.f_star(d0.Y), float)
        self.state = SolverState(
            u=u0.copy(), t=0.0, eps=params.eps0, lam=0.0, u0=u0.copy(), Tu0=d0.Y,
            detDTu0=self.detDTu0, phi_Tu0=problem.target.phi(d0.Y), fstar_Tu0=fs)
        b = problem.bidx
        center = problem.target_center if problem.target_center is not None else d0.Y[problem.grid.domain_index].mean(0)
        self.path = TargetPath(problem.target, d0.Y[b], center)
        self.tau = params.tau if params.tau is not None else self.estimate_tau()
        self.trace: list[dict] = []
        w = g.cell_measure[: g.n_r * g.n_theta] * self.pb.fx
        self.mean_w = w / w.sum()
        inner = g.ring == 0
        self.anchor_w = inner / inner.sum()

    # ---- pointwise maps ----------------------------------------------------

    def _rhs_mass(self, t):
        st = self.state
        return t * self.pb.fx + (1 - t) * st.fstar_Tu0 * st.detDTu0

    def _interior_point(self, x, u, p, H, t, eps, lam, mass, u0):
        pb = self.pb
        Y, Z, ok, _ = dual_yz(pb.spec, x, u, p)
        d = solve_duals(pb.spec, Jet1(x, u, p), strict=False)
        c = self.tau * (1 - t) + eps
        val, Finv, nclamp, pen, mineig = _ldet(H - d.A, self.prm.delta_min)
        with np.errstate(divide="ignore", invalid="ignore"):
            fs = np.asarray(pb.f_star(np.where(d.ok[:, None], d.Y, 0.0)), float)
            R = val - c * (u - u0) - lam - np.log(np.abs(d.detE)) - np.log(mass) + np.log(fs)
        R = np.where(d.ok, R, np.nan)
        return R, Finv, nclamp, pen, mineig, d

    def _boundary_point(self, x, u, p, t):
        Y, _, ok, _ = dual_yz(self.pb.spec, x, u, p)
        G = self.path.G(np.where(ok[:, None], Y, self.path.c), t)
        return np.where(ok, G, np.nan)

    # ---- residual and Jacobian -----------------------------------------------

    def residual(self, u, t, eps, lam, *, jacobian=False):
        pb, g, st = self.pb, self.pb.grid, self.state
        ii, bb = pb.iidx, pb.bidx
        Du = self.ops.gradient(u)
        H = self.ops.hessian(u)
        x = g.points
        mass = self._rhs_mass(t)
        Ri, Finv, ncl, pen, mineig, d = self._interior_point(
            x[ii], u[ii], Du[ii], H[ii], t, eps, lam, mass[ii], st.u0[ii])
        Rb = self._boundary_point(x[bb], u[bb], Du[bb], t)
        info = {"clamps": ncl, "penalty": pen, "min_lambda": float(np.min(mineig)),
                "max_grad": float(np.max(np.linalg.norm(Du, axis=-1)))}
        R = np.empty(g.size)
        R[ii], R[bb] = Ri, Rb
        if not jacobian:
            return R, info
        # pointwise partials in u and p by centered differences at fixed Hessian
        def fi(uu, pp):
            return self._interior_point(x[ii], uu, pp, H[ii], t, eps, lam, mass[ii], st.u0[ii])[0]

        def fb(uu, pp):
            return self._boundary_point(x[bb], uu, pp, t)

        cols = {}
        for name, f, idx in (("i", fi, ii), ("b", fb, bb)):
            uu, pp = u[idx], Du[idx]
            hu = 1e-6 * (1 + np.abs(uu))
            du = (f(uu + hu, pp) - f(uu - hu, pp)) / (2 * hu)
            dp = []
            for k in range(2):
                e = np.zeros(2)
                e[k] = 1.0
                hp = 1e-6 * (1 + np.abs(pp[:, k]))
                dp.append((f(uu, pp + hp[:, None] * e) - f(uu, pp - hp[:, None] * e)) / (2 * hp))
            cols[name] = (du, dp)
        n = g.size
        du_i, dp_i = cols["i"]
        du_b, dp_b = cols["b"]
        diag_u = np.zeros(n)
        diag_u[ii], diag_u[bb] = du_i, du_b
        Jm = sp.diags(diag_u)
        for k in range(2):
            c = np.zeros(n)
            c[ii], c[bb] = dp_i[k], dp_b[k]
            Jm = Jm + sp.diags(c) @ self.D[k]
        for a in range(2):
            for b in range(2):
                c = np.zeros(n)
                c[ii] = Finv[:, a, b]
                Jm = Jm + sp.diags(c) @ self.D2[a][b]
        oblique = dp_b[0] * pb.gamma[:, 0] + dp_b[1] * pb.gamma[:, 1]
        info["min_oblique"] = float(oblique.min())
        return R, info, Jm.tocsc()

    # ---- Newton ---------------------------------------------------------------

    def _constraint(self, u, t):
        prm, st = self.prm, self.state
        if prm.pin == "anchor":
            a0 = float(self.anchor_w @ st.u0)
            a1 = prm.anchor_value if prm.anchor_value is not None else a0
            return self.anchor_w, float(self.anchor_w @ u) - ((1 - t) * a0 + t * a1)
        return self.mean_w, float(self.mean_w @ (u - st.u0))

    def newton(self, u, t, eps, lam, *, use_multiplier: bool, max_iter=None, tol=None):
        prm = self.prm
        max_iter = max_iter or prm.max_newton
        tol = tol or prm.newton_tol
        n = len(u)
        ii = self.pb.iidx
        history = []
        it = 0
        while True:
            R, info, J = self.residual(u, t, eps, lam, jacobian=True)
            if use_multiplier:
                w, cval = self._constraint(u, t)
                Rfull = np.concatenate([R, [cval]])
            else:
                Rfull = R
            if not np.all(np.isfinite(Rfull)):
                return u, lam, False, it, info, history, "non-finite residual"
            rn = float(np.abs(Rfull).max())
            history.append(rn)
            if info.get("min_oblique", 1.0) <= 0:
                return u, lam, False, it, info, history, "obliqueness lost"
            if rn <= tol:
                info.update(res_interior=float(np.abs(R[ii]).max()),
                            res_boundary=float(np.abs(R[self.pb.bidx]).max()))
                return u, lam, True, it, info, history, ""
            if it >= max_iter:
                return u, lam, False, it, info, history, "max Newton iterations"
            if use_multiplier:
                col = np.zeros(n)
                col[ii] = -1.0
                K = sp.bmat([[J, sp.csc_matrix(col[:, None])], [sp.csr_matrix(w[None, :]), None]], format="csc")
            else:
                K = J
            try:
                step = -splu(K).solve(Rfull)
            except RuntimeError as exc:
                return u, lam, False, it, info, history, f"linear solve failed: {exc}"
            du = step[:n]
            dl = step[n] if use_multiplier else 0.0
            alpha = 1.0
            accepted = False
            while alpha >= 1e-12 / max(1.0, float(np.abs(du).max())):
                un, ln = u + alpha * du, lam + alpha * dl
                Rn, _ = self.residual(un, t, eps, ln)
                if use_multiplier:
                    Rn = np.concatenate([Rn, [self._constraint(un, t)[1]]])
                rnn = float(np.abs(Rn).max()) if np.all(np.isfinite(Rn)) else np.inf
                if rnn <= (1 - 1e-4 * alpha) * rn:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                # a full step that lands at roundoff level is still progress
                if rn < 100 * tol:
                    info.update(res_interior=float(np.abs(R[ii]).max()),
                                res_boundary=float(np.abs(R[self.pb.bidx]).max()))
                    return u, lam, True, it, info, history, "stagnated at roundoff level"
                return u, lam, False, it, info, history, "line search stall"
            u, lam = un, ln
            it += 1
            # contraction lost near tol: the residual sits on the stencil's roundoff floor
            if rnn < 100 * tol and rnn > 0.5 * rn:
                Rf, info = self.residual(u, t, eps, lam)
                info.update(res_interior=float(np.abs(Rf[ii]).max()),
                            res_boundary=float(np.abs(Rf[self.pb.bidx]).max()))
                history.append(rnn)
                return u, lam, True, it, info, history, "stagnated at roundoff level"

    # ---- tau --------------------------------------------------------------------

    def estimate_tau(self, n_samples: int = 400, seed: int = 0) -> float:
        """Safety factor times sampled bounds of |D_u A|, |D_p A|, |D_u log B|, |D_p log B|."""
        pb, st = self.pb, self.state
        rng = np.random.default_rng(seed)
        idx = rng.choice(pb.grid.size, size=min(n_samples, pb.grid.size), replace=False)
        x = pb.grid.points[idx]
        u = st.u0[idx]
        p = self.ops.gradient(st.u0)[idx]

        def parts(uu, pp):
            d = solve_duals(pb.spec, Jet1(x, uu, pp), strict=False)
            fs = np.asarray(pb.f_star(np.where(d.ok[:, None], d.Y, 0.0)), float)
            return d.A, np.log(np.abs(d.detE)) - np.log(fs)

        h = 1e-6
        A0, _ = parts(u, p)
        Ap, Lp = parts(u + h, p)
        Am, Lm = parts(u - h, p)
        C = np.nanmax(np.abs(Ap - Am)) / (2 * h) + np.nanmax(np.abs(Lp - Lm)) / (2 * h)
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            Ap, Lp = parts(u, p + e)
            Am, Lm = parts(u, p - e)
            C += np.nanmax(np.abs(Ap - Am)) / (2 * h) + np.nanmax(np.abs(Lp - Lm)) / (2 * h)
        self.tau_C = float(C)
        return float(max(self.prm.tau_safety * C, self.prm.tau_min))

    # ---- continuation ------------------------------------------------------------

    def _record(self, phase, t, eps, dt, its, info, lam, ok=True, note=""):
        row = {"phase": phase, "t": t, "eps": eps, "dt": dt, "newton_iters": its,
               "res_interior": info.get("res_interior", np.nan),
               "res_boundary": info.get("res_boundary", np.nan),
               "min_lambda": info.get("min_lambda", np.nan),
               "min_oblique": info.get("min_oblique", np.nan),
               "clamps": info.get("clamps", 0), "penalty": info.get("penalty", 0.0),
               "max_grad": info.get("max_grad", np.nan), "lam": lam, "accepted": ok, "note": note}
        self.trace.append(row)
        return row

    def _guard(self, info):
        K0 = self.pb.K0
        if np.isfinite(K0) and info["max_grad"] > K0 * (1 + self.prm.grad_guard_tol):
            raise SolverError(f"gradient bound violated: max |Du| = {info['max_grad']:.6g} > K0 = {K0:.6g}",
                              self.trace)

    def solve(self) -> SolverState:
        prm, st = self.prm, self.state
        u, lam = st.u.copy(), 0.0
        t, dt = 0.0, prm.dt0
        prev = None
        eps = prm.eps0
        mult = prm.multiplier_from_start and prm.pin != "none"
        R, info = self.residual(u, 0.0, eps, 0.0)
        info.update(res_interior=float(np.abs(R[self.pb.iidx]).max()),
                    res_boundary=float(np.abs(R[self.pb.bidx]).max()))
        self._record("t", 0.0, eps, 0.0, 0, info, 0.0, note="initial")
        while t < 1.0:
            dt = min(dt, 1.0 - t, prm.dt_max)
            tn = t + dt
            if prev is not None:
                up = u + (dt / prev[2]) * (u - prev[0])
                lp = lam + (dt / prev[2]) * (lam - prev[1])
            else:
                up, lp = u, lam
            un, ln, ok, its, info, hist, why = self.newton(up, tn, eps, lp, use_multiplier=mult)
            if not ok and prev is not None:
                un, ln, ok, its, info, hist, why = self.newton(u, tn, eps, lam, use_multiplier=mult)
            if ok:
                self._guard(info)
                self._record("t", tn, eps, dt, its, info, ln)
                prev = (u, lam, dt)
                u, lam, t = un, ln, tn
                if its <= prm.fast_iters:
                    dt *= prm.grow
            else:
                self._record("t", tn, eps, dt, its, info, ln, ok=False, note=why)
                dt *= 0.5
                prev = None
                if dt < prm.dt_min:
                    raise SolverError(f"step size underflow at t = {t:.6g} ({why})", self.trace)
        use_mult = prm.pin != "none"
        while eps > prm.eps_min * (1 + 1e-12):
            eps_n = max(eps * prm.eps_factor, prm.eps_min)
            un, ln, ok, its, info, hist, why = self.newton(u, 1.0, eps_n, lam, use_multiplier=use_mult)
            if not ok:
                self._record("eps", 1.0, eps_n, 0.0, its, info, ln, ok=False, note=why)
                raise SolverError(f"epsilon reduction diverged at eps = {eps_n:g} ({why})", self.trace)
            self._guard(info)
            self._record("eps", 1.0, eps_n, 0.0, its, info, ln)
            u, lam, eps = un, ln, eps_n
        R, info = self.residual(u, 1.0, eps, lam)
        _, info2, _ = self.residual(u, 1.0, eps, lam, jacobian=True)
        st.u, st.t, st.eps, st.lam = u, 1.0, eps, lam
        st.res_interior = float(np.abs(R[self.pb.iidx]).max())
        st.res_boundary = float(np.abs(R[self.pb.bidx]).max())
        st.min_lambda = info["min_lambda"]
        st.min_oblique = info2["min_oblique"]
        st.clamps = info["clamps"]
        st.penalty = info["penalty"]
        st.max_grad = info["max_grad"]
        if st.min_lambda <= 0:
            raise SolverError("final state not elliptic", self.trace)
        return st

    # ---- diagnostics ---------------------------------------------------------------

    def uniqueness_probe(self, n_perturbations: int = 10, amplitude: float = 1e-3, seed: int = 0,
                         tol: float = 1e-8) -> dict:
        """Perturbed starts at t = 0 must return to u0 (no multiplier)."""
        st = self.state
        rng = np.random.default_rng(seed)
        x = self.pb.grid.points
        results = []
        for k in range(n_perturbations):
            c = rng.normal(size=6)
            pert = c[0] + c[1] * x[:, 0] + c[2] * x[:, 1] + c[3] * x[:, 0] ** 2 + c[4] * x[:, 0] * x[:, 1] + c[5] * x[:, 1] ** 2
            m = np.abs(pert).max()
            pert = amplitude * pert / m if m > 0 else pert
            start = st.u0 + pert
            if amplitude == 0:
                R, _ = self.residual(start, 0.0, st.eps, 0.0)
                results.append({"iters": 0, "dist": 0.0, "converged": bool(np.abs(R).max() <= self.prm.newton_tol)})
                continue
            u, _, ok, its, info, hist, why = self.newton(start, 0.0, self.prm.eps0, 0.0, use_multiplier=False,
                                                        max_iter=30, tol=1e-11)
            dist = float(np.abs(u - st.u0).max())
            results.append({"iters": its, "dist": dist, "converged": bool(ok), "why": why})
        all_back = all(r["converged"] and r["dist"] < tol for r in results)
        return {"tau": self.tau, "eps": self.prm.eps0, "amplitude": amplitude, "probes": results,
                "all_returned": all_back,
                "flag": "" if all_back else "insufficient tau: a perturbed start did not return to u0"}


# --------------------------------------------------------------------------
# a posteriori checks


def image_orientation(grid: Grid, Tu) -> dict:
    """Signed areas of image cells and the winding number of the boundary image."""
    nr, nt = grid.n_r, grid.n_theta
    T = np.asarray(Tu)[: nr * nt].reshape(nr, nt, 2)
    a = T[:-1, :]
    b = T[1:, :]
    c = np.roll(T[1:, :], -1, axis=1)
    d = np.roll(T[:-1, :], -1, axis=1)
    cross = lambda p, q: p[..., 0] * q[..., 1] - p[..., 1] * q[..., 0]
    area = 0.5 * (cross(a, b) + cross(b, c) + cross(c, d) + cross(d, a))
    ring = T[-1]
    ang = np.arctan2(ring[:, 1] - ring[:, 1].mean(), ring[:, 0] - ring[:, 0].mean())
    turn = np.angle(np.exp(1j * np.diff(np.concatenate([ang, ang[:1]]))))
    winding = int(round(turn.sum() / (2 * np.pi)))
    return {"min_cell_area": float(area.min()), "negative_cells": int(np.sum(area <= 0)),
            "winding": winding, "bijective": bool(np.all(area > 0) and winding == 1)}


def discrete_identity_gap(solver: HomotopySolver, u, t, eps, lam) -> float:
    """Sup of |det DTu| f*(Tu) - e^{c(u - u0) + lam}[t f + (1-t) f*(Tu0)|det DTu0|] at interior nodes."""
    pb, st = solver.pb, solver.state
    ii = pb.iidx
    Du = solver.ops.gradient(u)
    H = solver.ops.hessian(u)
    d = solve_duals(pb.spec, Jet1(pb.grid.points, u, Du))
    detDTu = np.linalg.det(H - d.A) / np.abs(d.detE)
    c = solver.tau * (1 - t) + eps
    lhs = detDTu * np.asarray(pb.f_star(d.Y), float)
    rhs = np.exp(c * (u - st.u0) + lam) * solver._rhs_mass(t)
    return float(np.abs(lhs - rhs)[ii].max())


def continuation_solve(problem: Problem, params: HomotopyParams, u0) -> tuple:
    s = HomotopySolver(problem, params, u0)
    t0 = time.perf_counter()
    st = s.solve()
    return st, s.trace, {"tau": s.tau, "wall_time": time.perf_counter() - t0, "solver": s}
