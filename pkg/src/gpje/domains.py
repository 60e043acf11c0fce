"""Source and target domains, curvilinear grids and generated-convexity checks.

Domains are star-shaped about their center with boundary radius r(theta).
The grid maps computational coordinates (s, theta) to

    x = c + rho(s, theta) e(theta),   rho = s r_e(theta) + s^2 r_o(theta),

where r_e and r_o collect the even and odd harmonics of r.  The split makes
the map smooth through the center: the node (-s, theta) coincides with
(s, theta + pi), which supplies the ghost values of the innermost ring.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp

KINDS = ("disc", "ellipse", "superellipse", "fourier")
_N_SPECTRAL = 4096


class GridError(ValueError):
    pass


# fourth-order centered stencils (offset, weight) for first and second derivatives
T1 = ((-2, 1 / 12), (-1, -2 / 3), (1, 2 / 3), (2, -1 / 12))
T2 = ((-2, -1 / 12), (-1, 4 / 3), (0, -5 / 2), (1, 4 / 3), (2, -1 / 12))


@dataclass
class BoundaryPoint:
    """Boundary samples; arrays over the parameter theta."""

    theta: np.ndarray
    x: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray
    curvature: np.ndarray


@dataclass(frozen=True)
class DomainSpec:
    """Smooth star-shaped planar domain.

    ``fourier`` domains have radius radii[0] + sum_k a_k cos k theta + b_k sin k theta
    with ``cos_coeffs = (a_1, a_2, ...)`` and ``sin_coeffs = (b_1, ...)``.
    """

    kind: str = "disc"
    center: tuple = (0.0, 0.0)
    radii: tuple = (1.0, 1.0)
    q: int = 4
    cos_coeffs: tuple = ()
    sin_coeffs: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GridError(f"unsupported domain kind {self.kind!r}")
        if len(self.center) != 2:
            raise GridError("only planar domains (n = 2) are supported")
        if min(self.radii) <= 0:
            raise GridError("radii must be positive")
        if self.kind == "superellipse" and (self.q < 4 or self.q % 2):
            raise GridError("superellipse exponent must be even and at least 4")

    # ---- boundary radius ---------------------------------------------------

    def radius_exact(self, theta):
        th = np.asarray(theta, float)
        c, s = np.cos(th), np.sin(th)
        a, b = self.radii[0], self.radii[-1]
        if self.kind == "disc":
            return np.full(th.shape, float(self.radii[0]))
        if self.kind == "ellipse":
            return ((c / a) ** 2 + (s / b) ** 2) ** -0.5
        if self.kind == "superellipse":
            return ((c / a) ** self.q + (s / b) ** self.q) ** (-1.0 / self.q)
        r = np.full(th.shape, float(self.radii[0]))
        for k, ak in enumerate(self.cos_coeffs, 1):
            r = r + ak * np.cos(k * th)
        for k, bk in enumerate(self.sin_coeffs, 1):
            r = r + bk * np.sin(k * th)
        return r

    @cached_property
    def _spectrum(self):
        th = 2 * np.pi * np.arange(_N_SPECTRAL) / _N_SPECTRAL
        c = np.fft.rfft(self.radius_exact(th)) / _N_SPECTRAL
        c[1:] *= 2.0
        keep = np.nonzero(np.abs(c) > 2e-16 * np.abs(c[0]))[0]
        K = int(keep.max()) + 1 if keep.size else 1
        return c[:K]

    def radius(self, theta, parity: Optional[str] = None, deriv: int = 0):
        """r(theta) or its even/odd-harmonic part, with theta derivatives."""
        th = np.asarray(theta, float)
        c = self._spectrum
        k = np.arange(len(c))
        if parity == "even":
            c = np.where(k % 2 == 0, c, 0)
        elif parity == "odd":
            c = np.where(k % 2 == 1, c, 0)
        ph = np.exp(1j * np.multiply.outer(th, k))
        return np.real(ph @ (c * (1j * k) ** deriv))

    # ---- defining function -------------------------------------------------

    def defining_function(self, x):
        """(phi, D phi, D^2 phi), normalized so |D phi| = 1 on the boundary."""
        x = np.asarray(x, float)
        w = x - np.asarray(self.center, float)
        if self.kind == "disc":
            R = self.radii[0]
            phi = (np.sum(w * w, -1) - R * R) / (2 * R)
            H = np.broadcast_to(np.eye(2) / R, x.shape + (2,)).copy()
            return phi, w / R, H
        if self.kind in ("ellipse", "superellipse"):
            return self._phi_power(w)
        return self._phi_star(x)

    def _phi_power(self, w):
        q = 2 if self.kind == "ellipse" else self.q
        a = np.asarray(self.radii, float)
        v = w / a
        F = np.sum(v**q, -1)
        dF = q * v ** (q - 1) / a
        d2 = q * (q - 1) * v ** (q - 2) / a**2
        d3 = q * (q - 1) * (q - 2) * v ** (q - 3) / a**3 if q > 2 else np.zeros_like(v)
        H = np.einsum("...i,ij->...ij", d2, np.eye(2))
        N = F - 1.0
        S = np.sqrt(np.sum(dF * dF, -1) + N * N)
        HdF = np.einsum("...ij,...j->...i", H, dF)
        DS = (HdF + N[..., None] * dF) / S[..., None]
        outer = lambda p, r: np.einsum("...i,...j->...ij", p, r)
        TdF = np.einsum("...i,ij->...ij", d3 * dF, np.eye(2))
        D2S = (TdF + H @ H + outer(dF, dF) + N[..., None, None] * H - outer(DS, DS)) / S[..., None, None]
        phi = N / S
        Dphi = dF / S[..., None] - (N / S**2)[..., None] * DS
        D2phi = (H / S[..., None, None]
                 - (outer(dF, DS) + outer(DS, dF)) / (S**2)[..., None, None]
                 - (N / S**2)[..., None, None] * D2S
                 + (2 * N / S**3)[..., None, None] * outer(DS, DS))
        return phi, Dphi, D2phi

    def _phi_star_value(self, x):
        w = x - np.asarray(self.center, float)
        rho = np.linalg.norm(w, axis=-1)
        th = np.arctan2(w[..., 1], w[..., 0])
        r = self.radius(th)
        r1 = self.radius(th, deriv=1)
        return (rho**2 - r**2) / (2 * np.sqrt(r**2 + r1**2))

    def _phi_star(self, x, h=1e-5):
        phi = self._phi_star_value(x)
        grad = np.zeros(x.shape)
        hess = np.zeros(x.shape + (2,))
        e = np.eye(2) * h
        for i in range(2):
            fp, fm = self._phi_star_value(x + e[i]), self._phi_star_value(x - e[i])
            grad[..., i] = (fp - fm) / (2 * h)
            hess[..., i, i] = (fp - 2 * phi + fm) / h**2
        fpp = self._phi_star_value(x + e[0] + e[1])
        fpm = self._phi_star_value(x + e[0] - e[1])
        fmp = self._phi_star_value(x - e[0] + e[1])
        fmm = self._phi_star_value(x - e[0] - e[1])
        hess[..., 0, 1] = hess[..., 1, 0] = (fpp - fpm - fmp + fmm) / (4 * h * h)
        return phi, grad, hess

    def phi(self, x):
        """Defining function value only."""
        x = np.asarray(x, float)
        if self.kind == "fourier":
            return self._phi_star_value(x)
        return self.defining_function(x)[0]

    def grad_phi(self, x):
        return self.defining_function(x)[1]

    # ---- geometry ----------------------------------------------------------

    def boundary(self, theta) -> BoundaryPoint:
        th = np.asarray(theta, float)
        r = self.radius(th)
        r1 = self.radius(th, deriv=1)
        r2 = self.radius(th, deriv=2)
        e = np.stack([np.cos(th), np.sin(th)], -1)
        ep = np.stack([-np.sin(th), np.cos(th)], -1)
        x = np.asarray(self.center, float) + r[..., None] * e
        T = r1[..., None] * e + r[..., None] * ep
        nT = np.linalg.norm(T, axis=-1)[..., None]
        tangent = T / nT
        normal = np.stack([tangent[..., 1], -tangent[..., 0]], -1)
        curv = (r**2 + 2 * r1**2 - r * r2) / (r**2 + r1**2) ** 1.5
        return BoundaryPoint(theta=th, x=x, normal=normal, tangent=tangent, curvature=curv)

    def area(self) -> float:
        c = self._spectrum
        return float(np.pi * (np.real(c[0]) ** 2 + 0.5 * np.sum(np.abs(c[1:]) ** 2)))

    @property
    def max_radius(self) -> float:
        th = np.linspace(0, 2 * np.pi, 2048, endpoint=False)
        return float(self.radius(th).max())

    def min_curvature(self, m: int = 4096) -> float:
        th = np.linspace(0, 2 * np.pi, m, endpoint=False)
        return float(self.boundary(th).curvature.min())

    def contains(self, x, tol: float = 0.0):
        return self.phi(x) < tol

    def sample_interior(self, rng, m: int, shrink: float = 1.0):
        """Uniform samples in the (optionally radially shrunk) domain."""
        # angles with density proportional to r(theta)^2, by rejection
        r2max = self.max_radius**2
        th = np.empty(0)
        while len(th) < m:
            cand = rng.uniform(0, 2 * np.pi, 2 * (m - len(th)) + 16)
            keep = rng.uniform(0, r2max, len(cand)) < self.radius(cand) ** 2
            th = np.concatenate([th, cand[keep]])
        th = th[:m]
        t = np.sqrt(rng.uniform(0, 1, m)) * shrink
        r = self.radius(th)
        return np.asarray(self.center, float) + (t * r)[:, None] * np.stack([np.cos(th), np.sin(th)], -1)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "center": list(self.center), "radii": list(self.radii)}
        if self.kind == "superellipse":
            d["q"] = self.q
        if self.kind == "fourier":
            d["cos_coeffs"] = list(self.cos_coeffs)
            d["sin_coeffs"] = list(self.sin_coeffs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        for k in ("center", "radii", "cos_coeffs", "sin_coeffs"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        if "radii" in d and len(d["radii"]) == 1:
            d["radii"] = (d["radii"][0], d["radii"][0])
        if "q" in d:
            d["q"] = int(d["q"])
        return cls(**d)

    @classmethod
    def from_radius_samples(cls, center, theta, r, modes: int = 64) -> "DomainSpec":
        """Fourier domain through samples of r at uniform angles."""
        r = np.asarray(r, float)
        N = len(r)
        c = np.fft.rfft(r) / N
        K = min(modes, N // 2 - 1)
        a = tuple(float(2 * np.real(c[k])) for k in range(1, K + 1))
        b = tuple(float(-2 * np.imag(c[k])) for k in range(1, K + 1))
        return cls(kind="fourier", center=tuple(float(v) for v in center),
                   radii=(float(np.real(c[0])), float(np.real(c[0]))), cos_coeffs=a, sin_coeffs=b)


def defining_function(d: DomainSpec, x):
    return d.defining_function(x)


# --------------------------------------------------------------------------
# grid


@dataclass
class Operators:
    """Sparse physical derivative operators on a grid (second order)."""

    Dx: sp.csr_matrix
    Dy: sp.csr_matrix
    Dxx: sp.csr_matrix
    Dxy: sp.csr_matrix
    Dyy: sp.csr_matrix

    @property
    def D(self):
        return (self.Dx, self.Dy)

    @property
    def D2(self):
        return ((self.Dxx, self.Dxy), (self.Dxy, self.Dyy))

    def gradient(self, u):
        return np.stack([self.Dx @ u, self.Dy @ u], -1)

    def hessian(self, u):
        xx, xy, yy = self.Dxx @ u, self.Dxy @ u, self.Dyy @ u
        return np.stack([np.stack([xx, xy], -1), np.stack([xy, yy], -1)], -2)


@dataclass
class Grid:
    """Polar-type curvilinear grid on a star-shaped domain.

    Nodes are ring-major: index = i * n_theta + j with rings at
    s_i = (i + 1/2) h, h = 1/(n_r - 1/2), so ring n_r - 1 lies on the boundary.
    ``n_collar`` extra rings extend the grid outside the domain.
    """

    domain: DomainSpec
    n_r: int
    n_theta: int
    n_collar: int = 0
    s: np.ndarray = field(init=False)
    theta: np.ndarray = field(init=False)
    points: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.n_r < 2 or self.n_theta < 8 or self.n_theta % 2:
            raise GridError("need n_r >= 2 and an even n_theta >= 8")
        self.h = 1.0 / (self.n_r - 0.5)
        self.dtheta = 2 * np.pi / self.n_theta
        self.n_rings = self.n_r + self.n_collar
        self.s = (np.arange(self.n_rings) + 0.5) * self.h
        self.theta = np.arange(self.n_theta) * self.dtheta
        d = self.domain
        self._re = [d.radius(self.theta, "even", k) for k in range(3)]
        self._ro = [d.radius(self.theta, "odd", k) for k in range(3)]
        self._check_fold()
        S, TH = np.meshgrid(self.s, self.theta, indexing="ij")
        self.S, self.TH = S.ravel(), TH.ravel()
        self.ring = np.repeat(np.arange(self.n_rings), self.n_theta)
        self.col = np.tile(np.arange(self.n_theta), self.n_rings)
        e = np.stack([np.cos(self.TH), np.sin(self.TH)], -1)
        rho = self.S * np.tile(self._re[0], self.n_rings) + self.S**2 * np.tile(self._ro[0], self.n_rings)
        self.points = np.asarray(d.center, float) + rho[:, None] * e
        if self.n_collar == 0:
            bidx = self.boundary_index
            self.points[bidx] = d.boundary(self.theta).x
        self.inside = self.ring < self.n_r
        self.is_boundary = self.ring == self.n_r - 1
        self.cell_measure = self._cell_measures()

    @property
    def size(self) -> int:
        return self.n_rings * self.n_theta

    @property
    def boundary_index(self):
        return np.arange((self.n_r - 1) * self.n_theta, self.n_r * self.n_theta)

    @property
    def interior_index(self):
        return np.arange(0, (self.n_r - 1) * self.n_theta)

    @property
    def domain_index(self):
        return np.arange(0, self.n_r * self.n_theta)

    def _rho(self, s, th, deriv=(0, 0)):
        ds, dt = deriv
        re = self.domain.radius(th, "even", dt)
        ro = self.domain.radius(th, "odd", dt)
        if ds == 0:
            return s * re + s * s * ro
        if ds == 1:
            return re + 2 * s * ro
        return 2 * ro

    def _check_fold(self):
        smax = self.s[-1] + self.h
        th = np.linspace(0, 2 * np.pi, 4 * self.n_theta, endpoint=False)
        re, ro = self.domain.radius(th, "even"), self.domain.radius(th, "odd")
        worst = np.minimum(re - 2 * smax * np.abs(ro), re - smax * np.abs(ro))
        if np.any(worst <= 0):
            raise GridError("curvilinear map folds: odd harmonics too large for the collar")

    def map(self, s, th):
        e = np.stack([np.cos(th), np.sin(th)], -1)
        return np.asarray(self.domain.center, float) + self._rho(s, th)[..., None] * e

    def inverse_map(self, y):
        """(s, theta) of physical points (exact: rho is quadratic in s)."""
        w = np.asarray(y, float) - np.asarray(self.domain.center, float)
        th = np.mod(np.arctan2(w[..., 1], w[..., 0]), 2 * np.pi)
        rho = np.linalg.norm(w, axis=-1)
        re, ro = self.domain.radius(th, "even"), self.domain.radius(th, "odd")
        s = 2 * rho / (re + np.sqrt(np.maximum(re * re + 4 * ro * rho, 0.0)))
        return s, th

    def _cell_measures(self):
        gl, gw = np.polynomial.legendre.leggauss(6)
        edges_lo = np.maximum(self.s - 0.5 * self.h, 0.0)
        edges_hi = self.s + 0.5 * self.h
        edges_hi[self.n_r - 1] = 1.0
        if self.n_collar:
            edges_lo[self.n_r] = 1.0
            edges_hi[-1] = self.s[-1]
        out = np.zeros((self.n_rings, self.n_theta))
        for g, w in zip(gl, gw):
            th = self.theta + 0.5 * self.dtheta * g
            hi = self._rho(edges_hi[:, None], th[None, :])
            lo = self._rho(edges_lo[:, None], th[None, :])
            out += 0.5 * w * 0.5 * self.dtheta * (hi**2 - lo**2)
        return out.ravel()

    # ---- metric terms --------------------------------------------------------

    @cached_property
    def metric(self):
        """J = dx/d(s, theta), its inverse K, and the Hessians of x in (s, theta)."""
        s, th = self.S, self.TH
        re = [np.tile(v, self.n_rings) for v in self._re]
        ro = [np.tile(v, self.n_rings) for v in self._ro]
        rho = s * re[0] + s * s * ro[0]
        rs = re[0] + 2 * s * ro[0]
        rt = s * re[1] + s * s * ro[1]
        rss = 2 * ro[0]
        rst = re[1] + 2 * s * ro[1]
        rtt = s * re[2] + s * s * ro[2]
        e = np.stack([np.cos(th), np.sin(th)], -1)
        ep = np.stack([-np.sin(th), np.cos(th)], -1)
        xs = rs[:, None] * e
        xt = rt[:, None] * e + rho[:, None] * ep
        J = np.stack([xs, xt], -1)  # J[:, a, b] = d x_a / d xi_b
        detJ = rho * rs
        if np.any(detJ[self.ring >= 0] <= 0):
            raise GridError("non-positive Jacobian of the grid map")
        K = np.linalg.inv(J)  # K[:, b, a] = d xi_b / d x_a
        xss = rss[:, None] * e
        xst = rst[:, None] * e + rs[:, None] * ep
        xtt = rtt[:, None] * e + 2 * rt[:, None] * ep - rho[:, None] * e
        X = np.stack([np.stack([xss, xst], -1), np.stack([xst, xtt], -1)], -2)  # (M, a, b, c)
        return J, K, X, detJ

    # ---- computational stencils --------------------------------------------

    def _idx(self, i, j):
        """Index with antipodal reflection for ring -1 and periodic theta."""
        i = np.asarray(i)
        j = np.asarray(j)
        neg = i < 0
        j = np.where(neg, j + self.n_theta // 2, j) % self.n_theta
        i = np.where(neg, -1 - i, i)
        return i * self.n_theta + j

    def _comp_ops(self):
        M = self.size
        I, Jc = self.ring, self.col
        h, dt = self.h, self.dtheta
        last = self.n_rings - 1
        mats = {k: ([], [], []) for k in ("s", "ss", "t", "tt", "st")}

        def add(key, r, c, v):
            R, C, V = mats[key]
            R.append(np.broadcast_to(r, np.shape(c)).ravel())
            C.append(np.ravel(c))
            V.append(np.broadcast_to(v, np.shape(c)).ravel())

        node = np.arange(M)
        outer = I == last
        # theta derivatives (all rings), fourth order since theta is periodic
        for dj, w in T1:
            add("t", node, self._idx(I, Jc + dj), w / dt)
        for dj, w in T2:
            add("tt", node, self._idx(I, Jc + dj), w / dt**2)
        # s derivatives, centered: fourth order where two rings exist on each side
        wide = I < last - 1
        n_, i_, j_ = node[wide], I[wide], Jc[wide]
        for di, w in T1:
            add("s", n_, self._idx(i_ + di, j_), w / h)
            for dj, wt in T1:
                add("st", n_, self._idx(i_ + di, j_ + dj), w * wt / (h * dt))
        for di, w in T2:
            add("ss", n_, self._idx(i_ + di, j_), w / h**2)
        narrow = I == last - 1
        n_, i_, j_ = node[narrow], I[narrow], Jc[narrow]
        add("s", n_, self._idx(i_ + 1, j_), 1 / (2 * h))
        add("s", n_, self._idx(i_ - 1, j_), -1 / (2 * h))
        add("ss", n_, self._idx(i_ + 1, j_), 1 / h**2)
        add("ss", n_, n_, -2 / h**2)
        add("ss", n_, self._idx(i_ - 1, j_), 1 / h**2)
        for di, ws in ((1, 0.5), (-1, -0.5)):
            for dj, w in T1:
                add("st", n_, self._idx(i_ + di, j_ + dj), ws * w / (h * dt))
        # s derivatives, one-sided on the outermost ring
        n_, i_, j_ = node[outer], I[outer], Jc[outer]
        for k, w in enumerate((1.5, -2.0, 0.5)):
            add("s", n_, self._idx(i_ - k, j_), w / h)
            for dj, wt in T1:
                add("st", n_, self._idx(i_ - k, j_ + dj), w * wt / (h * dt))
        for k, w in enumerate((2.0, -5.0, 4.0, -1.0)):
            add("ss", n_, self._idx(i_ - k, j_), w / h**2)
        out = {}
        for key, (R, C, V) in mats.items():
            out[key] = sp.csr_matrix((np.concatenate(V), (np.concatenate(R), np.concatenate(C))), shape=(M, M))
        return out

    @cached_property
    def _ops(self) -> Operators:
        c = self._comp_ops()
        J, K, X, _ = self.metric
        D1 = (c["s"], c["t"])
        D2 = ((c["ss"], c["st"]), (c["st"], c["tt"]))
        diag = sp.diags
        grad = []
        for a in range(2):
            grad.append((diag(K[:, 0, a]) @ D1[0] + diag(K[:, 1, a]) @ D1[1]).tocsr())
        hess = {}
        for a in range(2):
            for d in range(a, 2):
                acc = sp.csr_matrix((self.size, self.size))
                for b in range(2):
                    for cc in range(2):
                        w = K[:, b, a] * K[:, cc, d]
                        corr = D2[b][cc]
                        for e in range(2):
                            corr = corr - diag(X[:, e, b, cc]) @ grad[e]
                        acc = acc + diag(w) @ corr
                hess[(a, d)] = acc.tocsr()
        return Operators(Dx=grad[0], Dy=grad[1], Dxx=hess[(0, 0)], Dxy=hess[(0, 1)], Dyy=hess[(1, 1)])

    def operators(self) -> Operators:
        return self._ops

    def restrict(self, field_values):
        """Values on the domain nodes of a collar grid."""
        return np.asarray(field_values)[..., : self.n_r * self.n_theta]

    def without_collar(self) -> "Grid":
        return Grid(self.domain, self.n_r, self.n_theta)

    def to_rows(self, **fields):
        """Rows (node, ring, col, x, y, boundary, cell_measure, fields...) for CSV."""
        names = list(fields)
        rows = []
        for k in range(self.size):
            row = [k, int(self.ring[k]), int(self.col[k]), float(self.points[k, 0]),
                   float(self.points[k, 1]), int(self.is_boundary[k]), float(self.cell_measure[k])]
            row += [float(np.asarray(fields[n])[k]) for n in names]
            rows.append(row)
        return ["node", "ring", "col", "x", "y", "boundary", "cell_measure"] + names, rows


def build_grid(d: DomainSpec, N_r: int, N_theta: int, n_collar: int = 0) -> Grid:
    if N_r < 8 or N_theta < 8:
        raise GridError("build_grid needs N_r, N_theta >= 8")
    return Grid(d, N_r, N_theta, n_collar)


# --------------------------------------------------------------------------
# generated convexity checks


@dataclass
class ConvexityReport:
    kind: str
    margin: float
    convex: bool
    n_samples: int
    worst: dict
    tol: float

    def to_dict(self):
        return {"kind": self.kind, "margin": self.margin, "convex": bool(self.convex),
                "n_samples": self.n_samples, "worst": self.worst, "tol": self.tol}


def _target_samples(target: DomainSpec, rng, m):
    return target.sample_interior(rng, m, shrink=0.98)


def check_Y_convexity(source: DomainSpec, target: DomainSpec, J, spec, *, n_samples: int = 2000,
                      seed: int = 0, tol: float = 1e-6, h_p: float = 1e-5) -> ConvexityReport:
    """Minimum of [kappa - D_{p_k}A_ij gamma_k] tau_i tau_j over sampled boundary jets."""
    from .dualmaps import dual_gstar, Jet1, matrix_A

    rng = np.random.default_rng(seed)
    th = rng.uniform(0, 2 * np.pi, n_samples)
    bp = source.boundary(th)
    y = _target_samples(target, rng, n_samples)
    lo, hi = J
    u = rng.uniform(lo, hi, n_samples)
    jl, jh = spec.interval_J(bp.x, y)
    keep = (u > jl) & (u < jh)
    if not keep.any():
        raise ValueError("empty admissible sample set for the Y-convexity check")
    x, y, u = bp.x[keep], y[keep], u[keep]
    gam, tau, kap = bp.normal[keep], bp.tangent[keep], bp.curvature[keep]
    z = dual_gstar(spec, x, y, u)
    p = spec.evaluate(x, y, z).g_x
    scale = 1.0 + np.abs(p).max()
    hp = h_p * scale
    Ap = matrix_A(spec, Jet1(x, u, p + hp * gam))
    Am = matrix_A(spec, Jet1(x, u, p - hp * gam))
    dA = (Ap - Am) / (2 * hp)
    form = kap - np.einsum("mi,mij,mj->m", tau, dA, tau)
    k = int(np.argmin(form))
    return ConvexityReport(kind="Y", margin=float(form[k]), convex=bool(form[k] >= tol),
                           n_samples=int(keep.sum()), tol=tol,
                           worst={"x": x[k].tolist(), "u": float(u[k]), "p": p[k].tolist()})


def trace_P_boundary(spec, target: DomainSpec, x, u, n_rays: int = 128):
    """Boundary of P(x, u, target) in p-space, traced along rays.

    Rays start at the gradient whose dual point is the target center.  ``x``
    may be one point or a batch (m, 2) with matching ``u``; the result has
    shape (..., n_rays, 2) in counter-clockwise order.
    """
    from .dualmaps import dual_gstar, dual_yz

    x = np.asarray(x, float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    u = np.atleast_1d(np.asarray(u, float))
    m = len(x)
    yc = np.broadcast_to(np.asarray(target.center, float), x.shape)
    pc = spec.evaluate(x, yc, dual_gstar(spec, x, yc, u)).g_x
    ang = 2 * np.pi * np.arange(n_rays) / n_rays
    w = np.stack([np.cos(ang), np.sin(ang)], -1)
    X = np.repeat(x, n_rays, 0)
    U = np.repeat(u, n_rays)
    Pc = np.repeat(pc, n_rays, 0)
    W = np.tile(w, (m, 1))

    def G(t):
        pp = Pc + t[:, None] * W
        Y, _, ok, _ = dual_yz(spec, X, U, pp)
        return np.where(ok, target.phi(np.where(ok[:, None], Y, target.center)), 1.0)

    ladder = np.concatenate([[0.0], 1e-3 * 1.5 ** np.arange(40)])
    a = np.zeros(len(U))
    b = np.full(len(U), np.nan)
    for lo, hi in zip(ladder[:-1], ladder[1:]):
        todo = np.isnan(b)
        if not todo.any():
            break
        out = G(np.full(len(U), hi)) > 0
        hit = todo & out
        a[hit], b[hit] = lo, hi
    if np.isnan(b).any():
        raise ValueError("ray trace of P failed: no sign change along some ray")
    for _ in range(45):
        mid = 0.5 * (a + b)
        inside = G(mid) < 0
        a = np.where(inside, mid, a)
        b = np.where(inside, b, mid)
    P = (Pc + (0.5 * (a + b))[:, None] * W).reshape(m, n_rays, 2)
    return P[0] if single else P


def polygon_turning(P):
    """Signed turning angle at each vertex and the adjacent mean edge length."""
    e1 = P - np.roll(P, 1, 0)
    e2 = np.roll(P, -1, 0) - P
    cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    dot = np.sum(e1 * e2, -1)
    ang = np.arctan2(cross, dot)
    L = 0.5 * (np.linalg.norm(e1, axis=-1) + np.linalg.norm(e2, axis=-1))
    return ang, L


def check_Ystar_convexity(target: DomainSpec, source: DomainSpec, J, spec, *, n_samples: int = 24,
                          n_rays: int = 128, seed: int = 0, tol: float = 1e-6) -> ConvexityReport:
    """Trace the boundary of P(x, u, target) and test it for convexity.

    The margin is the smallest discrete curvature (turning angle per unit
    length) over all traced curves.
    """
    rng = np.random.default_rng(seed)
    xs = source.sample_interior(rng, n_samples)
    lo, hi = J
    us = rng.uniform(lo, hi, n_samples)
    P = trace_P_boundary(spec, target, xs, us, n_rays)
    margin, worst = np.inf, {}
    for x, u, Pk in zip(xs, us, P):
        ang, L = polygon_turning(Pk)
        kap = ang / L
        k = int(np.argmin(kap))
        if kap[k] < margin:
            margin = float(kap[k])
            worst = {"x": x.tolist(), "u": float(u), "p": Pk[k].tolist()}
    return ConvexityReport(kind="Y*", margin=margin, convex=bool(margin >= tol),
                           n_samples=n_samples, worst=worst, tol=tol)
