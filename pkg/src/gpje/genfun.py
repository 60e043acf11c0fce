"""Generating functions for the near-field optics models and quadratic transport.

Every evaluator is vectorized: points carry a trailing axis of length ``n`` and
any leading batch shape, heights/parameters are arrays of the batch shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class AdmissibilityError(ValueError):
    """Raised when a triple (x, y, z) or a jet lies outside the admissible set."""


# --------------------------------------------------------------------------
# target profiles


@dataclass(frozen=True)
class TargetProfile:
    """Height function of the target graph.

    kind is one of ``constant``, ``quadratic`` (c + b.y + y^T Q y / 2) or
    ``bump`` (c + a exp(-|y - y_c|^2 / 2 sigma^2)).
    """

    kind: str = "constant"
    c: float = 0.0
    b: tuple = (0.0, 0.0)
    Q: tuple = ((0.0, 0.0), (0.0, 0.0))
    a: float = 0.0
    center: tuple = (0.0, 0.0)
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "quadratic", "bump"):
            raise ValueError(f"unknown target profile kind {self.kind!r}")
        if self.kind == "bump" and self.sigma <= 0:
            raise ValueError("bump width sigma must be positive")

    @property
    def is_flat(self) -> bool:
        if self.kind == "constant":
            return True
        if self.kind == "quadratic":
            return not (np.any(np.asarray(self.b)) or np.any(np.asarray(self.Q)))
        return self.a == 0.0

    def _parts(self, y):
        y = np.asarray(y, dtype=float)
        n = y.shape[-1]
        b = np.zeros(n) + np.asarray(self.b, dtype=float)[:n]
        Q = np.asarray(self.Q, dtype=float)[:n, :n]
        return y, n, b, Q

    def value(self, y):
        y, n, b, Q = self._parts(y)
        if self.kind == "constant":
            return np.full(y.shape[:-1], self.c)
        if self.kind == "quadratic":
            return self.c + y @ b + 0.5 * np.einsum("...i,ij,...j->...", y, Q, y)
        d = y - np.asarray(self.center, dtype=float)[:n]
        return self.c + self.a * np.exp(-np.sum(d * d, -1) / (2 * self.sigma**2))

    def grad(self, y):
        y, n, b, Q = self._parts(y)
        if self.kind == "constant":
            return np.zeros_like(y)
        if self.kind == "quadratic":
            return b + y @ Q.T
        d = y - np.asarray(self.center, dtype=float)[:n]
        e = self.a * np.exp(-np.sum(d * d, -1) / (2 * self.sigma**2))
        return -(e / self.sigma**2)[..., None] * d

    def hess(self, y):
        y, n, b, Q = self._parts(y)
        if self.kind == "constant":
            return np.zeros(y.shape + (n,))
        if self.kind == "quadratic":
            return np.broadcast_to(0.5 * (Q + Q.T), y.shape + (n,)).copy()
        d = y - np.asarray(self.center, dtype=float)[:n]
        s2 = self.sigma**2
        e = self.a * np.exp(-np.sum(d * d, -1) / (2 * s2))
        eye = np.eye(n)
        return (e / s2)[..., None, None] * (np.einsum("...i,...j->...ij", d, d) / s2 - eye)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "c": self.c}
        if self.kind == "quadratic":
            out.update(b=list(self.b), Q=[list(r) for r in self.Q])
        elif self.kind == "bump":
            out.update(a=self.a, center=list(self.center), sigma=self.sigma)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TargetProfile":
        d = dict(d)
        for k in ("b", "center"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        if "Q" in d:
            d["Q"] = tuple(tuple(float(v) for v in r) for r in d["Q"])
        return cls(**d)


# --------------------------------------------------------------------------
# generating functions


@dataclass
class GValues:
    """g and the partial derivatives needed by the dual maps."""

    g: np.ndarray
    g_x: np.ndarray
    g_y: np.ndarray
    g_z: np.ndarray
    g_xx: np.ndarray
    g_xy: np.ndarray
    g_xz: np.ndarray


def _outer(a, b):
    return np.einsum("...i,...j->...ij", a, b)


def _bcast(x, y, z):
    x, y, z = (np.asarray(a, float) for a in (x, y, z))
    shape = np.broadcast_shapes(x.shape[:-1], y.shape[:-1], z.shape)
    n = x.shape[-1]
    return (np.broadcast_to(x, shape + (n,)), np.broadcast_to(y, shape + (n,)),
            np.broadcast_to(z, shape))


def _eye_like(x):
    n = x.shape[-1]
    return np.broadcast_to(np.eye(n), x.shape + (n,))


@dataclass(frozen=True)
class GeneratingFunction:
    """Base class; concrete variants override the evaluators."""

    name = "abstract"

    # admissible z-range (open interval) for the pair (x, y)
    def z_bounds(self, x, y):
        raise NotImplementedError

    def evaluate(self, x, y, z) -> GValues:
        raise NotImplementedError

    def value(self, x, y, z):
        """g alone (cheaper than ``evaluate`` where overridden)."""
        return self.evaluate(x, y, z).g

    def interval_J(self, x, y):
        raise NotImplementedError

    def flat_duals(self, x, u, p, phi=None):
        """Closed-form (Y, Z) with the target height frozen at ``phi``.

        ``phi`` defaults to Phi(x).  The result is exact whenever
        Phi(Y) equals the frozen height.
        """
        return None

    def height_side(self, u, p):
        """Sign s with admissible frozen heights phi = u + s*t, t > 0."""
        return None

    def closed_form_A(self, x, u, p, Z):
        return None

    @property
    def has_exact_duals(self) -> bool:
        return False

    def to_dict(self) -> dict:
        raise NotImplementedError

    def z_admissible(self, x, y, z):
        lo, hi = self.z_bounds(x, y)
        z = np.asarray(z, dtype=float)
        ok = (z > lo) & (z < hi)
        jlo, jhi = self.interval_J(x, y)
        g = self.evaluate(x, y, z).g
        return ok & (g > jlo) & (g < jhi)


@dataclass(frozen=True)
class QuadraticOT(GeneratingFunction):
    """g(x, y, z) = x.y - z; the optimal transport cost in generating form."""

    name = "quadratic_ot"

    def z_bounds(self, x, y):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])
        return np.full(shape, -np.inf), np.full(shape, np.inf)

    def value(self, x, y, z):
        x, y, z = _bcast(x, y, z)
        return np.sum(x * y, -1) - z

    def evaluate(self, x, y, z):
        x, y, z = _bcast(x, y, z)
        zeros = np.zeros(x.shape + (x.shape[-1],))
        return GValues(
            g=np.sum(x * y, -1) - z,
            g_x=y.copy(),
            g_y=x.copy(),
            g_z=-np.ones(x.shape[:-1]),
            g_xx=zeros,
            g_xy=_eye_like(x).copy(),
            g_xz=np.zeros_like(x),
        )

    def interval_J(self, x, y):
        return self.z_bounds(x, y)

    def flat_duals(self, x, u, p, phi=None):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        return p.copy(), np.sum(x * p, -1) - u

    def closed_form_A(self, x, u, p, Z):
        p = np.asarray(p, float)
        return np.zeros(p.shape + (p.shape[-1],))

    @property
    def has_exact_duals(self):
        return True

    def to_dict(self):
        return {"variant": "quadratic_ot"}


@dataclass(frozen=True)
class Reflection(GeneratingFunction):
    """g = Phi(y) - z/2 + |x - y|^2 / (2z) for z < 0 (parallel beam reflector)."""

    profile: TargetProfile = field(default_factory=TargetProfile)
    name = "reflection"

    def z_bounds(self, x, y):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])
        return np.full(shape, -np.inf), np.zeros(shape)

    def value(self, x, y, z):
        x, y, z = _bcast(x, y, z)
        w = x - y
        return self.profile.value(y) - 0.5 * z + 0.5 * np.sum(w * w, -1) / z

    def evaluate(self, x, y, z):
        x, y, z = _bcast(x, y, z)
        w = x - y
        w2 = np.sum(w * w, -1)
        zi = 1.0 / z
        eye = _eye_like(x)
        return GValues(
            g=self.profile.value(y) - 0.5 * z + 0.5 * w2 * zi,
            g_x=w * zi[..., None],
            g_y=self.profile.grad(y) - w * zi[..., None],
            g_z=-0.5 - 0.5 * w2 * zi**2,
            g_xx=eye * zi[..., None, None],
            g_xy=-eye * zi[..., None, None],
            g_xz=-w * (zi**2)[..., None],
        )

    def interval_J(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        lo = self.profile.value(y) + np.sum((x - y) * self.profile.grad(y), -1)
        return lo, np.full(lo.shape, np.inf)

    def flat_duals(self, x, u, p, phi=None):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        if phi is None:
            phi = self.profile.value(x)
        Z = 2.0 * (phi - u) / (1.0 - np.sum(p * p, -1))
        return x - Z[..., None] * p, Z

    def height_side(self, u, p):
        # Z < 0 needs phi < u when |p| < 1 and phi > u when |p| > 1
        return np.where(np.sum(np.asarray(p) ** 2, -1) < 1.0, -1.0, 1.0)

    def closed_form_A(self, x, u, p, Z):
        p = np.asarray(p, float)
        return _eye_like(p) / np.asarray(Z)[..., None, None]

    @property
    def has_exact_duals(self):
        return self.profile.is_flat

    def to_dict(self):
        return {"variant": "reflection", "profile": self.profile.to_dict()}


@dataclass(frozen=True)
class Refraction(GeneratingFunction):
    """g = Phi(y) - (kappa z + sqrt(z^2 + (kappa^2 - 1)|x - y|^2)) / |kappa^2 - 1|."""

    kappa: float = 0.5
    profile: TargetProfile = field(default_factory=TargetProfile)
    name = "refraction"

    def __post_init__(self):
        if not self.kappa > 0 or self.kappa == 1.0:
            raise ValueError("refraction needs kappa > 0 and kappa != 1")

    @property
    def kappa_prime(self) -> float:
        return float(np.sqrt(abs(self.kappa**2 - 1.0)))

    def z_bounds(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        r = np.linalg.norm(x - y, axis=-1)
        lo = self.kappa_prime * r if self.kappa < 1 else np.zeros(r.shape)
        return lo, np.full(r.shape, np.inf)

    def value(self, x, y, z):
        x, y, z = _bcast(x, y, z)
        k2 = self.kappa**2 - 1.0
        w = x - y
        R = np.sqrt(z * z + k2 * np.sum(w * w, -1))
        return self.profile.value(y) - (self.kappa * z + R) / abs(k2)

    def evaluate(self, x, y, z):
        x, y, z = _bcast(x, y, z)
        k = self.kappa
        k2 = k * k - 1.0
        c = 1.0 / abs(k2)
        w = x - y
        w2 = np.sum(w * w, -1)
        R = np.sqrt(z * z + k2 * w2)
        Ri = 1.0 / R
        eye = _eye_like(x)
        g_xx = -c * k2 * (eye * Ri[..., None, None] - k2 * _outer(w, w) * (Ri**3)[..., None, None])
        return GValues(
            g=self.profile.value(y) - c * (k * z + R),
            g_x=-c * k2 * w * Ri[..., None],
            g_y=self.profile.grad(y) + c * k2 * w * Ri[..., None],
            g_z=-c * (k + z * Ri),
            g_xx=g_xx,
            g_xy=-g_xx,
            g_xz=c * k2 * w * (z * Ri**3)[..., None],
        )

    def interval_J(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        phi = self.profile.value(y)
        w = x - y
        tangent = phi + np.sum(w * self.profile.grad(y), -1)
        cone = phi - min(self.kappa, 1.0) / self.kappa_prime * np.linalg.norm(w, axis=-1)
        hi = np.minimum(tangent, cone)
        return np.full(hi.shape, -np.inf), hi

    def _root(self, p):
        return np.sqrt(1.0 + (1.0 - self.kappa**2) * np.sum(p * p, -1))

    def flat_duals(self, x, u, p, phi=None):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        k = self.kappa
        if phi is None:
            phi = self.profile.value(x)
        S = self._root(p)
        Z = abs(1.0 - k * k) * (phi - u) * S / (1.0 + k * S)
        R = Z / S
        Y = x + np.sign(k * k - 1.0) * R[..., None] * p
        return Y, Z

    def height_side(self, u, p):
        return np.ones(np.shape(u))

    def closed_form_A(self, x, u, p, Z):
        p = np.asarray(p, float)
        k = self.kappa
        S = self._root(p)
        scale = np.sign(1.0 - k * k) * S / np.asarray(Z)
        return scale[..., None, None] * (_eye_like(p) + (1.0 - k * k) * _outer(p, p))

    @property
    def has_exact_duals(self):
        return self.profile.is_flat

    def to_dict(self):
        return {"variant": "refraction", "kappa": self.kappa, "profile": self.profile.to_dict()}


def from_dict(d: dict) -> GeneratingFunction:
    variant = d.get("variant", "quadratic_ot")
    profile = TargetProfile.from_dict(d.get("profile", {"kind": "constant"}))
    if variant == "quadratic_ot":
        return QuadraticOT()
    if variant == "reflection":
        return Reflection(profile=profile)
    if variant == "refraction":
        return Refraction(kappa=float(d["kappa"]), profile=profile)
    raise ValueError(f"unknown generating function variant {variant!r}")


# --------------------------------------------------------------------------
# module-level operations


def check_admissible(spec: GeneratingFunction, x, y, z) -> None:
    """Raise AdmissibilityError naming the first violated constraint."""
    lo, hi = spec.z_bounds(x, y)
    z = np.asarray(z, float)
    if np.any(~(z > lo)):
        bound = "kappa'|x - y|" if isinstance(spec, Refraction) and spec.kappa < 1 else "lower bound"
        raise AdmissibilityError(f"{spec.name}: z must exceed {bound} (got z={z.min():g})")
    if np.any(~(z < hi)):
        raise AdmissibilityError(f"{spec.name}: z < 0 violated (got z={z.max():g})")


def eval_g(spec: GeneratingFunction, x, y, z, *, check: bool = True) -> GValues:
    if check:
        check_admissible(spec, x, y, z)
    return spec.evaluate(x, y, z)


def interval_J(spec: GeneratingFunction, x, y):
    """Open interval J(x, y) of admissible heights, as (lower, upper) arrays."""
    return spec.interval_J(x, y)


def sample_triples(spec: GeneratingFunction, rng, m: int, *, x_radius=1.0, y_radius=1.0,
                   y_center=(0.0, 0.0), u_span=(0.5, 3.0), n: int = 2):
    """Random admissible triples (x, y, z) drawn through the dual set.

    x and y are uniform in discs; the height u is placed inside J(x, y) at a
    random offset from its finite endpoint and z = g*(x, y, u).
    """
    from .dualmaps import dual_gstar

    def disc(radius, center):
        r = radius * np.sqrt(rng.uniform(size=m))
        t = rng.uniform(0, 2 * np.pi, size=m)
        pts = np.zeros((m, n))
        pts[:, 0] = r * np.cos(t)
        pts[:, 1] = r * np.sin(t)
        return pts + np.asarray(center, float)[:n]

    x = disc(x_radius, (0.0,) * n)
    y = disc(y_radius, y_center)
    lo, hi = spec.interval_J(x, y)
    off = rng.uniform(*u_span, size=m)
    if np.all(np.isfinite(lo)):
        u = lo + off
    elif np.all(np.isfinite(hi)):
        u = hi - off
    else:
        u = rng.uniform(-2, 2, size=m)
    z = dual_gstar(spec, x, y, u)
    return x, y, z


def fd_check(spec: GeneratingFunction, samples: int = 100, *, seed: int = 0, h: float = 1e-4,
             **sample_kw) -> float:
    """Largest relative error between closed-form partials and finite differences.

    Uses the fourth-order five-point stencil so that truncation error stays
    well below the reported tolerance near the edge of the admissible set.
    """
    rng = np.random.default_rng(seed)
    x, y, z = sample_triples(spec, rng, samples, **sample_kw)
    v = spec.evaluate(x, y, z)
    n = x.shape[-1]
    scale = 1.0 + np.abs(v.g)
    errs = []

    def diff(fn, step):
        f2, f1, m1, m2 = fn(2 * step), fn(step), fn(-step), fn(-2 * step)
        return [(-a + 8 * b - 8 * c + d) for a, b, c, d in zip(f2, f1, m1, m2)]

    def rel(a, b, s):
        return np.max(np.abs(a - b) / s)

    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        dg, dgx, dgz = diff(lambda t: (lambda w: (w.g, w.g_x, w.g_z))(spec.evaluate(x + t * e, y, z)), h)
        errs.append(rel(dg / (12 * h), v.g_x[:, i], scale))
        errs.append(rel(dgx / (12 * h), v.g_xx[:, :, i], scale[:, None]))
        errs.append(rel(dgz / (12 * h), v.g_xz[:, i], scale))
        dg, dgx = diff(lambda t: (lambda w: (w.g, w.g_x))(spec.evaluate(x, y + t * e, z)), h)
        errs.append(rel(dg / (12 * h), v.g_y[:, i], scale))
        errs.append(rel(dgx / (12 * h), v.g_xy[:, :, i], scale[:, None]))
    dz = h * (1.0 + np.abs(z))
    dg, dgx = diff(lambda t: (lambda w: (w.g, w.g_x))(spec.evaluate(x, y, z + t * dz)), 1.0)
    errs.append(rel(dg / (12 * dz), v.g_z, scale))
    errs.append(rel(dgx / (12 * dz[:, None]), v.g_xz, scale[:, None]))
    return float(max(errs))
