"""Manufactured solutions with polynomial u and exact derivatives."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domains import DomainSpec
from .dualmaps import Jet1, solve_duals


@dataclass(frozen=True)
class PolyField:
    """u(x) = sum c_ij x1^i x2^j over the listed monomials."""

    terms: tuple = ((0, 0, 3.0), (2, 0, 0.15), (0, 2, 0.15), (1, 0, 0.05), (0, 1, -0.03),
                    (1, 1, 0.02), (3, 0, 0.01))

    def value(self, x):
        x = np.atleast_2d(x)
        return sum(c * x[:, 0] ** i * x[:, 1] ** j for i, j, c in self.terms)

    def grad(self, x):
        x = np.atleast_2d(x)
        g = np.zeros_like(x, dtype=float)
        for i, j, c in self.terms:
            if i:
                g[:, 0] += c * i * x[:, 0] ** (i - 1) * x[:, 1] ** j
            if j:
                g[:, 1] += c * j * x[:, 0] ** i * x[:, 1] ** (j - 1)
        return g

    def hess(self, x):
        x = np.atleast_2d(x)
        H = np.zeros((len(x), 2, 2))
        for i, j, c in self.terms:
            if i >= 2:
                H[:, 0, 0] += c * i * (i - 1) * x[:, 0] ** (i - 2) * x[:, 1] ** j
            if j >= 2:
                H[:, 1, 1] += c * j * (j - 1) * x[:, 0] ** i * x[:, 1] ** (j - 2)
            if i and j:
                v = c * i * j * x[:, 0] ** (i - 1) * x[:, 1] ** (j - 1)
                H[:, 0, 1] += v
                H[:, 1, 0] += v
        return H

    def to_dict(self):
        return {"terms": [list(t) for t in self.terms]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple((int(i), int(j), float(c)) for i, j, c in d["terms"]))


@dataclass
class Manufactured:
    """Exact field u_ex on the source with target Tu_ex(source) and f = det DTu_ex (f* = 1)."""

    spec: object
    source: DomainSpec
    field: PolyField = field(default_factory=PolyField)

    def duals(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        return solve_duals(self.spec, Jet1(x, self.field.value(x), self.field.grad(x)))

    def Tu(self, x):
        return self.duals(x).Y

    def detDTu(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        d = self.duals(x)
        M = self.field.hess(x) - d.A
        return np.linalg.det(M) / d.detE

    def f(self, x):
        return self.detDTu(x)

    def min_ellipticity(self, m: int = 4000, seed: int = 0) -> float:
        rng = np.random.default_rng(seed)
        x = np.concatenate([self.source.sample_interior(rng, m),
                            self.source.boundary(np.linspace(0, 2 * np.pi, 256, endpoint=False)).x])
        d = self.duals(x)
        return float(np.linalg.eigvalsh(self.field.hess(x) - d.A)[:, 0].min())

    def target(self, n: int = 512, modes: int = 64) -> DomainSpec:
        """Fourier fit of Tu_ex(boundary) in polar form about the image of the source center."""
        c = self.Tu(np.asarray(self.source.center, float)[None])[0]
        s = np.linspace(0, 2 * np.pi, 4 * n, endpoint=False)
        img = self.Tu(self.source.boundary(s).x) - c
        ang = np.unwrap(np.arctan2(img[:, 1], img[:, 0]))
        if np.any(np.diff(ang) <= 0):
            raise ValueError("boundary image is not star-shaped about Tu(center)")
        if abs(ang[-1] - ang[0] - 2 * np.pi) > np.pi:
            raise ValueError("boundary image does not wind once about Tu(center)")
        theta = np.linspace(0, 2 * np.pi, n, endpoint=False)
        # invert the boundary angle map: interpolate, then polish with Newton
        ang_ext = np.concatenate([ang, ang[:1] + 2 * np.pi])
        s_ext = np.concatenate([s, [2 * np.pi]])
        shift = np.floor(ang[0] / (2 * np.pi)) * 2 * np.pi
        target_ang = theta + shift
        target_ang = np.where(target_ang < ang[0], target_ang + 2 * np.pi, target_ang)
        t = np.interp(target_ang, ang_ext, s_ext)

        def angle(tt):
            y = self.Tu(self.source.boundary(tt).x) - c
            return np.arctan2(y[:, 1], y[:, 0])

        for _ in range(8):
            F = np.angle(np.exp(1j * (angle(t) - target_ang)))
            h = 1e-6
            dF = np.angle(np.exp(1j * (angle(t + h) - angle(t - h)))) / (2 * h)
            t = t - F / dF
        y = self.Tu(self.source.boundary(t).x) - c
        resid = np.abs(np.angle(np.exp(1j * (np.arctan2(y[:, 1], y[:, 0]) - target_ang))))
        if resid.max() > 1e-10:
            raise ValueError(f"boundary angle inversion failed ({resid.max():.2e})")
        r = np.linalg.norm(y, axis=-1)
        return DomainSpec.from_radius_samples(tuple(c), theta, r, modes=modes)
