"""Run configuration: TOML in, dataclasses out, and back."""

from __future__ import annotations

import hashlib
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .domains import DomainSpec
from .genfun import from_dict as spec_from_dict
from .manufactured import Manufactured, PolyField


class ConfigError(ValueError):
    """Invalid configuration (message carries the offending key or line)."""


# --------------------------------------------------------------------------
# densities


@dataclass
class DensityConfig:
    """f or f*: constant | polynomial | radial | manufactured.

    polynomial: value = sum c x1^i x2^j over ``terms`` [[i, j, c], ...];
    radial: value = sum coeffs[k] |x - center|^k.
    """

    kind: str = "constant"
    value: float = 1.0
    terms: list = field(default_factory=list)
    coeffs: list = field(default_factory=list)
    center: list = field(default_factory=lambda: [0.0, 0.0])

    def __post_init__(self):
        if self.kind not in ("constant", "polynomial", "radial", "manufactured"):
            raise ConfigError(f"unknown density kind {self.kind!r}")

    def build(self, manufactured: Optional[Manufactured] = None):
        if self.kind == "constant":
            v = float(self.value)
            return lambda x: np.full(len(np.atleast_2d(x)), v)
        if self.kind == "polynomial":
            pf = PolyField(tuple((int(i), int(j), float(c)) for i, j, c in self.terms))
            return pf.value
        if self.kind == "radial":
            c = np.asarray(self.center, float)
            a = np.asarray(self.coeffs, float)
            return lambda x: np.polynomial.polynomial.polyval(np.linalg.norm(np.atleast_2d(x) - c, axis=-1), a)
        if manufactured is None:
            raise ConfigError("density kind 'manufactured' needs a [manufactured] block")
        return manufactured.f


# --------------------------------------------------------------------------
# blocks


@dataclass
class ModelConfig:
    variant: str = "quadratic_ot"  # quadratic_ot | reflection | refraction
    kappa: float = 0.5  # ratio of refraction indices n1/n2 (dimensionless)
    profile: dict = field(default_factory=lambda: {"kind": "constant", "c": 0.0})  # target height, length units

    def build(self):
        d = {"variant": self.variant, "profile": self.profile}
        if self.variant == "refraction":
            d["kappa"] = self.kappa
        try:
            return spec_from_dict(d)
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"[model]: {exc}") from exc


@dataclass
class DomainConfig:
    kind: str = "disc"  # disc | ellipse | superellipse | fourier | manufactured (target only)
    center: list = field(default_factory=lambda: [0.0, 0.0])  # length units
    radii: list = field(default_factory=lambda: [1.0, 1.0])  # length units
    q: int = 4
    cos_coeffs: list = field(default_factory=list)
    sin_coeffs: list = field(default_factory=list)

    def build(self) -> DomainSpec:
        try:
            return DomainSpec.from_dict({"kind": self.kind, "center": self.center, "radii": self.radii,
                                         "q": self.q, "cos_coeffs": self.cos_coeffs,
                                         "sin_coeffs": self.sin_coeffs})
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"domain: {exc}") from exc


@dataclass
class GridConfig:
    n_r: int = 32
    n_theta: int = 32


@dataclass
class GConvexConfig:
    y0: Optional[list] = None  # default: target center (length units)
    z0: float = 0.0  # height parameter of the g-affine seed
    rho: Optional[float] = None  # ball radius (length units); default from the admissibility ladder
    envelope: bool = True
    delta: float = 0.5
    eps_moll: float = 0.2  # mollifier radius (length units)
    t_adj: float = 1.0
    n_boundary: int = 256
    require_range: bool = True


@dataclass
class HomotopyConfig:
    tau: Optional[float] = None
    tau_safety: float = 4.0
    eps0: float = 1e-2
    eps_factor: float = 0.25
    eps_min: float = 1e-6
    dt0: float = 0.1
    dt_min: float = 1e-4
    newton_tol: float = 1e-9
    max_newton: int = 15
    delta_min: float = 1e-8
    pin: str = "mean"  # mean | anchor | none
    anchor_value: Optional[float] = None
    grad_guard: bool = True


@dataclass
class CheckConfig:
    window: list = field(default_factory=lambda: [-1.0, 1.0])  # height window for sampled checks
    n_samples: int = 2000
    tol: float = 1e-6


@dataclass
class VerifyConfig:
    n_rays: int = 10000
    n_samples: int = 1000000
    bins: list = field(default_factory=lambda: [4, 8])
    max_ray_deviation: float = 1e-4  # length units
    max_mass_mismatch: float = 0.02  # relative
    exact_gradient_tol: Optional[float] = None  # identity case: sup |Du - x|
    field: str = "solution"  # solution | initial (negative control on the t = 0 field)


@dataclass
class ManufacturedConfig:
    terms: list = field(default_factory=lambda: [list(t) for t in PolyField().terms])


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    output_dir: str = "runs/run"
    model: ModelConfig = field(default_factory=ModelConfig)
    source: DomainConfig = field(default_factory=DomainConfig)
    target: DomainConfig = field(default_factory=DomainConfig)
    f: DensityConfig = field(default_factory=DensityConfig)
    f_star: DensityConfig = field(default_factory=DensityConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    gconvex: GConvexConfig = field(default_factory=GConvexConfig)
    homotopy: HomotopyConfig = field(default_factory=HomotopyConfig)
    checks: CheckConfig = field(default_factory=CheckConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    manufactured: Optional[ManufacturedConfig] = None

    # ---- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return _drop_none(asdict(self))

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def content_hash(self) -> str:
        return hashlib.sha1(self.dumps().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            d = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"TOML parse error: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    # ---- model objects ------------------------------------------------------

    def build(self) -> "Setup":
        spec = self.model.build()
        source = self.source.build()
        man = None
        if self.manufactured is not None:
            pf = PolyField(tuple((int(i), int(j), float(c)) for i, j, c in self.manufactured.terms))
            man = Manufactured(spec, source, pf)
        if self.target.kind == "manufactured":
            if man is None:
                raise ConfigError("target kind 'manufactured' needs a [manufactured] block")
            target = man.target()
        else:
            target = self.target.build()
        return Setup(self, spec, source, target, self.f.build(man), self.f_star.build(man), man)


@dataclass
class Setup:
    config: RunConfig
    spec: object
    source: DomainSpec
    target: DomainSpec
    f: object
    f_star: object
    manufactured: Optional[Manufactured] = None


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, (list, tuple)):
        return [_drop_none(v) for v in d]
    return d


_NESTED = {"model": ModelConfig, "source": DomainConfig, "target": DomainConfig, "f": DensityConfig,
           "f_star": DensityConfig, "grid": GridConfig, "gconvex": GConvexConfig,
           "homotopy": HomotopyConfig, "checks": CheckConfig, "verify": VerifyConfig,
           "manufactured": ManufacturedConfig}


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{where or 'top level'}]")
    kw = {}
    for k, v in d.items():
        if cls is RunConfig and k in _NESTED:
            kw[k] = _build(_NESTED[k], v, k)
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where or 'top level'}]: {exc}") from exc
