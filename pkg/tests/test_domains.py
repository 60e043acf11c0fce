import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpje.domains import (DomainSpec, Grid, GridError, build_grid, check_Y_convexity,
                          check_Ystar_convexity)
from gpje.genfun import QuadraticOT, Reflection

DOMAINS = [
    DomainSpec("disc", (0.2, -0.1), (0.7, 0.7)),
    DomainSpec("ellipse", (0.0, 0.3), (1.2, 0.8)),
    DomainSpec("superellipse", (0.0, 0.0), (1.0, 0.9), q=4),
    DomainSpec("fourier", (0.1, 0.0), (1.0, 1.0), cos_coeffs=(0.05, 0.03), sin_coeffs=(0.0, -0.02)),
]


@pytest.mark.parametrize("d", DOMAINS, ids=lambda d: d.kind)
def test_defining_function_vanishes_on_boundary_with_unit_gradient(d):
    th = np.linspace(0, 2 * np.pi, 97)
    bp = d.boundary(th)
    phi, Dphi, _ = d.defining_function(bp.x)
    assert np.abs(phi).max() < 1e-10
    assert np.allclose(np.linalg.norm(Dphi, axis=-1), 1.0, atol=1e-8)
    # outward normal agrees with the gradient of phi
    assert np.allclose(Dphi, bp.normal, atol=1e-8)


@pytest.mark.parametrize("d", DOMAINS, ids=lambda d: d.kind)
def test_sign_of_phi(d):
    assert d.phi(np.asarray(d.center)[None])[0] < 0
    far = np.asarray(d.center) + 10 * d.max_radius
    assert d.phi(far[None])[0] > 0


def test_areas():
    assert DomainSpec("disc", (0, 0), (0.7, 0.7)).area() == pytest.approx(np.pi * 0.49, rel=1e-13)
    assert DomainSpec("ellipse", (0, 0), (1.2, 0.8)).area() == pytest.approx(np.pi * 0.96, rel=1e-12)


@pytest.mark.parametrize("d", DOMAINS, ids=lambda d: d.kind)
def test_dict_round_trip(d):
    assert DomainSpec.from_dict(d.to_dict()) == d


def test_invalid_domains():
    with pytest.raises(GridError):
        DomainSpec("triangle")
    with pytest.raises(GridError):
        DomainSpec("disc", (0, 0, 0))
    with pytest.raises(GridError):
        DomainSpec("superellipse", q=3)
    with pytest.raises(GridError):
        build_grid(DOMAINS[0], 8, 9)


def test_from_radius_samples_reproduces_fourier_domain():
    d = DOMAINS[3]
    th = 2 * np.pi * np.arange(256) / 256
    fit = DomainSpec.from_radius_samples(d.center, th, d.radius(th))
    t = np.linspace(0, 2 * np.pi, 301)
    assert np.abs(fit.radius(t) - d.radius(t)).max() < 1e-13


@pytest.mark.parametrize("d", DOMAINS, ids=lambda d: d.kind)
def test_grid_geometry(d):
    g = build_grid(d, 24, 32)
    assert np.abs(d.phi(g.points[g.boundary_index])).max() < 1e-12
    assert np.all(d.phi(g.points[g.interior_index]) < 0)
    assert g.cell_measure.sum() == pytest.approx(d.area(), rel=1e-10)


def test_radial_quadratic_is_differentiated_exactly():
    # |x - c|^2 / 2 depends on s only, and the s-stencils are exact on polynomials
    d = DOMAINS[0]
    g = build_grid(d, 16, 16)
    w = g.points - np.asarray(d.center)
    u = 0.5 * np.sum(w * w, -1)
    ops = g.operators()
    assert np.abs(ops.gradient(u) - w).max() < 1e-12
    assert np.abs(ops.hessian(u) - np.eye(2)).max() < 1e-10


def _smooth(x, y):
    u = np.exp(0.5 * x) * np.cos(y)
    Du = np.stack([0.5 * u, -np.exp(0.5 * x) * np.sin(y)], -1)
    H = np.exp(0.5 * x)[:, None, None] * np.array([[0.25 * np.cos(y), -0.5 * np.sin(y)],
                                                   [-0.5 * np.sin(y), -np.cos(y)]]).transpose(2, 0, 1)
    return u, Du, H


# the superellipse radius has a wide spectrum and needs finer grids for the asymptotic rate
@pytest.mark.parametrize("d", [DOMAINS[0], DOMAINS[1], DOMAINS[3]], ids=lambda d: d.kind)
def test_operators_converge_on_smooth_field(d):
    eg, eh = [], []
    for n in (16, 32):
        g = build_grid(d, n, n)
        u, Du, H = _smooth(*g.points.T)
        ops = g.operators()
        inner = g.ring < g.n_r - 2
        eg.append(np.abs(ops.gradient(u) - Du).max())
        eh.append(np.abs(ops.hessian(u) - H)[inner].max())
    assert eg[1] < eg[0] / 3.5
    assert eh[1] < eh[0] / 3.5


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0, 2 * np.pi))
def test_inverse_map_round_trip(s, th):
    g = Grid(DOMAINS[3], 16, 16)
    x = g.map(np.array([s]), np.array([th]))
    s2, th2 = g.inverse_map(x)
    assert s2[0] == pytest.approx(s, abs=1e-12)
    assert np.angle(np.exp(1j * (th2[0] - th))) == pytest.approx(0.0, abs=1e-12)


def test_sample_interior_is_area_uniform():
    d = DomainSpec("ellipse", (0.0, 0.0), (2.0, 0.5))
    x = d.sample_interior(np.random.default_rng(0), 200_000)
    assert np.all(d.phi(x) < 0)
    # area fraction of the strip |x1| < a/2 in an ellipse with semi-axis a
    frac = np.mean(np.abs(x[:, 0]) < 1.0)
    expected = (2 / np.pi) * (np.arcsin(0.5) + 0.5 * np.sqrt(1 - 0.25))
    assert frac == pytest.approx(expected, abs=0.005)


def test_discs_are_Y_and_Ystar_convex_for_quadratic_transport():
    d = DomainSpec("disc", (0, 0), (1, 1))
    rep = check_Y_convexity(d, d, (-1, 1), QuadraticOT(), n_samples=500)
    assert rep.convex and rep.margin == pytest.approx(1.0, abs=1e-6)
    rep = check_Ystar_convexity(d, d, (-1, 1), QuadraticOT(), n_samples=6)
    assert rep.convex


def test_dented_target_fails_Ystar_convexity():
    d = DomainSpec("disc", (0, 0), (1, 1))
    dent = DomainSpec("fourier", (0, 0), (1, 1), cos_coeffs=(0.0, 0.0, 0.15))
    assert dent.min_curvature() < 0
    rep = check_Ystar_convexity(dent, d, (-1, 1), QuadraticOT(), n_samples=6)
    assert not rep.convex and rep.margin < 0


def test_reflection_Ystar_convexity_of_disc_target():
    d = DomainSpec("disc", (0, 0), (1, 1))
    t = DomainSpec("disc", (0, 0), (2.5, 2.5))
    assert check_Ystar_convexity(t, d, (2.5, 4.0), Reflection(), n_samples=6).convex
