import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpje.domains import DomainSpec, build_grid
from gpje.dualmaps import (DegeneracyError, DualMapError, Jet1, dual_gstar, dual_yz, map_Q, map_T,
                           matrix_A, matrix_E, scalar_B, solve_duals)
from gpje.genfun import AdmissibilityError, QuadraticOT, Reflection, Refraction, TargetProfile, sample_triples
from gpje.manufactured import Manufactured

TILTED = TargetProfile("quadratic", c=0.1, b=(0.1, -0.05), Q=((0.05, 0.0), (0.0, 0.02)))
SPECS = [QuadraticOT(), Reflection(), Reflection(TILTED), Refraction(0.5), Refraction(2.0, TILTED)]
IDS = ["qot", "refl", "refl-tilted", "k0.5", "k2-tilted"]


@pytest.mark.parametrize("spec", SPECS, ids=IDS)
def test_gstar_inverts_g(spec):
    rng = np.random.default_rng(0)
    x, y, z = sample_triples(spec, rng, 400)
    u = spec.value(x, y, z)
    z2 = dual_gstar(spec, x, y, u)
    assert np.abs(z2 - z).max() < 1e-9
    assert np.abs(spec.value(x, y, z2) - u).max() < 1e-10


def test_gstar_rejects_heights_outside_J():
    with pytest.raises(AdmissibilityError):
        dual_gstar(Reflection(), np.zeros((1, 2)), np.zeros((1, 2)), np.array([-1.0]))


@pytest.mark.parametrize("spec", SPECS, ids=IDS)
def test_duals_recover_generating_triple(spec):
    x, y, z = sample_triples(spec, np.random.default_rng(1), 500)
    v = spec.evaluate(x, y, z)
    d = solve_duals(spec, Jet1(x, v.g, v.g_x))
    assert np.abs(d.Y - y).max() < 1e-9 and np.abs(d.Z - z).max() < 1e-9
    # E and its inverse, Q against its definition
    assert np.allclose(np.einsum("mij,mjk->mik", d.E, d.Einv), np.eye(2), atol=1e-9)
    assert np.allclose(d.Q, map_Q(spec, x, y, z), atol=1e-8)


def test_flat_reflection_closed_form():
    x = np.array([[0.1, 0.2]])
    u, p = np.array([2.0]), np.array([[0.3, -0.1]])
    Y, Z, ok, _ = dual_yz(Reflection(), x, u, p)
    Z_ref = 2 * (0.0 - 2.0) / (1 - 0.1)
    assert ok[0] and Z[0] == pytest.approx(Z_ref, rel=1e-14)
    assert np.allclose(Y[0], x[0] - Z_ref * p[0], atol=1e-14)
    A = matrix_A(Reflection(), Jet1(x, u, p))
    assert np.allclose(A[0], np.eye(2) / Z_ref)


def test_jet_outside_admissible_set():
    # u below the flat target with |p| < 1 gives Z > 0
    jet = Jet1(np.zeros((1, 2)), np.array([-1.0]), np.array([[0.1, 0.0]]))
    with pytest.raises(DualMapError):
        solve_duals(Reflection(), jet)
    d = solve_duals(Reflection(), jet, strict=False)
    assert not d.ok[0] and np.isnan(d.Y).all()


def test_degenerate_E_is_reported():
    # quadratic transport has E = I; a reflection triple with z -> -inf makes E vanish
    with pytest.raises(DegeneracyError):
        matrix_E(Reflection(), np.zeros((1, 2)), np.zeros((1, 2)), np.array([-1e13]))


def test_scalar_B_and_f_star_floor():
    spec = Reflection()
    jet = Jet1(np.array([[0.1, 0.0]]), np.array([2.0]), np.array([[0.2, 0.1]]))
    B = scalar_B(spec, jet, lambda x: 2 * np.ones(len(x)), lambda y: np.ones(len(y)))
    detE = np.linalg.det(solve_duals(spec, jet).E)
    assert B[0] == pytest.approx(2 * abs(detE[0]))
    with pytest.raises(ValueError):
        scalar_B(spec, jet, lambda x: np.ones(len(x)), lambda y: np.zeros(len(y)))


def test_obliqueness_vector():
    spec = QuadraticOT()
    x = np.array([[0.6, 0.8]])
    d = solve_duals(spec, Jet1(x, np.array([0.5]), x), target_grad=lambda y: y)
    # E = I, so G_p = D phi*(Y) = Y = x
    assert np.allclose(d.G_p, x)


def test_jacobian_identity_at_jet_level_for_reflection():
    """det DTu det E = det(D^2u - A) with DTu from differences of the pointwise map."""
    disc = DomainSpec("disc", (0, 0), (1, 1))
    man = Manufactured(Reflection(), disc)
    x = disc.sample_interior(np.random.default_rng(2), 300, shrink=0.9)
    h = 1e-5
    DT = np.empty((len(x), 2, 2))
    for k, e in enumerate(np.eye(2) * h):
        DT[:, :, k] = (man.Tu(x + e) - man.Tu(x - e)) / (2 * h)
    d = man.duals(x)
    M = man.field.hess(x) - d.A
    lhs = np.linalg.det(DT) * d.detE
    assert np.abs(lhs - np.linalg.det(M)).max() < 1e-8


def test_map_T_on_identity_field():
    disc = DomainSpec("disc", (0, 0), (1, 1))
    g = build_grid(disc, 16, 16)
    T = map_T(QuadraticOT(), 0.5 * np.sum(g.points**2, -1), g)
    assert np.abs(T.Tu - g.points).max() < 1e-12
    assert np.abs(T.detDTu - 1).max() < 1e-10
    assert T.elliptic.all()


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9), st.floats(0.5, 3.0))
def test_refraction_flat_closed_form_agrees_with_generating_equations(p1, p2, depth):
    spec = Refraction(0.5)
    x = np.array([[0.2, -0.1]])
    u = np.array([-depth])
    p = np.array([[p1, p2]])
    Y, Z, ok, res = dual_yz(spec, x, u, p)
    assert ok[0]
    v = spec.evaluate(x, Y, Z)
    assert abs(v.g[0] - u[0]) < 1e-12 and np.abs(v.g_x - p).max() < 1e-12
