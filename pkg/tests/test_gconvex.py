import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpje.domains import DomainSpec, build_grid
from gpje.gconvex import (ConstructionError, build_initial, default_rho, envelope_extend, g_rho,
                          touching_case, mollifier_rule, mollify_adjust)
from gpje.genfun import QuadraticOT, Reflection

DISC = DomainSpec("disc", (0.0, 0.0), (1.0, 1.0))
QOT = QuadraticOT()


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 0.6), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3))
def test_g_rho_closed_form_for_quadratic_transport(rho, a, b):
    y0 = np.array([a, b])
    x = DISC.sample_interior(np.random.default_rng(0), 50)
    got = g_rho(QOT, y0, 0.2, rho, x)
    base = x @ y0 - 0.2
    assert np.abs(got.value - base - rho * np.sqrt(1 + np.sum(x * x, -1))).max() < 1e-9
    # the maximizing y stays inside the ball
    assert np.all(np.linalg.norm(got.y - y0, axis=-1) < rho)


def test_g_rho_tends_to_g_affine_linearly_in_rho():
    spec = Reflection()
    y0, z0 = np.zeros(2), -6.0
    x = DISC.sample_interior(np.random.default_rng(1), 100)
    base = spec.value(x, y0, np.full(len(x), z0))
    gaps = [np.abs(g_rho(spec, y0, z0, r, x).value - base).max() for r in (0.2, 0.1, 0.05)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[1] / gaps[2] == pytest.approx(2.0, rel=0.1)


def test_initial_field_is_elliptic_with_contained_image():
    g = build_grid(DISC, 16, 16)
    init = build_initial(Reflection(), DISC, DomainSpec("disc", (0, 0), (2.5, 2.5)), (0, 0), -6.0, 0.5, g)
    assert init.report["min_lambda"] > 0 and init.report["image_violations"] == 0


def test_oversize_ball_is_rejected():
    g = build_grid(DISC, 8, 8)
    with pytest.raises(ConstructionError):
        build_initial(QOT, DISC, DISC, (0.0, 0.0), 0.0, 2.0, g)


def test_default_rho_fits_inside_target():
    target = DomainSpec("disc", (0.2, 0.0), (0.5, 0.5))
    rho = default_rho(QOT, DISC, target, (0.2, 0.0), 0.0)
    assert 0 < rho < 0.5


def _u0_fun(y0, z0, rho):
    def f(x):
        r = g_rho(QOT, y0, z0, rho, x)
        return r.value, r.grad
    return f


def test_envelope_matches_u0_inside_and_grows_with_samples():
    g = build_grid(DISC, 16, 16)
    u0 = _u0_fun(np.zeros(2), 0.0, 0.3)
    coarse = envelope_extend(QOT, u0, DISC, DISC, g, n_boundary=32)
    fine = envelope_extend(QOT, u0, DISC, DISC, g, n_boundary=64)
    assert coarse.interior_excess <= 1e-10
    assert np.allclose(fine.u1[g.inside], u0(g.points[g.inside])[0])
    th = np.linspace(0, 2 * np.pi, 50)
    out = 1.3 * np.stack([np.cos(th), np.sin(th)], -1)
    assert np.all(fine.value(out) >= coarse.value(out) - 1e-14)
    assert np.all(coarse.value(out) >= u0(out)[0])


def test_mollifier_weights_and_constant_shift():
    off, w = mollifier_rule(0.2)
    # weights sum to one and the rule is symmetric
    assert w.sum() == pytest.approx(1.0) and np.abs(w @ off).max() < 1e-14
    g = build_grid(DISC, 8, 8)
    fun = lambda x: 0.5 * np.sum(x * x, -1)
    a, _, _ = mollify_adjust(QOT, fun, g, DISC, eps_moll=0.2, check=False)
    b, _, _ = mollify_adjust(QOT, lambda x: fun(x) + 3.0, g, DISC, eps_moll=0.2, check=False)
    assert np.abs(b - a - 3.0).max() < 1e-12


def test_touching_function_without_tilt_stays_below():
    g = build_grid(DISC, 16, 16)
    for node in g.boundary_index[::5]:
        mh, _ = touching_case(QOT, DISC, g, np.zeros(2), 0.0, 0.3, int(node), 0.0)
        assert mh >= -1e-12
