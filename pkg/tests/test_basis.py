import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize

from scoremd.basis import (
    BasisSpec,
    bessel_root,
    radial_basis,
    real_spherical_harmonic,
    sbf_features,
    sbf_tensor,
    spherical_bessel,
)
from scoremd.geometry import Conformation, GeometryError, PairGeometry, pair_geometry, random_rotation


def taylor_j(o, x, terms=80):
    """j_o(x) from its power series, summed in 50-digit arithmetic."""
    mpmath.mp.dps = 50
    x = mpmath.mpf(x)
    total = mpmath.mpf(0)
    for k in range(terms):
        total += (-1) ** k * x ** (2 * k + o) / (
            mpmath.fac(k) * 2**k * mpmath.fac2(2 * k + 2 * o + 1))
    return float(total)


# --- spherical_bessel ----------------------------------------------------------

def test_bessel_closed_values():
    assert spherical_bessel(0, 0.0) == 1.0
    assert spherical_bessel(0, math.pi / 2) == pytest.approx(2 / math.pi, abs=1e-15)
    assert spherical_bessel(3, 0.0) == 0.0


@pytest.mark.parametrize("x", [0.5, 1.0, 5.0])
def test_j1_against_taylor_oracle(x):
    assert spherical_bessel(1, x) == pytest.approx(taylor_j(1, x), abs=1e-10)


@pytest.mark.parametrize("o", [0, 1, 2, 3, 5])
@pytest.mark.parametrize("x", [1e-3, 0.7, 2.5, 6.0, 11.0])
def test_higher_degrees_against_taylor_oracle(o, x):
    assert spherical_bessel(o, x) == pytest.approx(taylor_j(o, x), abs=1e-10)


def test_bessel_vectorised():
    xs = np.linspace(0, 10, 7)
    np.testing.assert_allclose(spherical_bessel(2, xs), [spherical_bessel(2, x) for x in xs])


# --- bessel_root ---------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_degree_zero_roots_are_multiples_of_pi(n):
    assert bessel_root(0, n) == pytest.approx(n * math.pi, abs=1e-12)


def test_first_root_of_j1():
    # j_1 vanishes where tan x = x
    oracle = optimize.brentq(lambda x: math.tan(x) - x, math.pi + 0.1, 1.5 * math.pi - 1e-9,
                             xtol=1e-15)
    assert bessel_root(1, 1) == pytest.approx(oracle, abs=1e-12)
    assert bessel_root(1, 1) == pytest.approx(4.493409, abs=1e-6)


def test_roots_are_zeros():
    spec = BasisSpec(n_deg=4, n_root=3, n_ord=2)
    for o in range(4):
        for n in range(3):
            assert abs(spherical_bessel(o, spec.roots[o, n])) < 1e-10
        assert np.all(np.diff(spec.roots[o]) > 0)


# --- harmonics ----------------------------------------------------------------

def test_harmonic_constants():
    assert real_spherical_harmonic(0, 0, 1.3, 0.2) == pytest.approx(1 / (2 * math.sqrt(math.pi)))
    assert real_spherical_harmonic(1, 0, 0.0, 2.0) == pytest.approx(math.sqrt(3 / (4 * math.pi)))
    with pytest.raises(ValueError):
        real_spherical_harmonic(1, 2, 0.0, 0.0)


def sphere_inner(f, g):
    val, _ = integrate.dblquad(
        lambda phi, theta: f(phi, theta) * g(phi, theta) * math.sin(phi),
        0, 2 * math.pi, 0, math.pi, epsabs=1e-10, epsrel=1e-10)
    return val


def test_harmonic_orthonormality_by_quadrature():
    y00 = lambda p, t: real_spherical_harmonic(0, 0, p, t)  # noqa: E731
    y10 = lambda p, t: real_spherical_harmonic(1, 0, p, t)  # noqa: E731
    y21 = lambda p, t: real_spherical_harmonic(2, 1, p, t)  # noqa: E731
    y22 = lambda p, t: real_spherical_harmonic(2, 2, p, t)  # noqa: E731
    assert abs(sphere_inner(y00, y10)) < 1e-6
    assert abs(sphere_inner(y21, y22)) < 1e-6
    for y in (y00, y10, y21, y22):
        assert sphere_inner(y, y) == pytest.approx(1.0, abs=1e-6)


# --- radial part and SBF -----------------------------------------------------------

def test_radial_normalisation_by_quadrature():
    spec = BasisSpec(n_deg=3, n_root=3, n_ord=1, cutoff=1.6)
    for o in range(3):
        for n in range(3):
            val, _ = integrate.quad(
                lambda r: radial_basis(spec, r)[o, n] ** 2 * r * r, 0, spec.cutoff,
                epsabs=1e-12, epsrel=1e-12)
            assert val == pytest.approx(1.0, abs=1e-6)


def pg(d, phi_a=0.4, phi_b=1.1, theta=0.7):
    return PairGeometry(d, phi_a, phi_b, theta, np.array([d, 0.0, 0.0]))


def test_sbf_zero_at_cutoff():
    spec = BasisSpec()
    assert np.all(np.abs(sbf_features(pg(spec.cutoff), spec, 1)) < 1e-15)
    assert np.all(sbf_features(pg(2 * spec.cutoff), spec, 2) == 0)


def test_sbf_composition_example():
    spec = BasisSpec()
    c = spec.cutoff
    val = sbf_features(pg(c / 2), spec, 1)[0, 0, 0]
    norm = math.sqrt(2 / (c**3 * spherical_bessel(1, math.pi) ** 2))
    assert val == pytest.approx(norm * (2 / math.pi) / (2 * math.sqrt(math.pi)), rel=1e-12)


def test_sbf_order_above_degree_is_zero():
    spec = BasisSpec(n_deg=2, n_root=2, n_ord=3)
    t = sbf_features(pg(0.9), spec, 1)
    assert t.shape == (2, 3, 2)
    assert np.all(t[0, 1:] == 0) and np.all(t[1, 2] == 0)
    assert np.any(t[1, 1] != 0)


def test_sbf_which_selects_angle():
    spec = BasisSpec()
    g = pg(0.9)
    np.testing.assert_allclose(sbf_features(g, spec, 2),
                               sbf_features(pg(0.9, phi_a=g.phi_b), spec, 1))
    with pytest.raises(ValueError):
        sbf_features(g, spec, 3)
    with pytest.raises(GeometryError):
        sbf_features(pg(0.0), spec, 1)


def test_sbf_rigid_invariance():
    rng = np.random.default_rng(0)
    spec = BasisSpec()
    for _ in range(100):
        c = Conformation(rng.normal(size=(2, 3)) * 0.6, rng.normal(size=(2, 3)), [1, 1])
        moved = c.transformed(random_rotation(rng), rng.normal(size=3))
        for which in (1, 2):
            a = sbf_features(pair_geometry(c, 0, 1), spec, which)
            b = sbf_features(pair_geometry(moved, 0, 1), spec, which)
            assert np.max(np.abs(a - b)) < 1e-10


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 1.6), st.floats(0, math.pi), st.floats(0, math.pi))
def test_sbf_bounded(d, phi, theta):
    spec = BasisSpec()
    t = sbf_tensor(spec, d, phi, theta)
    assert np.all(np.isfinite(t))
    ymax = math.sqrt(5 / (4 * math.pi)) * 3  # crude bound on |Y_om| for o <= 1
    assert np.all(np.abs(t) <= spec.norms.max() * ymax)
