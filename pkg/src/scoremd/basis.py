"""Spherical Bessel functions, their zeros, real spherical harmonics and the
two spherical Fourier-Bessel (SBF) pair features built from them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import GeometryError, PairGeometry


def _bessel_series(o: int, x: np.ndarray, terms: int = 40) -> np.ndarray:
    # j_o(x) = x^o/(2o+1)!! * sum_k (-x^2/2)^k / (k! (2o+3)(2o+5)...(2o+2k+1))
    lead = x**o / float(np.prod(np.arange(1, 2 * o + 2, 2)))
    term = np.ones_like(x)
    total = np.ones_like(x)
    y = -0.5 * x * x
    for k in range(1, terms):
        term = term * y / (k * (2 * o + 2 * k + 1))
        total = total + term
    return lead * total


def spherical_bessel(o: int, x):
    """Spherical Bessel function of the first kind j_o(x), x >= 0.

    Closed forms for j_0 and j_1 with upward recurrence for higher degrees;
    a power series is used for x < max(1, o) where either form loses digits.
    """
    if o < 0:
        raise ValueError("degree must be non-negative")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    small = x < max(1.0, float(o))
    if np.any(small):
        out[small] = _bessel_series(o, x[small])
    big = ~small
    if np.any(big):
        xb = x[big]
        s, c = np.sin(xb), np.cos(xb)
        j0 = s / xb
        if o == 0:
            out[big] = j0
        else:
            j1 = s / xb**2 - c / xb
            jm, jn = j0, j1
            for k in range(1, o):
                jm, jn = jn, (2 * k + 1) / xb * jn - jm
            out[big] = jn
    return float(out[0]) if scalar else out


def bessel_root(o: int, n: int, tol: float = 1e-13) -> float:
    """n-th positive zero of j_o by sign-change bracketing and bisection."""
    if n < 1:
        raise ValueError("root index starts at 1")
    step = 0.1
    lo = 0.5 * step
    f_lo = spherical_bessel(o, lo)
    found = 0
    while True:
        hi = lo + step
        f_hi = spherical_bessel(o, hi)
        if f_hi == 0.0:
            found += 1
            if found == n:
                return hi
        elif f_lo * f_hi < 0:
            found += 1
            if found == n:
                break
        lo, f_lo = hi, f_hi
    a, b, fa = lo, hi, f_lo
    for _ in range(200):
        mid = 0.5 * (a + b)
        fm = spherical_bessel(o, mid)
        if fm == 0.0:
            return mid
        if fa * fm < 0:
            b = mid
        else:
            a, fa = mid, fm
        if b - a < tol * max(1.0, a):
            break
    return 0.5 * (a + b)


def _legendre(o: int, m: int, x: np.ndarray) -> np.ndarray:
    """Associated Legendre P_o^m(x), no Condon-Shortley phase."""
    somx2 = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    pmm = np.ones_like(x)
    fact = 1.0
    for _ in range(m):
        pmm = pmm * fact * somx2
        fact += 2.0
    if o == m:
        return pmm
    pmmp1 = x * (2 * m + 1) * pmm
    if o == m + 1:
        return pmmp1
    for ll in range(m + 2, o + 1):
        pll = ((2 * ll - 1) * x * pmmp1 - (ll + m - 1) * pmm) / (ll - m)
        pmm, pmmp1 = pmmp1, pll
    return pmmp1


def real_spherical_harmonic(o: int, m: int, phi, theta):
    """Orthonormal real harmonic Y_om (cosine branch, m >= 0).

    ``phi`` is the polar angle and ``theta`` the azimuth.
    """
    if m < 0 or m > o:
        raise ValueError(f"order m={m} invalid for degree o={o}")
    phi = np.asarray(phi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    k = math.sqrt((2 * o + 1) / (4 * math.pi) * math.factorial(o - m) / math.factorial(o + m))
    p = _legendre(o, m, np.cos(phi))
    if m == 0:
        y = k * p * np.ones_like(theta)
    else:
        y = math.sqrt(2.0) * k * p * np.cos(m * theta)
    return float(y) if np.ndim(y) == 0 else y


@dataclass(frozen=True)
class BasisSpec:
    n_deg: int = 2
    n_root: int = 2
    n_ord: int = 2
    cutoff: float = 1.6
    roots: np.ndarray = field(init=False, repr=False, compare=False)
    norms: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if min(self.n_deg, self.n_root, self.n_ord) < 1:
            raise ValueError("basis counts must be >= 1")
        if not self.cutoff > 0:
            raise ValueError("cutoff must be positive")
        roots = np.array(
            [[bessel_root(o, n) for n in range(1, self.n_root + 1)] for o in range(self.n_deg)]
        )
        norms = np.empty_like(roots)
        for o in range(self.n_deg):
            jn1 = spherical_bessel(o + 1, roots[o])
            norms[o] = np.sqrt(2.0 / (self.cutoff**3 * jn1**2))
        roots.setflags(write=False)
        norms.setflags(write=False)
        object.__setattr__(self, "roots", roots)
        object.__setattr__(self, "norms", norms)

    @property
    def size(self) -> int:
        return self.n_deg * self.n_ord * self.n_root

    def to_dict(self) -> dict:
        return {"n_deg": self.n_deg, "n_root": self.n_root, "n_ord": self.n_ord, "cutoff": self.cutoff}


def radial_basis(spec: BasisSpec, d) -> np.ndarray:
    """Normalised radial functions, shape (..., n_deg, n_root)."""
    d = np.asarray(d, dtype=float)
    out = np.empty(d.shape + (spec.n_deg, spec.n_root))
    for o in range(spec.n_deg):
        for n in range(spec.n_root):
            arg = spec.roots[o, n] * d / spec.cutoff
            out[..., o, n] = spec.norms[o, n] * spherical_bessel(o, arg.ravel()).reshape(d.shape)
    return out


def angular_basis(spec: BasisSpec, phi, theta) -> np.ndarray:
    """Real harmonics, shape (..., n_deg, n_ord); zero where m > o."""
    phi = np.asarray(phi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    out = np.zeros(np.broadcast(phi, theta).shape + (spec.n_deg, spec.n_ord))
    for o in range(spec.n_deg):
        for m in range(min(o, spec.n_ord - 1) + 1):
            out[..., o, m] = real_spherical_harmonic(o, m, phi, theta)
    return out


def sbf_tensor(spec: BasisSpec, d, phi, theta) -> np.ndarray:
    """SBF values indexed (..., o, m, n); pairs at or beyond the cutoff are 0."""
    d = np.asarray(d, dtype=float)
    rad = radial_basis(spec, d)
    ang = angular_basis(spec, phi, theta)
    out = ang[..., :, :, None] * rad[..., :, None, :]
    inside = (d > 0) & (d < spec.cutoff)
    return np.where(inside[..., None, None, None], out, 0.0)


def sbf_features(pg: PairGeometry, spec: BasisSpec, which: int) -> np.ndarray:
    """SBF slice for one pair: ``which=1`` uses phi_a, ``which=2`` uses phi_b."""
    if pg.distance <= 0:
        raise GeometryError("zero pair distance")
    if which == 1:
        phi = pg.phi_a
    elif which == 2:
        phi = pg.phi_b
    else:
        raise ValueError("which must be 1 or 2")
    return sbf_tensor(spec, pg.distance, phi, pg.theta)
