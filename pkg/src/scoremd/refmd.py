"""Reference classical MD: force field, analytic forces, velocity Verlet and
a GaMD-style boost potential.

Reduced units throughout: masses in units of 1, Coulomb constant
1/(4 pi eps_0) = 1, Boltzmann constant 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Conformation, GeometryError, Trajectory

UNITS = {"length": "reduced (A)", "energy": "reduced", "mass": "reduced",
         "coulomb_constant": 1.0, "boltzmann": 1.0}


class SimulationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class HarmonicTether:
    """External spring (k/2)|x_atom - anchor|^2."""

    atom: int
    k: float
    anchor: tuple = (0.0, 0.0, 0.0)

    def energy(self, x):
        d = x[self.atom] - np.asarray(self.anchor)
        return 0.5 * self.k * float(d @ d)

    def forces(self, x):
        f = np.zeros_like(x)
        f[self.atom] = -self.k * (x[self.atom] - np.asarray(self.anchor))
        return f


@dataclass(frozen=True)
class DoubleWell:
    """External barrier * ((q/a)^2 - 1)^2 along one Cartesian axis."""

    atom: int
    barrier: float = 1.0
    a: float = 1.0
    axis: int = 0

    def energy(self, x):
        q = x[self.atom, self.axis] / self.a
        return self.barrier * (q * q - 1.0) ** 2

    def forces(self, x):
        q = x[self.atom, self.axis] / self.a
        f = np.zeros_like(x)
        f[self.atom, self.axis] = -4.0 * self.barrier * q * (q * q - 1.0) / self.a
        return f


@dataclass
class ForceFieldParams:
    masses: np.ndarray
    bonds: list = field(default_factory=list)      # (i, j, c_l, l0)
    angles: list = field(default_factory=list)     # (i, j, k, c_alpha, alpha0), j is the vertex
    torsions: list = field(default_factory=list)   # (i, j, k, l, [(U, c, theta0), ...])
    lj: list = field(default_factory=list)         # (i, j, eps, x0)
    charges: np.ndarray | None = None
    dielectric: float = 1.0
    exclusions: set = field(default_factory=set)   # pairs skipped by Coulomb
    external: list = field(default_factory=list)

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=float)
        if np.any(self.masses <= 0):
            raise ValueError("masses must be positive")
        if any(b[2] < 0 for b in self.bonds) or any(a[3] < 0 for a in self.angles):
            raise ValueError("force constants must be non-negative")
        if any(p[2] < 0 or p[3] <= 0 for p in self.lj):
            raise ValueError("LJ needs eps >= 0 and x0 > 0")
        if not self.dielectric > 0:
            raise ValueError("dielectric must be positive")
        if self.charges is not None:
            self.charges = np.asarray(self.charges, dtype=float)
        self.exclusions = {tuple(sorted(p)) for p in self.exclusions}

    @property
    def n_atoms(self) -> int:
        return len(self.masses)

    def coulomb_pairs(self):
        if self.charges is None:
            return []
        n = self.n_atoms
        return [(i, j) for i in range(n) for j in range(i + 1, n)
                if (i, j) not in self.exclusions and self.charges[i] and self.charges[j]]


def _pair_dist(x, i, j):
    r = x[j] - x[i]
    d = math.sqrt(float(r @ r))
    if d < 1e-10:
        raise GeometryError(f"atoms {i} and {j} coincide")
    return r, d


def _angle_terms(x, i, j, k):
    u = x[i] - x[j]
    w = x[k] - x[j]
    nu, nw = np.linalg.norm(u), np.linalg.norm(w)
    if nu < 1e-10 or nw < 1e-10:
        raise GeometryError(f"degenerate angle {i}-{j}-{k}")
    cos = float(np.clip(u @ w / (nu * nw), -1.0, 1.0))
    sin = math.sqrt(max(0.0, 1.0 - cos * cos))
    if sin < 1e-8:
        raise GeometryError(f"collinear angle {i}-{j}-{k}")
    alpha = math.acos(cos)
    da_di = -(w / (nu * nw) - cos * u / nu**2) / sin
    da_dk = -(u / (nu * nw) - cos * w / nw**2) / sin
    return alpha, da_di, da_dk


def dihedral(x, i, j, k, l):
    b1, b2, b3 = x[j] - x[i], x[k] - x[j], x[l] - x[k]
    n1, n2 = np.cross(b1, b2), np.cross(b2, b3)
    nb2 = np.linalg.norm(b2)
    return math.atan2(nb2 * float(b1 @ n2), float(n1 @ n2))


def _dihedral_terms(x, i, j, k, l):
    b1, b2, b3 = x[j] - x[i], x[k] - x[j], x[l] - x[k]
    n1, n2 = np.cross(b1, b2), np.cross(b2, b3)
    nb2 = np.linalg.norm(b2)
    n1sq, n2sq = float(n1 @ n1), float(n2 @ n2)
    if nb2 < 1e-10 or n1sq < 1e-16 or n2sq < 1e-16:
        raise GeometryError(f"degenerate torsion {i}-{j}-{k}-{l}")
    theta = math.atan2(nb2 * float(b1 @ n2), float(n1 @ n2))
    gi = -nb2 / n1sq * n1
    gl = nb2 / n2sq * n2
    p = float(b1 @ b2) / nb2**2
    r = float(b3 @ b2) / nb2**2
    gj = -(1.0 + p) * gi + r * gl
    gk = -(gi + gj + gl)
    return theta, gi, gj, gk, gl


def potential_energy(ff: ForceFieldParams, x) -> float:
    x = np.asarray(x, dtype=float)
    u = 0.0
    for i, j, c, l0 in ff.bonds:
        _, d = _pair_dist(x, i, j)
        u += 0.5 * c * (d - l0) ** 2
    for i, j, k, c, a0 in ff.angles:
        alpha, _, _ = _angle_terms(x, i, j, k)
        u += 0.5 * c * (alpha - a0) ** 2
    for i, j, k, l, series in ff.torsions:
        th = dihedral(x, i, j, k, l)
        for barrier, mult, phase in series:
            u += 0.5 * barrier * (1.0 + math.cos(mult * th - phase))
    for i, j, eps, x0 in ff.lj:
        _, d = _pair_dist(x, i, j)
        sr6 = (x0 / d) ** 6
        u += eps * (sr6 * sr6 - 2.0 * sr6)
    for i, j in ff.coulomb_pairs():
        _, d = _pair_dist(x, i, j)
        u += ff.charges[i] * ff.charges[j] / (ff.dielectric * d)
    for ext in ff.external:
        u += ext.energy(x)
    return float(u)


def forces(ff: ForceFieldParams, x) -> np.ndarray:
    """Analytic -dU/dx, shape (N, 3)."""
    x = np.asarray(x, dtype=float)
    f = np.zeros_like(x)
    for i, j, c, l0 in ff.bonds:
        r, d = _pair_dist(x, i, j)
        g = c * (d - l0) * r / d  # dU/dx_j
        f[j] -= g
        f[i] += g
    for i, j, k, c, a0 in ff.angles:
        alpha, da_di, da_dk = _angle_terms(x, i, j, k)
        dU = c * (alpha - a0)
        f[i] -= dU * da_di
        f[k] -= dU * da_dk
        f[j] += dU * (da_di + da_dk)
    for i, j, k, l, series in ff.torsions:
        th, gi, gj, gk, gl = _dihedral_terms(x, i, j, k, l)
        dU = sum(-0.5 * barrier * mult * math.sin(mult * th - phase)
                 for barrier, mult, phase in series)
        f[i] -= dU * gi
        f[j] -= dU * gj
        f[k] -= dU * gk
        f[l] -= dU * gl
    for i, j, eps, x0 in ff.lj:
        r, d = _pair_dist(x, i, j)
        sr6 = (x0 / d) ** 6
        dU_dd = 12.0 * eps / d * (sr6 - sr6 * sr6)
        g = dU_dd * r / d
        f[j] -= g
        f[i] += g
    for i, j in ff.coulomb_pairs():
        r, d = _pair_dist(x, i, j)
        dU_dd = -ff.charges[i] * ff.charges[j] / (ff.dielectric * d * d)
        g = dU_dd * r / d
        f[j] -= g
        f[i] += g
    for ext in ff.external:
        f += ext.forces(x)
    return f


def kinetic_energy(ff: ForceFieldParams, v) -> float:
    v = np.asarray(v, dtype=float)
    return 0.5 * float(np.sum(ff.masses[:, None] * v * v))


@dataclass(frozen=True)
class GamdParams:
    u_bar: float
    eta_u: float
    sigma_0: float = 10.0

    def __post_init__(self):
        if self.eta_u < 0 or not self.sigma_0 > 0:
            raise ValueError("need eta_u >= 0 and sigma_0 > 0")


def gamd_boost(g: GamdParams, u: float) -> float:
    if u < g.u_bar:
        return 0.5 * g.eta_u * (g.u_bar - u) ** 2
    return 0.0


def gamd_sigma_check(g: GamdParams, u_avg: float, sigma_u: float, eta: float) -> bool:
    """Whether the boost spread eta (U_bar - U_avg) sigma_U stays within sigma_0."""
    return eta * (g.u_bar - u_avg) * sigma_u <= g.sigma_0


def boosted_forces(ff: ForceFieldParams, x, g: GamdParams | None):
    """Forces of U* = U + dU and the pair (U, dU)."""
    f = forces(ff, x)
    u = potential_energy(ff, x)
    if g is None:
        return f, u, 0.0
    if u < g.u_bar:
        f = f * (1.0 - g.eta_u * (g.u_bar - u))
    return f, u, gamd_boost(g, u)


def velocity_verlet_step(ff: ForceFieldParams, x, v, dt: float, f=None):
    """One velocity-Verlet step; ``f`` may carry F(x) from the previous step."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    inv_m = 1.0 / ff.masses[:, None]
    if f is None:
        f = forces(ff, x)
    x_new = x + v * dt + 0.5 * f * inv_m * dt * dt
    f_new = forces(ff, x_new)
    v_new = v + 0.5 * (f + f_new) * inv_m * dt
    return x_new, v_new


@dataclass
class StochasticRescale:
    """Every ``interval`` steps, rescale velocities to a kinetic energy drawn
    from the canonical distribution at ``temperature``.  Velocity directions
    are untouched, so total momentum and angular momentum stay zero when
    they start at zero."""

    temperature: float
    interval: int = 10
    seed: int = 0
    n_dof: int | None = None

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def apply(self, ff, v, step):
        if step % self.interval:
            return v
        ke = kinetic_energy(ff, v)
        ndof = self.n_dof or max(1, 3 * ff.n_atoms - 3)
        target = self.temperature * self.rng.gamma(ndof / 2.0)
        if ke <= 0:
            return v
        return v * math.sqrt(target / ke)


def simulate(ff: ForceFieldParams, start: Conformation, dt: float, n_steps: int,
             boost: GamdParams | None = None, thermostat: StochasticRescale | None = None,
             stride: int = 1) -> Trajectory:
    """Integrate ``n_steps`` steps, recording every ``stride``-th frame.

    Recorded velocities are in length per recorded frame (v * dt * stride).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = start.positions.copy()
    v = start.velocities / (dt * stride)
    inv_m = 1.0 / ff.masses[:, None]
    f, u, du = boosted_forces(ff, x, boost)
    frames = [Conformation(x, v * dt * stride, start.atom_numbers)]
    energy, boosts, potentials = [kinetic_energy(ff, v) + u], [du], [u]
    for step in range(1, n_steps + 1):
        x = x + v * dt + 0.5 * f * inv_m * dt * dt
        f_new, u, du = boosted_forces(ff, x, boost)
        v = v + 0.5 * (f + f_new) * inv_m * dt
        f = f_new
        if thermostat is not None:
            v = thermostat.apply(ff, v, step)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise SimulationError(f"non-finite state at step {step}")
        if step % stride == 0:
            frames.append(Conformation(x, v * dt * stride, start.atom_numbers))
            energy.append(kinetic_energy(ff, v) + u)
            boosts.append(du)
            potentials.append(u)
    meta = {"units": UNITS, "integrator_dt": dt, "stride": stride, "n_steps": n_steps,
            "energy": energy, "potential": potentials, "boost": boosts,
            "thermostat": None if thermostat is None else
            {"temperature": thermostat.temperature, "interval": thermostat.interval,
             "seed": thermostat.seed}}
    return Trajectory(frames, dt * stride, meta)


# --- fixtures -----------------------------------------------------------------

def _conf(x, v, z):
    return Conformation(np.asarray(x, float), np.asarray(v, float), np.asarray(z))


def fixture_harmonic():
    ff = ForceFieldParams(masses=[1.0], external=[HarmonicTether(0, 1.0)])
    return ff, _conf([[1.0, 0, 0]], [[0, 0, 0]], [1]), 0.005


def fixture_harmonic3d():
    ff = ForceFieldParams(masses=[1.0], external=[HarmonicTether(0, 1.0)])
    return ff, _conf([[1.0, 0.5, -0.3]], [[0.0, 0.004, 0.002]], [1]), 0.01


def fixture_lj_trimer():
    ff = ForceFieldParams(masses=[1.0, 1.0, 1.0],
                          lj=[(0, 1, 1.0, 1.0), (0, 2, 1.0, 1.0), (1, 2, 1.0, 1.0)])
    h = math.sqrt(3) / 2
    x = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, h, 0.0]])
    x -= x.mean(axis=0)
    x[0, :2] *= 1.03  # slight distortion so the thermostat has a direction to scale
    x[1, 2] += 0.02
    return ff, _conf(x, np.zeros((3, 3)), [18, 18, 18]), 0.005


def fixture_butane():
    ff = ForceFieldParams(
        masses=[1.0, 1.0, 1.0, 1.0],
        bonds=[(0, 1, 100.0, 1.5), (1, 2, 100.0, 1.5), (2, 3, 100.0, 1.5)],
        angles=[(0, 1, 2, 20.0, 1.9), (1, 2, 3, 20.0, 1.9)],
        torsions=[(0, 1, 2, 3, [(2.0, 3, 0.0)])],
        lj=[(0, 3, 0.1, 3.0)],
        charges=[0.2, 0.0, 0.0, -0.2],
        exclusions={(0, 1), (1, 2), (2, 3), (0, 2), (1, 3)},
    )
    x = np.array([[1.2, 1.0, 0.1], [0.0, 0.2, 0.0], [0.1, -1.3, 0.0], [1.0, -2.1, 0.9]])
    return ff, _conf(x, np.zeros((4, 3)), [6, 6, 6, 6]), 0.005


def fixture_double_well():
    ff = ForceFieldParams(masses=[1.0], external=[DoubleWell(0, barrier=1.0, a=1.0)])
    return ff, _conf([[-1.05, 0, 0]], [[0.002, 0, 0]], [1]), 0.01


FIXTURES = {
    "harmonic": fixture_harmonic,
    "harmonic3d": fixture_harmonic3d,
    "lj_trimer": fixture_lj_trimer,
    "butane": fixture_butane,
    "double_well": fixture_double_well,
}


def load_fixture(name_or_path):
    """Built-in fixture by name, or a JSON fixture file.

    A fixture file holds ``atoms`` (symbols), ``masses``, ``positions``, optional
    ``velocities`` (length per step), ``dt`` and the force-field term lists
    (``bonds``, ``angles``, ``torsions``, ``lj``, ``charges``, ``dielectric``,
    ``exclusions``, ``external``).
    """
    if name_or_path in FIXTURES:
        return FIXTURES[name_or_path]()
    try:
        with open(name_or_path) as fh:
            spec = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"unknown fixture {name_or_path!r}: {exc}") from exc
    from .xyz import atomic_number

    known = {"atoms", "masses", "positions", "velocities", "dt", "bonds", "angles",
             "torsions", "lj", "charges", "dielectric", "exclusions", "external"}
    extra = set(spec) - known
    if extra:
        raise ValueError(f"unknown fixture keys: {sorted(extra)}")
    ext = []
    for e in spec.get("external", []):
        kind = e.pop("type")
        ext.append({"tether": HarmonicTether, "double_well": DoubleWell}[kind](**e))
    ff = ForceFieldParams(
        masses=spec["masses"],
        bonds=[tuple(b) for b in spec.get("bonds", [])],
        angles=[tuple(a) for a in spec.get("angles", [])],
        torsions=[(t[0], t[1], t[2], t[3], [tuple(s) for s in t[4]])
                  for t in spec.get("torsions", [])],
        lj=[tuple(p) for p in spec.get("lj", [])],
        charges=spec.get("charges"),
        dielectric=spec.get("dielectric", 1.0),
        exclusions={tuple(p) for p in spec.get("exclusions", [])},
        external=ext,
    )
    x = np.asarray(spec["positions"], float)
    v = np.asarray(spec.get("velocities", np.zeros_like(x)), float)
    z = [atomic_number(s) for s in spec["atoms"]]
    return ff, _conf(x, v, z), float(spec.get("dt", 0.005))
