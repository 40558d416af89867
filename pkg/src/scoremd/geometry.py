"""Conformations, trajectories, pair angles and trajectory error metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

EPS = 1e-10


class GeometryError(ValueError):
    """Raised for degenerate geometry (coincident atoms and the like)."""


@dataclass(frozen=True)
class Conformation:
    positions: np.ndarray
    velocities: np.ndarray
    atom_numbers: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        vel = np.asarray(self.velocities, dtype=float)
        z = np.asarray(self.atom_numbers, dtype=int)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError(f"positions must be N x 3 with N >= 1, got {pos.shape}")
        if vel.shape != pos.shape:
            raise ValueError(f"velocities shape {vel.shape} != positions shape {pos.shape}")
        if z.shape != (pos.shape[0],):
            raise ValueError("atom_numbers must have one entry per atom")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise ValueError("non-finite positions or velocities")
        feats = self.features
        if feats is None:
            feats = invariant_features(vel, z)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "velocities", vel)
        object.__setattr__(self, "atom_numbers", z)
        object.__setattr__(self, "features", np.asarray(feats, dtype=float))

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]

    def with_positions(self, positions, velocities) -> "Conformation":
        return Conformation(positions, velocities, self.atom_numbers)

    def transformed(self, rotation, translation=None) -> "Conformation":
        """Rigid transform: x -> x Q^T + o, v -> v Q^T."""
        q = np.asarray(rotation, dtype=float)
        o = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)
        return Conformation(self.positions @ q.T + o, self.velocities @ q.T, self.atom_numbers)


def invariant_features(velocities, atom_numbers) -> np.ndarray:
    """Per-atom [|v|, Z]; unchanged by any rigid motion of the frame."""
    speed = np.linalg.norm(np.asarray(velocities, dtype=float), axis=-1)
    return np.stack([speed, np.asarray(atom_numbers, dtype=float)], axis=-1)


@dataclass
class Trajectory:
    frames: list
    dt: float
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("a trajectory needs at least one frame")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        z0 = self.frames[0].atom_numbers
        for i, fr in enumerate(self.frames):
            if fr.n_atoms != len(z0) or not np.array_equal(fr.atom_numbers, z0):
                raise ValueError(f"frame {i} has a different atom roster")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def n_atoms(self) -> int:
        return self.frames[0].n_atoms

    @property
    def atom_numbers(self) -> np.ndarray:
        return self.frames[0].atom_numbers

    def positions(self) -> np.ndarray:
        """Stacked positions, shape (T, N, 3)."""
        return np.stack([f.positions for f in self.frames])

    def velocities(self) -> np.ndarray:
        return np.stack([f.velocities for f in self.frames])

    @classmethod
    def from_positions(cls, positions, atom_numbers, dt, meta=None) -> "Trajectory":
        """Build frames from a (T, N, 3) stack; velocities are frame differences."""
        xs = np.asarray(positions, dtype=float)
        frames = []
        for t in range(len(xs)):
            v = np.zeros_like(xs[t]) if t == 0 else velocity_from_frames(xs[t], xs[t - 1])
            frames.append(Conformation(xs[t], v, atom_numbers))
        return cls(frames, dt, dict(meta or {}))


@dataclass(frozen=True)
class PairGeometry:
    distance: float
    phi_a: float
    phi_b: float
    theta: float
    rel: np.ndarray


def relative_position(conf: Conformation, i: int, j: int) -> np.ndarray:
    n = conf.n_atoms
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"atom index out of range for N={n}: ({i}, {j})")
    return conf.positions[i] - conf.positions[j]


def _angle(a, b, na, nb):
    """Angle between vectors with precomputed norms; 0 where either is ~0."""
    ok = (na > EPS) & (nb > EPS)
    denom = np.where(ok, na * nb, 1.0)
    cos = np.clip(np.sum(a * b, axis=-1) / denom, -1.0, 1.0)
    return np.where(ok, np.arccos(cos), 0.0)


def pair_angles(x, v):
    """Distances and the three velocity/plane angles for every ordered pair.

    ``x`` and ``v`` have shape (..., N, 3).  Entry [..., a, b] describes the
    pair (a, b): ``phi_a`` is the angle between v_a and x_b - x_a, ``phi_b``
    the angle between v_b and x_a - x_b, and ``theta`` the angle between the
    planes spanned by (v_a, x_ab) and (v_b, x_ab).  Diagonal entries are 0.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    rel = x[..., :, None, :] - x[..., None, :, :]  # x_a - x_b
    dist = np.linalg.norm(rel, axis=-1)
    va = np.broadcast_to(v[..., :, None, :], rel.shape)
    vb = np.broadcast_to(v[..., None, :, :], rel.shape)
    speed = np.linalg.norm(v, axis=-1)
    sa = np.broadcast_to(speed[..., :, None], dist.shape)
    sb = np.broadcast_to(speed[..., None, :], dist.shape)
    phi_a = _angle(va, -rel, sa, dist)
    phi_b = _angle(vb, rel, sb, dist)
    n_a = np.cross(va, rel)
    n_b = np.cross(vb, rel)
    theta = _angle(n_a, n_b, np.linalg.norm(n_a, axis=-1), np.linalg.norm(n_b, axis=-1))
    return dist, phi_a, phi_b, theta


def pair_geometry(conf: Conformation, a: int, b: int) -> PairGeometry:
    if a == b:
        raise GeometryError("pair geometry needs two distinct atoms")
    rel = relative_position(conf, a, b)
    d = float(np.linalg.norm(rel))
    if d < EPS:
        raise GeometryError(f"atoms {a} and {b} coincide")
    x = conf.positions[[a, b]]
    v = conf.velocities[[a, b]]
    _, phi_a, phi_b, theta = pair_angles(x, v)
    return PairGeometry(d, float(phi_a[0, 1]), float(phi_b[0, 1]), float(theta[0, 1]), rel)


def velocity_from_frames(x_t, x_prev) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=float)
    x_prev = np.asarray(x_prev, dtype=float)
    if x_t.shape != x_prev.shape:
        raise ValueError(f"shape mismatch: {x_t.shape} vs {x_prev.shape}")
    return x_t - x_prev


def _check_window(generated: Trajectory, reference: Trajectory, t1: int, tn: int):
    if generated.n_atoms != reference.n_atoms:
        raise ValueError("trajectories have different atom counts")
    if tn < t1 or t1 < 0:
        raise ValueError(f"bad frame window [{t1}, {tn}]")
    if tn >= len(generated) or tn >= len(reference):
        raise ValueError(f"frame window [{t1}, {tn}] exceeds trajectory length")


def armse(generated: Trajectory, reference: Trajectory, t1: int, tn: int) -> float:
    """Accumulative RMSE over frames t1..tn (inclusive), no alignment."""
    _check_window(generated, reference, t1, tn)
    gx = generated.positions()[t1 : tn + 1]
    rx = reference.positions()[t1 : tn + 1]
    per_frame = np.sum((gx - rx) ** 2, axis=(1, 2))
    return float(np.sqrt(per_frame.mean()))


def kabsch(mobile, target):
    """Rotation R and translation o minimising ||mobile R^T + o - target||_F."""
    p = np.asarray(mobile, dtype=float)
    q = np.asarray(target, dtype=float)
    pc, qc = p.mean(axis=0), q.mean(axis=0)
    h = (p - pc).T @ (q - qc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ u.T
    return r, qc - pc @ r.T


def kabsch_armse(generated: Trajectory, reference: Trajectory, t1: int, tn: int) -> float:
    """ARMSE after optimally superposing each generated frame on its reference."""
    _check_window(generated, reference, t1, tn)
    total = 0.0
    for i in range(t1, tn + 1):
        g = generated[i].positions
        r = reference[i].positions
        rot, o = kabsch(g, r)
        total += np.sum((g @ rot.T + o - r) ** 2)
    return float(np.sqrt(total / (tn - t1 + 1)))


def per_frame_error(generated: Trajectory, reference: Trajectory, t1: int, tn: int) -> np.ndarray:
    _check_window(generated, reference, t1, tn)
    gx = generated.positions()[t1 : tn + 1]
    rx = reference.positions()[t1 : tn + 1]
    return np.sqrt(np.sum((gx - rx) ** 2, axis=(1, 2)))


def random_rotation(rng: np.random.Generator, proper: bool = True) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if proper and np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
