"""Extended-XYZ trajectory files.

Each frame is ``N``, a comment line ``t=<frame> dt=<fs>``, then ``N`` lines of
``SYMBOL x y z [vx vy vz]``.  Without velocity columns the velocities are
rebuilt from frame differences (zero on the first frame).
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .geometry import Conformation, Trajectory, velocity_from_frames

SYMBOLS = [
    "X", "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
]
_NUMBER = {s: i for i, s in enumerate(SYMBOLS)}


class TrajectoryFormatError(ValueError):
    pass


def symbol(z: int) -> str:
    return SYMBOLS[z] if 0 <= z < len(SYMBOLS) else f"Z{z}"


def atomic_number(sym: str) -> int:
    if sym in _NUMBER:
        return _NUMBER[sym]
    if sym.startswith("Z") and sym[1:].isdigit():
        return int(sym[1:])
    raise TrajectoryFormatError(f"unknown element symbol {sym!r}")


def format_trajectory(traj: Trajectory, with_velocities: bool = True) -> str:
    lines = []
    for t, fr in enumerate(traj.frames):
        lines.append(str(fr.n_atoms))
        lines.append(f"t={t} dt={traj.dt!r}")
        for z, x, v in zip(fr.atom_numbers, fr.positions, fr.velocities):
            cols = [symbol(int(z))] + [repr(float(c)) for c in x]
            if with_velocities:
                cols += [repr(float(c)) for c in v]
            lines.append(" ".join(cols))
    return "\n".join(lines) + "\n"


def atomic_write(path, text: str):
    """Write via a temp file in the same directory and rename into place."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_xyz(path, traj: Trajectory, with_velocities: bool = True):
    atomic_write(path, format_trajectory(traj, with_velocities))


def parse_xyz(text: str, dt: float | None = None) -> Trajectory:
    lines = text.splitlines()
    i = 0
    symbols_ref = None
    xs, vs = [], []
    has_vel = None
    file_dt = None
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            n = int(lines[i].split()[0])
        except ValueError:
            raise TrajectoryFormatError(f"line {i + 1}: expected atom count") from None
        if i + 1 >= len(lines) or i + 2 + n > len(lines):
            raise TrajectoryFormatError(f"truncated frame starting at line {i + 1}")
        for tok in lines[i + 1].split():
            if tok.startswith("dt="):
                file_dt = float(tok[3:])
        syms, x, v = [], [], []
        for k in range(n):
            parts = lines[i + 2 + k].split()
            if len(parts) not in (4, 7):
                raise TrajectoryFormatError(f"line {i + 3 + k}: expected 4 or 7 columns")
            frame_vel = len(parts) == 7
            if has_vel is None:
                has_vel = frame_vel
            elif has_vel != frame_vel:
                raise TrajectoryFormatError("mixed frames with and without velocities")
            syms.append(parts[0])
            x.append([float(c) for c in parts[1:4]])
            if frame_vel:
                v.append([float(c) for c in parts[4:7]])
        if symbols_ref is None:
            symbols_ref = syms
        elif syms != symbols_ref:
            raise TrajectoryFormatError("atom roster changes between frames")
        xs.append(np.array(x))
        vs.append(np.array(v) if v else None)
        i += 2 + n
    if not xs:
        raise TrajectoryFormatError("no frames found")
    z = np.array([atomic_number(s) for s in symbols_ref])
    step = dt if dt is not None else (file_dt if file_dt is not None else 1.0)
    frames = []
    for t, x in enumerate(xs):
        if has_vel:
            v = vs[t]
        else:
            v = np.zeros_like(x) if t == 0 else velocity_from_frames(x, xs[t - 1])
        frames.append(Conformation(x, v, z))
    return Trajectory(frames, step, {"velocities_from_file": bool(has_vel)})


def read_xyz(path, dt: float | None = None) -> Trajectory:
    with open(path) as fh:
        traj = parse_xyz(fh.read(), dt)
    traj.meta["source"] = os.fspath(path)
    return traj
