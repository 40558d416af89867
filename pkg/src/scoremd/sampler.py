"""Reverse-time generation of the next frame and trajectory rollout.

The sampler starts every frame from the previous one at s = 1 and integrates
back to s_min, either with Euler-Maruyama predictor plus Langevin corrector
steps or with the probability-flow ODE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.integrate import solve_ivp

from .geometry import Conformation, Trajectory
from .sde import DiffusionConfig, base_sigma, disturbed_velocities, kernel_std

MODES = ("pc", "ode")


class IntegrationError(RuntimeError):
    def __init__(self, message, s=None):
        super().__init__(message)
        self.s = s


class RolloutError(FloatingPointError):
    def __init__(self, message, frame=None):
        super().__init__(message)
        self.frame = frame


@dataclass(frozen=True)
class SamplerConfig:
    """``corrector_off_by_one`` keeps the N_C - 1 inner-loop bound of the
    printed algorithm; set it False to run N_C corrector steps."""

    n_predictor: int = 100
    n_corrector: int = 1
    snr: float = 0.16
    ode_abs_tol: float = 1e-5
    ode_rel_tol: float = 1e-5
    s_min: float = 0.1
    mode: str = "ode"
    corrector_off_by_one: bool = True

    def __post_init__(self):
        if self.n_predictor < 1 or self.n_corrector < 0:
            raise ValueError("need n_predictor >= 1 and n_corrector >= 0")
        if not (self.snr > 0 and self.ode_abs_tol > 0 and self.ode_rel_tol > 0):
            raise ValueError("snr and ODE tolerances must be positive")
        if not 0 < self.s_min < 1:
            raise ValueError("s_min must lie in (0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def corrector_steps(self) -> int:
        return max(self.n_corrector - 1, 0) if self.corrector_off_by_one else self.n_corrector


def time_grid(cfg: SamplerConfig) -> np.ndarray:
    """Uniform, strictly decreasing times from 1 to s_min (N_P + 1 points)."""
    return np.linspace(1.0, cfg.s_min, cfg.n_predictor + 1)


def em_predictor_step(x, score_fn, sigma: float, s_hi: float, s_lo: float, rng):
    ds = s_hi - s_lo
    g = sigma**s_hi
    z = rng.standard_normal(np.shape(x))
    return x + g * g * score_fn(x, s_hi) * ds + g * math.sqrt(ds) * z


def langevin_corrector_step(x, score_fn, s: float, snr: float, rng):
    g = score_fn(x, s)
    z = rng.standard_normal(np.shape(x))
    g_norm = np.linalg.norm(g)
    if g_norm == 0:
        return np.array(x, dtype=float, copy=True)
    delta = 2.0 * (snr * np.linalg.norm(z) / g_norm) ** 2
    return x + delta * g + math.sqrt(2.0 * delta) * z


def pc_sample(x_prior, score_fn, sigma: float, cfg: SamplerConfig, rng):
    x = np.array(x_prior, dtype=float, copy=True)
    grid = time_grid(cfg)
    for i in range(cfg.n_predictor):
        x = em_predictor_step(x, score_fn, sigma, grid[i], grid[i + 1], rng)
        for _ in range(cfg.corrector_steps):
            x = langevin_corrector_step(x, score_fn, grid[i + 1], cfg.snr, rng)
    return x


def ode_sample(x_prior, score_fn, sigma: float, cfg: SamplerConfig):
    """Probability-flow ODE dx/ds = -g(s)^2 score / 2 from s = 1 to s_min (RK45)."""
    x0 = np.array(x_prior, dtype=float)
    shape = x0.shape

    def rhs(s, y):
        return -0.5 * sigma ** (2.0 * s) * np.ravel(score_fn(y.reshape(shape), s))

    sol = solve_ivp(rhs, (1.0, cfg.s_min), x0.ravel(), method="RK45",
                    atol=cfg.ode_abs_tol, rtol=cfg.ode_rel_tol)
    if sol.status != 0:
        s_fail = float(sol.t[-1])
        raise IntegrationError(f"ODE integration failed at s={s_fail:.6g}: {sol.message}", s_fail)
    return sol.y[:, -1].reshape(shape)


def model_score_fn(model, x_prev, v_prev, atom_numbers, sigma: float,
                   velocity_reference: str = "previous"):
    """Wrap the network as score(x, s) for a candidate next frame."""
    x_prev = np.asarray(x_prev, dtype=float)
    v_prev = np.asarray(v_prev, dtype=float)

    def score(x, s):
        std = float(kernel_std(sigma, s))
        v_in = disturbed_velocities(x, x_prev, v_prev, velocity_reference)
        with torch.no_grad():
            out = model(x, v_in, atom_numbers, s, std)
        return out[0].numpy()

    return score


def rollout(model, start: Conformation, n_frames: int, diffusion: DiffusionConfig,
            cfg: SamplerConfig, rng=None, velocity_reference: str = "previous",
            dt: float = 1.0) -> Trajectory:
    """Generate ``n_frames`` frames after ``start``; the result includes ``start``."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if cfg.mode == "pc" and rng is None:
        raise ValueError("predictor-corrector sampling needs an rng")
    was = model.training
    model.eval()
    frames = [start]
    sigmas = []
    try:
        for k in range(1, n_frames + 1):
            cur = frames[-1]
            a_sq = None
            if len(frames) >= 2:
                dv = cur.velocities - frames[-2].velocities
                a_sq = float(np.sum(dv * dv))
            sigma = base_sigma(diffusion.schedule, a_sq)
            fn = model_score_fn(model, cur.positions, cur.velocities, cur.atom_numbers,
                                sigma, velocity_reference)
            if cfg.mode == "ode":
                x_new = ode_sample(cur.positions, fn, sigma, cfg)
            else:
                x_new = pc_sample(cur.positions, fn, sigma, cfg, rng)
            if not np.all(np.isfinite(x_new)):
                raise RolloutError(f"non-finite positions in generated frame {k}", k)
            frames.append(Conformation(x_new, x_new - cur.positions, cur.atom_numbers))
            sigmas.append(sigma)
    finally:
        model.train(was)
    meta = {"generated": True, "mode": cfg.mode, "sigma": sigmas,
            "velocity_reference": velocity_reference}
    return Trajectory(frames, dt, meta)
