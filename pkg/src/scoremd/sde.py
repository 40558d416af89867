"""Acceleration-conditioned variance-exploding diffusion.

The forward process is ``dx = sigma**s dw`` for s in [0, 1], where the base
``sigma`` is picked per frame pair from the squared acceleration of the
preceding frames.  Its transition kernel is Gaussian with variance
``(sigma**(2s) - 1) / (2 ln sigma)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import Trajectory


class SingularKernelError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_s: float = 0.1
    eta_sigma: float = 1.0
    a_bar: float = 1.0
    sigma_min_frac: float = 1e-3

    def __post_init__(self):
        if not (self.sigma_s > 0 and self.eta_sigma > 0 and self.a_bar > 0):
            raise ValueError("sigma_s, eta_sigma and a_bar must be positive")
        if not 0 < self.sigma_min_frac <= 1:
            raise ValueError("sigma_min_frac must lie in (0, 1]")


@dataclass(frozen=True)
class DiffusionConfig:
    schedule: NoiseSchedule = NoiseSchedule()
    s_min: float = 0.1
    s_max: float = 1.0

    def __post_init__(self):
        if not 0 < self.s_min < self.s_max <= 1:
            raise ValueError("need 0 < s_min < s_max <= 1")


def acceleration_sq(traj: Trajectory, t: int) -> float:
    """||v(t) - v(t-1)||_F^2, the squared acceleration entering frame t+1."""
    if t < 2:
        raise ValueError(f"acceleration needs two preceding frames, got t={t}")
    if t >= len(traj):
        raise IndexError(f"frame {t} out of range")
    dv = traj[t].velocities - traj[t - 1].velocities
    return float(np.sum(dv * dv))


def base_sigma(schedule: NoiseSchedule, a_sq: float | None) -> float:
    """Base noise for a frame; ``None`` (no acceleration yet) gives sigma_s."""
    if a_sq is None or a_sq >= schedule.a_bar:
        return schedule.sigma_s
    raw = schedule.sigma_s * schedule.eta_sigma * (a_sq - schedule.a_bar) ** 2
    return max(raw, schedule.sigma_s * schedule.sigma_min_frac)


def kernel_variance(sigma: float, s):
    """Variance of x(s) | x(0); the sigma -> 1 limit is s itself."""
    s = np.asarray(s, dtype=float)
    log_sig = math.log(sigma)
    if abs(log_sig) < 1e-12:
        out = s.copy()
    else:
        out = np.expm1(2.0 * s * log_sig) / (2.0 * log_sig)
    return float(out) if out.ndim == 0 else out


def kernel_std(sigma: float, s):
    return np.sqrt(kernel_variance(sigma, s))


def diffusion_coeff(sigma: float, s) -> float:
    """g(s) = sigma**s."""
    return sigma ** np.asarray(s, dtype=float)


def perturb(x0, sigma: float, s: float, rng: np.random.Generator):
    x0 = np.asarray(x0, dtype=float)
    z = rng.standard_normal(x0.shape)
    return x0 + math.sqrt(kernel_variance(sigma, s)) * z, z


def kernel_score(x_s, x0, sigma: float, s: float) -> np.ndarray:
    var = kernel_variance(sigma, s)
    if var <= 0:
        raise SingularKernelError("kernel score undefined at s = 0")
    return -(np.asarray(x_s, dtype=float) - np.asarray(x0, dtype=float)) / var


def lambda_weight(sigma: float, s: float) -> float:
    """DSM weight, proportional to 1 / E||kernel score||^2 (the variance)."""
    if s <= 0:
        return 0.0
    return kernel_variance(sigma, s)


def simulate_forward(x0, sigma: float, s: float, n_steps: int, rng: np.random.Generator):
    """Euler-Maruyama paths of dx = sigma**u dw from u = 0 to s."""
    x = np.array(x0, dtype=float, copy=True)
    du = s / n_steps
    for k in range(n_steps):
        g = sigma ** (k * du)
        x += g * math.sqrt(du) * rng.standard_normal(x.shape)
    return x


VELOCITY_REFERENCES = ("previous", "ballistic")


def disturbed_velocities(x_tilde, x_prev, v_prev, reference: str = "previous"):
    """Velocities given to the score network for a candidate next frame.

    ``previous`` uses x~ - x(t).  ``ballistic`` uses x~ - (x(t) + v(t)), which
    also exposes the conditioning frame's velocity to the network.
    """
    if reference == "previous":
        return x_tilde - x_prev
    if reference == "ballistic":
        return x_tilde - x_prev - v_prev
    raise ValueError(f"unknown velocity reference {reference!r}")


def _stack(batch):
    xt = np.stack([p[0].positions for p in batch])
    vt = np.stack([p[0].velocities for p in batch])
    x1 = np.stack([p[1].positions for p in batch])
    z = np.stack([p[0].atom_numbers for p in batch])
    return xt, vt, x1, z


def dsm_loss(model, batch, config: DiffusionConfig, rng: np.random.Generator,
             velocity_reference: str = "previous"):
    """Weighted denoising score-matching loss over a batch of frame pairs.

    ``batch`` holds ``(conf_t, conf_t1, a_sq)`` triples sharing one atom count;
    ``a_sq`` may be None when no acceleration is available.  Returns a scalar
    torch tensor (mean over the batch of lambda * ||score - target||^2).
    """
    if not batch:
        raise ValueError("empty batch")
    xt, vt, x1, znum = _stack(batch)
    n = len(batch)
    sig = np.array([base_sigma(config.schedule, p[2]) for p in batch])
    s = rng.uniform(config.s_min, config.s_max, size=n)
    var = np.array([kernel_variance(g, si) for g, si in zip(sig, s)])
    std = np.sqrt(var)
    noise = rng.standard_normal(x1.shape)
    x_tilde = x1 + std[:, None, None] * noise
    v_in = disturbed_velocities(x_tilde, xt, vt, velocity_reference)
    score = model(x_tilde, v_in, znum, s, std)
    target = torch.as_tensor(-noise / std[:, None, None], dtype=score.dtype)
    lam = torch.as_tensor(var, dtype=score.dtype)
    per_item = lam * ((score - target) ** 2).sum(dim=(1, 2))
    return per_item.mean()
