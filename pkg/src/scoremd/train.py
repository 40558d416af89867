"""Frame-pair datasets, the S2L and O2O splits, and the DSM training loop."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .egt import EgtModel, load_checkpoint, save_checkpoint
from .geometry import Trajectory, armse
from .sde import DiffusionConfig, dsm_loss


class TrainingError(FloatingPointError):
    pass


@dataclass
class FramePairDataset:
    """(conf_t, conf_t1, a_sq) triples; ``a_sq`` is None before frame 2."""

    pairs: list = field(default_factory=list)
    source: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    @classmethod
    def from_trajectory(cls, traj: Trajectory, start: int = 0, stop: int | None = None,
                        name: str = "traj") -> "FramePairDataset":
        """Pairs (t, t+1) for t in [start, stop)."""
        stop = len(traj) - 1 if stop is None else stop
        if not 0 <= start <= stop <= len(traj) - 1:
            raise ValueError(f"pair range [{start}, {stop}) outside trajectory of {len(traj)} frames")
        pairs = []
        for t in range(start, stop):
            a_sq = None
            if t >= 2:
                dv = traj[t].velocities - traj[t - 1].velocities
                a_sq = float(np.sum(dv * dv))
            pairs.append((traj[t], traj[t + 1], a_sq))
        return cls(pairs, [f"{name}:{t}" for t in range(start, stop)])

    def extend(self, other: "FramePairDataset") -> "FramePairDataset":
        return FramePairDataset(self.pairs + other.pairs, self.source + other.source)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-10
    epochs: int = 200
    batch: int = 200
    eval_every: int = 5
    seed: int = 1
    lr_floor: float = 1e-7
    plateau_patience: int = 5

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.lr_floor < 0:
            raise ValueError("learning rates and weight decay must be non-negative")
        if min(self.epochs, self.batch, self.eval_every, self.plateau_patience) < 1:
            raise ValueError("epochs, batch, eval_every and plateau_patience must be >= 1")


def s2l_split(traj: Trajectory, n_train: int, n_holdout: int, name: str = "traj"):
    """First ``n_train`` pairs train; the next ``n_holdout`` split evenly into val and test."""
    if n_holdout % 2:
        raise ValueError("n_holdout must be even to split into equal halves")
    if n_train < 1 or n_holdout < 0:
        raise ValueError("need n_train >= 1 and n_holdout >= 0")
    if n_train + n_holdout > len(traj) - 1:
        raise ValueError(
            f"{len(traj)} frames give {len(traj) - 1} pairs, need {n_train + n_holdout}"
        )
    half = n_holdout // 2
    train = FramePairDataset.from_trajectory(traj, 0, n_train, name)
    val = FramePairDataset.from_trajectory(traj, n_train, n_train + half, name)
    test = FramePairDataset.from_trajectory(traj, n_train + half, n_train + n_holdout, name)
    return train, val, test


def copy_start_armse(traj: Trajectory) -> float:
    """ARMSE of predicting frame 0 for every later frame (0 for one frame)."""
    if len(traj) < 2:
        return 0.0
    static = Trajectory([traj[0]] * len(traj), traj.dt)
    return armse(static, traj, 1, len(traj) - 1)


def o2o_split(trajs, k: int, ids=None):
    """Hold out the ``k`` molecules hardest for the copy-start baseline.

    Returns ``(train_ids, val_ids)``; ties go to the earlier identifier.
    """
    ids = list(range(len(trajs))) if ids is None else list(ids)
    if len(ids) != len(trajs):
        raise ValueError("ids and trajectories differ in length")
    if not 0 <= k < len(trajs):
        raise ValueError(f"need 0 <= k < {len(trajs)}")
    scores = [copy_start_armse(t) for t in trajs]
    order = sorted(range(len(trajs)), key=lambda i: (-scores[i], ids[i]))
    val = sorted(order[:k], key=lambda i: ids[i])
    train = sorted(order[k:], key=lambda i: ids[i])
    return [ids[i] for i in train], [ids[i] for i in val]


class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` epochs without a new
    best value, then start counting again; never go below ``floor``."""

    def __init__(self, lr: float, patience: int = 5, factor: float = 0.1,
                 floor: float = 1e-7, threshold: float = 1e-4):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.floor = floor
        self.threshold = threshold
        self.best = math.inf
        self.bad = 0

    def step(self, value: float) -> float:
        if value < self.best * (1.0 - self.threshold):
            self.best = value
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.bad = 0
        return self.lr


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def evaluate_loss(model: EgtModel, data: FramePairDataset, diffusion: DiffusionConfig,
                  seed: int, batch: int = 200, velocity_reference: str = "previous") -> float:
    """Mean DSM loss with dropout off and a fixed noise stream."""
    rng = np.random.default_rng(seed)
    was = model.training
    model.eval()
    total = 0.0
    try:
        with torch.no_grad():
            for i in range(0, len(data), batch):
                chunk = data.pairs[i:i + batch]
                total += float(dsm_loss(model, chunk, diffusion, rng, velocity_reference)) * len(chunk)
    finally:
        model.train(was)
    return total / len(data)


def train_loop(model: EgtModel, data: FramePairDataset, val: FramePairDataset,
               diffusion: DiffusionConfig, cfg: TrainConfig,
               velocity_reference: str = "previous", history_path=None, callback=None):
    """Train with AdamW on the DSM objective; returns ``(model, history)``.

    ``callback(epoch, model)`` runs every ``cfg.eval_every`` epochs and may
    return a dict that is merged into that epoch's history record.
    """
    if len(data) == 0 or len(val) == 0:
        raise ValueError("training and validation sets must be non-empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    val_seed = int(np.random.default_rng(cfg.seed + 1).integers(2**31))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(cfg.lr, cfg.plateau_patience, floor=cfg.lr_floor)
    history = []
    if history_path is not None:
        open(history_path, "w").close()
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for step, idx in enumerate(_batches(len(data), cfg.batch, rng)):
            batch = [data.pairs[i] for i in idx]
            opt.zero_grad(set_to_none=True)
            loss = dsm_loss(model, batch, diffusion, rng, velocity_reference)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val_loss = evaluate_loss(model, val, diffusion, val_seed, cfg.batch, velocity_reference)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                  "val_loss": val_loss, "lr": sched.lr}
        new_lr = sched.step(val_loss)
        for group in opt.param_groups:
            group["lr"] = new_lr
        if callback is not None and epoch % cfg.eval_every == 0:
            record.update(callback(epoch, model) or {})
        history.append(record)
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
    model.eval()
    return model, history


def checkpoint_roundtrip(model: EgtModel, path, seed: int | None = None) -> EgtModel:
    save_checkpoint(model, path, seed)
    loaded, _ = load_checkpoint(path)
    return loaded


def read_history(path) -> list:
    with open(os.fspath(path)) as fh:
        return [json.loads(line) for line in fh if line.strip()]
