"""Equivariant geometric Transformer used as the position score network.

Each layer attends over ordered atom pairs.  Queries and keys are built per
pair from node features concatenated with SBF pair features; the attention
weights then mix relative position vectors into a velocity update, move the
positions by ``v / L``, and mix value vectors into the new node features.
Pair features depend only on distances and angles, so attention is invariant
and position/velocity updates are E(3)-equivariant.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .basis import BasisSpec, sbf_tensor
from .geometry import EPS, Conformation, GeometryError, pair_angles

DTYPE = torch.float64
CHECKPOINT_VERSION = "scoremd-checkpoint/1"


class CheckpointError(RuntimeError):
    pass


@dataclass
class PairFeatures:
    sbf1: torch.Tensor  # (B, N, N, K)
    sbf2: torch.Tensor  # (B, N, N, K)
    mask: torch.Tensor  # (B, N, N) bool, True where j attends-able from i


def pair_features(x, v, basis: BasisSpec) -> PairFeatures:
    """SBF tensors and the cutoff mask for a batch of frames (B, N, 3)."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if x.ndim == 2:
        x, v = x[None], v[None]
    n = x.shape[1]
    dist, phi_a, phi_b, theta = pair_angles(x, v)
    off = ~np.eye(n, dtype=bool)
    if np.any((dist < EPS) & off):
        raise GeometryError("coincident atoms in frame")
    e1 = sbf_tensor(basis, dist, phi_a, theta).reshape(dist.shape + (-1,))
    e2 = sbf_tensor(basis, dist, phi_b, theta).reshape(dist.shape + (-1,))
    mask = off & (dist <= basis.cutoff)
    return PairFeatures(
        torch.as_tensor(e1, dtype=DTYPE),
        torch.as_tensor(e2, dtype=DTYPE),
        torch.as_tensor(mask),
    )


def masked_softmax(a: torch.Tensor, mask: torch.Tensor, dim: int) -> torch.Tensor:
    """Softmax over ``dim`` restricted to ``mask``; fully masked rows give 0."""
    neg = torch.finfo(a.dtype).min
    amax = torch.where(mask, a, torch.full_like(a, neg)).amax(dim=dim, keepdim=True)
    amax = torch.where(amax == neg, torch.zeros_like(amax), amax).detach()
    e = torch.exp(torch.where(mask, a - amax, torch.zeros_like(a))) * mask
    denom = e.sum(dim=dim, keepdim=True)
    return e / torch.where(denom > 0, denom, torch.ones_like(denom))


def _mlp(d_in, hidden, d_out, dropout=0.0):
    layers = [nn.Linear(d_in, hidden, dtype=DTYPE), nn.ReLU()]
    if dropout:
        layers.append(nn.Dropout(dropout))
    layers.append(nn.Linear(hidden, d_out, dtype=DTYPE))
    return nn.Sequential(*layers)


class EglParams(nn.Module):
    """Parameters of one equivariant geometric layer."""

    def __init__(self, feature_dim, att_dim, sbf_dim, heads, hidden, dropout=0.0):
        super().__init__()
        if att_dim % heads:
            raise ValueError("att_dim must be divisible by heads")
        self.heads = heads
        self.att_dim = att_dim
        self.f_q = nn.Linear(feature_dim, att_dim, dtype=DTYPE)
        self.f_k = nn.Linear(feature_dim, att_dim, dtype=DTYPE)
        self.f_m = nn.Linear(feature_dim, att_dim, dtype=DTYPE)
        self.w_sbf1 = nn.Linear(att_dim + sbf_dim, att_dim, bias=False, dtype=DTYPE)
        self.w_sbf2 = nn.Linear(att_dim + sbf_dim, att_dim, bias=False, dtype=DTYPE)
        self.f_v = _mlp(feature_dim, hidden, 1)
        self.f_h = _mlp(att_dim, hidden, feature_dim, dropout)
        self.attn_dropout = nn.Dropout(dropout)


def egl_forward(params: EglParams, x, v, h, basis: BasisSpec, layer_count: int,
                pairs: PairFeatures | None = None, return_attention: bool = False):
    """One layer update (x, v, h) -> (x', v', h') on batched tensors (B, N, .).

    ``pairs`` defaults to the SBF features of the given (x, v).
    """
    if pairs is None:
        pairs = pair_features(x.detach().numpy(), v.detach().numpy(), basis)
    b, n, _ = x.shape
    hd = params.att_dim // params.heads
    fq = params.f_q(h)
    fk = params.f_k(h)
    q = params.w_sbf1(torch.cat([fq[:, :, None, :].expand(b, n, n, -1), pairs.sbf1], dim=-1))
    k = params.w_sbf2(torch.cat([fk[:, None, :, :].expand(b, n, n, -1), pairs.sbf2], dim=-1))
    a = (q * k).view(b, n, n, params.heads, hd).sum(-1) / math.sqrt(params.att_dim)
    phi = masked_softmax(a, pairs.mask[..., None], dim=2)
    phi = params.attn_dropout(phi)

    w = phi.mean(dim=-1)  # head-averaged weights for the vector update
    agg_x = x * w.sum(dim=2, keepdim=True) - torch.einsum("bij,bjc->bic", w, x)
    v_new = params.f_v(h) * v + agg_x
    x_new = x + v_new / layer_count

    m = params.f_m(h).view(b, n, params.heads, hd)
    agg_h = torch.einsum("bijh,bjhd->bihd", phi, m).reshape(b, n, params.att_dim)
    h_new = params.f_h(agg_h)
    if return_attention:
        return x_new, v_new, h_new, a
    return x_new, v_new, h_new


def fourier_features(u: torch.Tensor, n_freq: int, base: float) -> torch.Tensor:
    freqs = base * (2.0 ** torch.arange(n_freq, dtype=DTYPE))
    ang = u[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class EgtModel(nn.Module):
    """Stack of L layers plus node-feature and diffusion-time embeddings."""

    def __init__(self, feature_dim=128, att_dim=None, n_layers=6, heads=8, hidden=2048,
                 dropout=0.1, basis: BasisSpec | None = None, time_freqs=8, z_scale=10.0):
        super().__init__()
        att_dim = att_dim or feature_dim
        self.basis = basis or BasisSpec()
        self.config = {
            "feature_dim": feature_dim, "att_dim": att_dim, "n_layers": n_layers,
            "heads": heads, "hidden": hidden, "dropout": dropout,
            "basis": self.basis.to_dict(), "time_freqs": time_freqs, "z_scale": z_scale,
        }
        self.feature_dim = feature_dim
        self.n_layers = n_layers
        self.time_freqs = time_freqs
        self.z_scale = z_scale
        self.node_embed = nn.Linear(2, feature_dim, dtype=DTYPE)
        self.time_embed = nn.Linear(4 * time_freqs, feature_dim, dtype=DTYPE)
        self.layers = nn.ModuleList(
            EglParams(feature_dim, att_dim, self.basis.size, heads, hidden, dropout)
            for _ in range(n_layers)
        )

    def embed_time(self, s, noise_std) -> torch.Tensor:
        """Invariant embedding of the diffusion time and the noise scale, (B, F)."""
        s = torch.as_tensor(s, dtype=DTYPE).reshape(-1)
        ls = torch.log(torch.as_tensor(noise_std, dtype=DTYPE).reshape(-1))
        s, ls = torch.broadcast_tensors(s, ls)
        feats = torch.cat([fourier_features(s, self.time_freqs, math.pi),
                           fourier_features(ls, self.time_freqs, 0.125)], dim=-1)
        return self.time_embed(feats)

    def node_features(self, v, atom_numbers, s, noise_std) -> torch.Tensor:
        """h^(0) from [|v|, Z] plus the time embedding, (B, N, F)."""
        v = torch.as_tensor(v, dtype=DTYPE)
        z = torch.as_tensor(atom_numbers, dtype=DTYPE)
        if v.ndim == 2:
            v = v[None]
        z = z.expand(v.shape[:2])
        raw = torch.stack([torch.linalg.vector_norm(v, dim=-1), z / self.z_scale], dim=-1)
        return self.node_embed(raw) + self.embed_time(s, noise_std)[:, None, :]

    def displacement(self, x, v, atom_numbers, s, noise_std, pairs=None, trace=False):
        """x^(L) - x^(0) for a batch; pair features are taken from the input frame."""
        x = torch.as_tensor(x, dtype=DTYPE)
        v = torch.as_tensor(v, dtype=DTYPE)
        if x.ndim == 2:
            x, v = x[None], v[None]
        if pairs is None:
            pairs = pair_features(x.numpy(), v.numpy(), self.basis)
        h = self.node_features(v, atom_numbers, s, noise_std)
        x0 = x
        states = []
        for layer in self.layers:
            x, v, h = egl_forward(layer, x, v, h, self.basis, self.n_layers, pairs)
            states.append((x, v, h))
        disp = x - x0
        return (disp, states) if trace else disp

    def forward(self, x, v, atom_numbers, s, noise_std, pairs=None):
        """Score: the stack's displacement divided by the kernel std."""
        disp = self.displacement(x, v, atom_numbers, s, noise_std, pairs)
        std = torch.as_tensor(noise_std, dtype=DTYPE).reshape(-1, 1, 1)
        return disp / std


def build_node_features(model: EgtModel, conf: Conformation, s: float, noise_std: float = 1.0):
    with torch.no_grad():
        h = model.node_features(conf.velocities, conf.atom_numbers, s, noise_std)
    return h[0].numpy()


def egt_score(model: EgtModel, conf: Conformation, s: float, noise_std: float) -> np.ndarray:
    """N x 3 score for one conformation (evaluation mode, no gradients)."""
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(conf.positions, conf.velocities, conf.atom_numbers, s, noise_std)
    finally:
        model.train(was)
    return out[0].numpy()


def egt_param_gradients(model: EgtModel, loss_fn, batch) -> dict:
    """Exact d loss / d parameter for every named parameter (numpy arrays)."""
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model, batch)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {
        name: (np.zeros(p.shape) if g is None else g.detach().numpy().copy())
        for (name, p), g in zip(params.items(), grads)
    }


def save_checkpoint(model: EgtModel, path, seed: int | None = None, extra: dict | None = None):
    header = {"version": CHECKPOINT_VERSION, "config": model.config, "seed": seed,
              "extra": extra or {}}
    arrays = {name: p.detach().numpy() for name, p in model.state_dict().items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def read_checkpoint_header(path) -> dict:
    return _load_npz(path)[1]


def _load_npz(path):
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if "__header__" not in arrays:
        raise CheckpointError(f"{path}: missing header")
    try:
        header = json.loads(arrays.pop("__header__").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: incompatible checkpoint version {header.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION!r}"
        )
    return arrays, header


def model_from_config(cfg: dict) -> EgtModel:
    cfg = dict(cfg)
    cfg["basis"] = BasisSpec(**cfg["basis"])
    return EgtModel(**cfg)


def load_checkpoint(path) -> tuple[EgtModel, dict]:
    arrays, header = _load_npz(path)
    model = model_from_config(header["config"])
    state = model.state_dict()
    if set(state) != set(arrays):
        raise CheckpointError(f"{path}: parameter names do not match the model config")
    for name, t in state.items():
        if tuple(t.shape) != arrays[name].shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
    model.load_state_dict({k: torch.from_numpy(np.array(a)) for k, a in arrays.items()})
    return model, header
