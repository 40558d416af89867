"""Command-line entry point: ``scoremd simulate|train|generate|evaluate``.

Every command takes ``--config`` (YAML or JSON with the sections below),
``--seed`` and ``--out``; ``--set section.key=value`` overrides single keys
and wins over the file.  The fully resolved config is written next to the
outputs as ``config.yaml`` and can be passed back to reproduce the run.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.  The
thread count comes from ``SCOREMD_THREADS`` (default 1).
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import os
import sys

import numpy as np
import yaml

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
THREADS_ENV = "SCOREMD_THREADS"

DEFAULTS = {
    "seed": 0,
    "simulate": {"fixture": "harmonic", "n_steps": 1000, "dt": None, "stride": 1,
                 "temperature": None, "thermostat_interval": 10, "n_dof": None,
                 "boost": None},
    "data": {"trajectories": [], "n_train": None, "n_holdout": None},
    "model": {"feature_dim": 64, "n_layers": 4, "heads": 8, "hidden": 128, "dropout": 0.0,
              "time_freqs": 8, "n_deg": 2, "n_root": 2, "n_ord": 2, "cutoff": 1.6},
    "schedule": {"sigma_s": 1.0, "eta_sigma": 10.0, "a_bar": 10.0, "s_min": 0.1,
                 "velocity_reference": "previous"},
    "train": {"lr": 5e-4, "weight_decay": 1e-10, "epochs": 200, "batch": 200,
              "eval_every": 5, "lr_floor": 1e-7, "plateau_patience": 5},
    "sampler": {"mode": "ode", "n_predictor": 100, "n_corrector": 1, "snr": 0.16,
                "ode_abs_tol": 1e-5, "ode_rel_tol": 1e-5, "corrector_off_by_one": True},
    "generate": {"checkpoint": None, "start": None, "start_frame": -1, "n_frames": 200},
    "evaluate": {"generated": None, "reference": None, "t1": 1, "tn": None,
                 "kabsch": False},
}


class UsageError(Exception):
    pass


# --- config ----------------------------------------------------------------------

def merge_config(base: dict, update: dict, where: str = "") -> dict:
    """Recursively overlay ``update`` on ``base``, rejecting unknown keys."""
    out = copy.deepcopy(base)
    for key, val in (update or {}).items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise UsageError(f"config section {where}{key!r} must be a mapping")
            out[key] = merge_config(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    return data


def parse_override(item: str) -> dict:
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise UsageError(f"--set expects section.key=value, got {item!r}")
    val = yaml.safe_load(raw) if raw else None
    node: dict = {}
    cur = node
    parts = key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = val
    return node


def resolve_config(args) -> dict:
    cfg = merge_config(DEFAULTS, load_config(args.config))
    for item in args.set or []:
        cfg = merge_config(cfg, parse_override(item))
    flags = {}
    for section, key, attr in FLAG_MAP.get(args.command, []):
        val = getattr(args, attr, None)
        if val is not None:
            flags.setdefault(section, {})[key] = val
    if args.seed is not None:
        flags["seed"] = args.seed
    return merge_config(cfg, flags)


FLAG_MAP = {
    "simulate": [("simulate", "fixture", "fixture"), ("simulate", "n_steps", "n_steps")],
    "train": [("data", "trajectories", "data"), ("train", "epochs", "epochs")],
    "generate": [("generate", "checkpoint", "checkpoint"), ("generate", "start", "start"),
                 ("generate", "n_frames", "n_frames"), ("sampler", "mode", "mode")],
    "evaluate": [("evaluate", "generated", "generated"), ("evaluate", "reference", "reference"),
                 ("evaluate", "kabsch", "kabsch")],
}


def atomic_text(path, text: str):
    from .xyz import atomic_write

    atomic_write(path, text)


def write_resolved(out: str, cfg: dict):
    atomic_text(os.path.join(out, "config.yaml"), yaml.safe_dump(cfg, sort_keys=False))


def _schedule(cfg):
    from .sde import DiffusionConfig, NoiseSchedule

    sc = cfg["schedule"]
    return DiffusionConfig(NoiseSchedule(sc["sigma_s"], sc["eta_sigma"], sc["a_bar"]),
                           s_min=sc["s_min"])


def _read_traj(path):
    from .xyz import read_xyz

    try:
        return read_xyz(path)
    except OSError as exc:
        raise UsageError(f"cannot read trajectory {path}: {exc}") from exc


# --- commands ------------------------------------------------------------------------

def cmd_simulate(cfg: dict, out: str) -> dict:
    from .refmd import GamdParams, StochasticRescale, load_fixture, simulate
    from .xyz import write_xyz

    sim = cfg["simulate"]
    ff, start, dt = load_fixture(sim["fixture"])
    dt = sim["dt"] or dt
    thermostat = None
    if sim["temperature"] is not None:
        thermostat = StochasticRescale(sim["temperature"], sim["thermostat_interval"],
                                       seed=cfg["seed"], n_dof=sim["n_dof"])
    boost = GamdParams(**sim["boost"]) if sim["boost"] else None
    # start velocities are stored per recorded frame
    start = start.with_positions(start.positions, start.velocities * sim["stride"])
    traj = simulate(ff, start, dt, sim["n_steps"], boost=boost, thermostat=thermostat,
                    stride=sim["stride"])
    write_xyz(os.path.join(out, "trajectory.xyz"), traj)
    meta = dict(traj.meta, dt=traj.dt, seed=cfg["seed"], fixture=sim["fixture"])
    e = meta["energy"]
    meta["relative_energy_drift"] = abs(e[-1] - e[0]) / abs(e[0]) if e[0] else None
    atomic_text(os.path.join(out, "trajectory.meta.json"), json.dumps(meta, indent=1))
    return {"frames": len(traj), "relative_energy_drift": meta["relative_energy_drift"]}


def cmd_train(cfg: dict, out: str) -> dict:
    import torch

    from .basis import BasisSpec
    from .egt import EgtModel, save_checkpoint
    from .train import TrainConfig, s2l_split, train_loop

    paths = cfg["data"]["trajectories"]
    if isinstance(paths, str):
        paths = [paths]
    if not paths:
        raise UsageError("train needs at least one trajectory (data.trajectories or --data)")
    train = val = None
    for k, p in enumerate(paths):
        traj = _read_traj(p)
        n_pairs = len(traj) - 1
        n_hold = cfg["data"]["n_holdout"]
        if n_hold is None:
            n_hold = 2 * max(1, n_pairs // 10)
        n_train = cfg["data"]["n_train"] or n_pairs - n_hold
        tr, va, _ = s2l_split(traj, n_train, n_hold, name=f"{k}:{os.path.basename(p)}")
        train = tr if train is None else train.extend(tr)
        val = va if val is None else val.extend(va)
    m = cfg["model"]
    torch.manual_seed(cfg["seed"])
    model = EgtModel(feature_dim=m["feature_dim"], n_layers=m["n_layers"], heads=m["heads"],
                     hidden=m["hidden"], dropout=m["dropout"], time_freqs=m["time_freqs"],
                     basis=BasisSpec(m["n_deg"], m["n_root"], m["n_ord"], m["cutoff"]))
    tcfg = TrainConfig(seed=cfg["seed"], **cfg["train"])
    ref = cfg["schedule"]["velocity_reference"]
    hist_path = os.path.join(out, "history.jsonl")
    tmp = hist_path + ".partial"
    model, hist = train_loop(model, train, val, _schedule(cfg), tcfg, ref, history_path=tmp)
    os.replace(tmp, hist_path)
    save_checkpoint(model, os.path.join(out, "model.npz"), seed=cfg["seed"],
                    extra={"schedule": cfg["schedule"]})
    return {"epochs": len(hist), "train_pairs": len(train), "val_pairs": len(val),
            "final_val_loss": hist[-1]["val_loss"]}


def cmd_generate(cfg: dict, out: str) -> dict:
    from .egt import load_checkpoint
    from .sampler import SamplerConfig, rollout
    from .xyz import write_xyz

    g = cfg["generate"]
    if not g["checkpoint"] or not g["start"]:
        raise UsageError("generate needs generate.checkpoint and generate.start")
    model, header = load_checkpoint(g["checkpoint"])
    trained = header.get("extra", {}).get("schedule")
    if trained is not None and trained != cfg["schedule"]:
        raise UsageError(f"schedule {cfg['schedule']} differs from the one the checkpoint "
                         f"was trained with: {trained}")
    ref = _read_traj(g["start"])
    try:
        start = ref[g["start_frame"]]
    except IndexError:
        raise UsageError(f"start frame {g['start_frame']} outside {len(ref)} frames") from None
    scfg = SamplerConfig(s_min=cfg["schedule"]["s_min"], **cfg["sampler"])
    rng = np.random.default_rng(cfg["seed"])
    traj = rollout(model, start, g["n_frames"], _schedule(cfg), scfg, rng,
                   cfg["schedule"]["velocity_reference"], dt=ref.dt)
    write_xyz(os.path.join(out, "generated.xyz"), traj)
    return {"frames": len(traj) - 1}


def baselines(reference, t1: int, tn: int) -> dict:
    """Copy-previous (teacher forced) and copy-start ARMSE over ``t1..tn``."""
    from .geometry import Trajectory, armse

    prev = Trajectory([reference[max(i - 1, 0)] for i in range(len(reference))], reference.dt)
    start = Trajectory([reference[0]] * len(reference), reference.dt)
    return {"copy_previous": armse(prev, reference, t1, tn),
            "copy_start": armse(start, reference, t1, tn)}


def plot_errors(path, frames, series: dict):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, err in series.items():
        ax.plot(frames, err, label=name.replace("_", " "))
    ax.set_xlabel("frame")
    ax.set_ylabel("position error")
    ax.legend()
    fig.tight_layout()
    tmp = path + ".tmp.png"
    fig.savefig(tmp, dpi=120)
    plt.close(fig)
    os.replace(tmp, path)


def cmd_evaluate(cfg: dict, out: str, dump_csv: bool = False) -> dict:
    from .geometry import Trajectory, armse, kabsch_armse, per_frame_error

    e = cfg["evaluate"]
    if not e["generated"] or not e["reference"]:
        raise UsageError("evaluate needs a generated and a reference trajectory")
    gen, ref = _read_traj(e["generated"]), _read_traj(e["reference"])
    if not np.array_equal(gen.atom_numbers, ref.atom_numbers):
        raise UsageError("generated and reference atom rosters differ")
    tn = e["tn"] if e["tn"] is not None else min(len(gen), len(ref)) - 1
    t1 = e["t1"]
    if t1 > tn:
        # single-frame inputs: the window is the start frame itself
        t1 = tn
    report = {"t1": t1, "tn": tn, "armse": armse(gen, ref, t1, tn)}
    if e["kabsch"]:
        report["kabsch_armse"] = kabsch_armse(gen, ref, t1, tn)
    report.update(baselines(ref, t1, tn))
    atomic_text(os.path.join(out, "metrics.json"), json.dumps(report, indent=1))
    frames = np.arange(t1, tn + 1)
    prev = Trajectory([ref[max(i - 1, 0)] for i in range(len(ref))], ref.dt)
    start = Trajectory([ref[0]] * len(ref), ref.dt)
    series = {"generated": per_frame_error(gen, ref, t1, tn),
              "copy_previous": per_frame_error(prev, ref, t1, tn),
              "copy_start": per_frame_error(start, ref, t1, tn)}
    if dump_csv:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["frame"] + list(series))
        for k, f in enumerate(frames):
            w.writerow([int(f)] + [repr(float(series[n][k])) for n in series])
        atomic_text(os.path.join(out, "per_frame.csv"), buf.getvalue())
    plot_errors(os.path.join(out, "errors.png"), frames, series)
    return report


# --- entry point -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default=".", help="output directory (created if missing)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config key; may repeat")
    p = argparse.ArgumentParser(prog="scoremd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="run the reference MD engine")
    s.add_argument("--fixture")
    s.add_argument("--n-steps", type=int)
    t = sub.add_parser("train", parents=[common], help="train a score model")
    t.add_argument("--data", nargs="+", help="extended-XYZ training trajectories")
    t.add_argument("--epochs", type=int)
    g = sub.add_parser("generate", parents=[common], help="roll out a trained model")
    g.add_argument("--checkpoint")
    g.add_argument("--start", help="trajectory whose start_frame seeds the rollout")
    g.add_argument("--n-frames", type=int)
    g.add_argument("--mode", choices=["ode", "pc"])
    ev = sub.add_parser("evaluate", parents=[common], help="ARMSE against a reference")
    ev.add_argument("generated", nargs="?")
    ev.add_argument("reference", nargs="?")
    ev.add_argument("--kabsch", action="store_true", default=None)
    ev.add_argument("--dump-csv", action="store_true", help="write per-frame errors as CSV")
    return p


def _set_threads():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    import torch

    torch.set_num_threads(max(1, n))


def run(argv=None) -> int:
    from .egt import CheckpointError
    from .geometry import GeometryError
    from .sampler import IntegrationError
    from .xyz import TrajectoryFormatError

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args)
        _set_threads()
        os.makedirs(args.out, exist_ok=True)
        if args.command == "simulate":
            result = cmd_simulate(cfg, args.out)
        elif args.command == "train":
            result = cmd_train(cfg, args.out)
        elif args.command == "generate":
            result = cmd_generate(cfg, args.out)
        else:
            result = cmd_evaluate(cfg, args.out, args.dump_csv)
        write_resolved(args.out, cfg)
    except (FloatingPointError, IntegrationError) as exc:
        print(f"scoremd {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CheckpointError, TrajectoryFormatError, GeometryError,
            ValueError, TypeError, KeyError, OSError) as exc:
        print(f"scoremd {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(json.dumps(result, default=lambda x: None if x is None else float(x)))
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
