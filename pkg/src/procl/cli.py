"""``procl`` command line: collect, train, evaluate, ablate, export.

Each artifact-producing command writes a ``manifest.json`` with the argv,
the resolved configuration, the seed and content hashes of its inputs, so
the run can be replayed from the manifest alone. Errors go to stderr as a
single JSON line ``{"error": <kind>, "message": ...}``.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .control import (
    ReferenceTrajectory,
    circle_reference,
    evaluate_goal_reaching,
    run_tracking,
    summarize,
    write_summary_csv,
    write_traces_csv,
)
from .envs import DatasetError, ENV_NAMES, GroundTruthState, collect_random, load_dataset, make_env, save_dataset
from .model import LatentModel
from .objectives import LyapunovQ, PDGains
from .tensor import NonFiniteError
from .tensor.checkpoint import CheckpointError
from .trainer import ConfigError, TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_CONFIG = 0, 2, 3, 4, 5
DEFAULT_EPS = (0.003, 0.01, 0.03)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, argv, config=None, seed=None, inputs=()):
    manifest = {
        "procl_version": __version__,
        "command": command,
        "argv": list(argv),
        "config": config or {},
        "seed": seed,
        "inputs": {str(p): file_sha256(p) for p in inputs},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _config_dict(obj):
    out = {}
    for k, v in dataclasses.asdict(obj).items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _env_for(model):
    return make_env(model.cfg.env_name, model.cfg.frame_size, model.cfg.dt)


def _load_model(path):
    model = LatentModel.load(path)
    if model.cfg.env_name not in ENV_NAMES:
        raise ConfigError(f"checkpoint {path} names no known environment")
    return model


def _train_config(args):
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = "\n".join(args.set or [])
    if overrides:
        merged = config.to_text() + overrides + "\n"
        config = TrainConfig.from_text(merged)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


# --- subcommands ----------------------------------------------------------------


def cmd_collect(args, argv):
    env = make_env(args.env)
    ds = collect_random(env, args.steps, args.episode_len, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "collect", argv,
                   {"env": args.env, "steps": args.steps, "episode_len": args.episode_len}, args.seed)
    print(f"wrote {len(ds)} records to {out}")


def _train_into(config, dataset, out, resume=None):
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.cfg").write_text(config.to_text(), encoding="utf-8")
    train(config, dataset, out_dir=out, resume=resume, progress_every=max(1, config.steps // 20))


def cmd_train(args, argv):
    config = _train_config(args)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    _train_into(config, dataset, out, args.resume)
    inputs = [args.data] + ([args.config] if args.config else []) + ([args.resume] if args.resume else [])
    write_manifest(out / "manifest.json", "train", argv, _config_dict(config), config.seed, inputs)
    print(f"wrote {out / 'final.ckpt'}")


def cmd_ablate_noise(args, argv):
    config = _train_config(args)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    runs = {}
    for eps in args.eps:
        run_cfg = dataclasses.replace(config, eps_latent=eps)
        run_dir = out / f"eps_{eps:g}"
        _train_into(run_cfg, dataset, run_dir)
        runs[f"{eps:g}"] = str(run_dir / "final.ckpt")
    cfg = _config_dict(config)
    cfg["eps_sweep"] = list(args.eps)
    write_manifest(out / "manifest.json", "ablate-noise", argv, cfg, config.seed,
                   [args.data] + ([args.config] if args.config else []))
    print(json.dumps(runs))


def _gains(args, model):
    return PDGains.isotropic(args.kp, args.kd, model.cfg.d_u, model.cfg.dt)


def cmd_eval_goal(args, argv):
    model = _load_model(args.ckpt)
    env = _env_for(model)
    traces = evaluate_goal_reaching(env, model, _gains(args, model), args.episodes, args.steps, args.seed,
                                    LyapunovQ.isotropic(dim=model.cfg.d_h))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_traces_csv(out / "traces.csv", traces)
    write_summary_csv(out / "summary.csv", summarize(traces))
    write_manifest(out / "manifest.json", "eval-goal", argv,
                   {"episodes": args.episodes, "steps": args.steps, "kp": args.kp, "kd": args.kd,
                    "env": env.name}, args.seed, [args.ckpt])
    final = float(np.median([t.gt_distance[-1] for t in traces]))
    print(json.dumps({"median_initial": float(np.median([t.initial_distance for t in traces])),
                      "median_final": final}))


def cmd_eval_track(args, argv):
    model = _load_model(args.ckpt)
    env = _env_for(model)
    configs, frames = circle_reference(env, args.length, args.radius, args.period)
    ref = ReferenceTrajectory.from_frames(frames, model, configs)
    trace = run_tracking(env, model, _gains(args, model), ref, q=LyapunovQ.isotropic(dim=model.cfg.d_h))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_traces_csv(out / "traces.csv", [trace])
    with open(out / "reference.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "ref_s_1", "ref_s_2", "s_1", "s_2", "ref_h_1", "ref_h_2"])
        for k in range(len(ref)):
            w.writerow([k + 1, *map(repr, configs[k].tolist()), *map(repr, trace.states[k].tolist()),
                        *map(repr, ref.h[k].tolist())])
    write_manifest(out / "manifest.json", "eval-track", argv,
                   {"length": args.length, "radius": args.radius, "period": args.period, "kp": args.kp,
                    "kd": args.kd, "env": env.name}, None, [args.ckpt])
    print(json.dumps({"mean_tracking_error": float(trace.gt_distance.mean())}))


def export_latent_map(model, path, n=11, env=None):
    """Render a uniform ``n x n`` grid of configurations at rest, encode, write ``s_1,s_2,h_1,h_2``."""
    env = env or _env_for(model)
    axes = [np.linspace(env.lower[i], env.upper[i], n) for i in range(2)]
    pts = np.array([[a, b] for a in axes[0] for b in axes[1]])
    frames = np.stack([env.render(GroundTruthState(p, np.zeros(env.d_s))) for p in pts])
    h = np.asarray(model.embed(frames), dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s_1", "s_2", "h_1", "h_2"])
        for p, z in zip(pts, h):
            w.writerow([repr(float(x)) for x in (*p, *z)])
    return len(pts)


def cmd_export_latent_map(args, argv):
    model = _load_model(args.ckpt)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = export_latent_map(model, out, args.grid)
    write_manifest(out.with_name(out.name + ".manifest.json"), "export-latent-map", argv,
                   {"grid": args.grid}, None, [args.ckpt])
    print(f"wrote {rows} rows to {out}")


# --- argument parsing -------------------------------------------------------------


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser():
    p = _Parser(prog="procl", description="PD-controllable latent spaces from pixels.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("collect", help="collect a random-policy dataset")
    c.add_argument("--env", choices=ENV_NAMES, required=True)
    c.add_argument("--steps", type=_positive_int, default=10000)
    c.add_argument("--episode-len", type=_positive_int, default=50)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_collect)

    for name, func, help_ in (("train", cmd_train, "train a model"),
                              ("ablate-noise", cmd_ablate_noise, "train one model per latent noise scale")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--config")
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--seed", type=int)
        t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if name == "train":
            t.add_argument("--resume")
        else:
            t.add_argument("--eps", type=float, nargs="+", default=list(DEFAULT_EPS))
        t.set_defaults(func=func)

    for name, func in (("eval-goal", cmd_eval_goal), ("eval-track", cmd_eval_track)):
        e = sub.add_parser(name, help=f"{name.split('-')[1]} evaluation of a checkpoint")
        e.add_argument("--ckpt", required=True)
        e.add_argument("--out", required=True)
        e.add_argument("--kp", type=float, default=10.0)
        e.add_argument("--kd", type=float, default=2.0)
        if name == "eval-goal":
            e.add_argument("--episodes", type=_positive_int, default=50)
            e.add_argument("--steps", type=_positive_int, default=100)
            e.add_argument("--seed", type=int, default=0)
        else:
            e.add_argument("--length", type=int, default=200)
            e.add_argument("--radius", type=float, default=0.15)
            e.add_argument("--period", type=_positive_int, default=200)
        e.set_defaults(func=func)

    x = sub.add_parser("export-latent-map", help="encode a grid of configurations")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--grid", type=_positive_int, default=11)
    x.set_defaults(func=cmd_export_latent_map)
    return p


def _thread_limit():
    n = os.environ.get("PROCL_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        limit = int(n)
    except ValueError:
        raise ConfigError(f"PROCL_THREADS must be an integer, got {n!r}") from None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # single-threaded BLAS builds need nothing
        return contextlib.nullcontext()
    return threadpool_limits(limits=limit)


def _fail(kind, code, message):
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            args.func(args, argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        return _fail("numeric", EXIT_NUMERIC, exc)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except (OSError, DatasetError, CheckpointError) as exc:
        return _fail("io", EXIT_IO, exc)
    except ValueError as exc:  # dimension mismatches and other invalid combinations
        return _fail("config", EXIT_CONFIG, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
