"""Off-policy training loop: replay minibatches, hindsight-label them, step Adam.

Every step draws its randomness from ``default_rng([seed, step])`` so a run
resumed from a checkpoint replays the uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import objectives as ob
from .model import LatentModel, ModelConfig, init_params
from .tensor import NonFiniteError, Tape, backward
from .tensor.checkpoint import load_tensors, save_tensors
from .tensor.optim import AdamState, adam_step

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step, component, detail=""):
        super().__init__(f"non-finite {component} at step {step}{': ' + detail if detail else ''}")
        self.step = step
        self.component = component


def _parse_bool(s):
    s = s.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s):
    return tuple(int(x) for x in s.replace(",", " ").split())


@dataclass
class TrainConfig:
    lambda_pc3: float = 1.0
    lambda_r: float = 10.0
    lambda_cpc: float = 1.0
    lambda_cons: float = 1.0
    lambda_curv: float = 10.0
    eps_latent: float = 0.01
    sigma_curv: float = 0.1
    kp: float = 10.0
    kd: float = 2.0
    qh: float = 1.0
    qv: float = 0.1
    batch_size: int = 128
    steps: int = 6000
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1000
    target_grad: bool = True
    init_log_var: float = -6.0
    init_head_scale: float = 1.0
    conv_channels: tuple = (16, 32, 32)
    hidden: tuple = (64, 64)

    _PARSERS = {bool: _parse_bool, tuple: _parse_ints}

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        try:
            self.weights()
            ob.PDGains.isotropic(self.kp, self.kd)
            ob.LyapunovQ.isotropic(self.qh, self.qv)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def weights(self):
        return ob.LossWeights(self.lambda_pc3, self.lambda_r, self.lambda_cpc, self.lambda_cons,
                              self.lambda_curv, self.eps_latent, self.sigma_curv)

    def gains(self, dim, dt):
        return ob.PDGains.isotropic(self.kp, self.kd, dim, dt)

    def lyapunov_q(self, dim):
        return ob.LyapunovQ.isotropic(self.qh, self.qv, dim)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(x) for x in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{f.name}={val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        """Parse ``key=value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
        types = {f.name: type(f.default) for f in dataclasses.fields(cls)}
        aliases = {"lambda_1": "lambda_cpc", "lambda_2": "lambda_cons", "lambda_3": "lambda_curv"}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = aliases.get(key, key)
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            parse = cls._PARSERS.get(types[key], types[key])
            try:
                values[key] = parse(val)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from None
        return cls(**values)

    @classmethod
    def from_file(cls, path):
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


LOG_FIELDS = ("step", "cpc", "cons", "curv", "risk", "total", "grad_norm", "seconds")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec):
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError("log steps must increase")
        self.records.append(rec)

    def column(self, name):
        return np.array([r[name] for r in self.records])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for r in self.records:
                w.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])


def sample_prior_v(v, rng):
    """Indices into the minibatch, uniform with replacement: ``v_target[i] = v[idx[i]]``."""
    k = len(v)
    if k == 0:
        raise ValueError("empty minibatch")
    return rng.integers(0, k, size=k)


def model_config_for(config, dataset):
    return ModelConfig(d_u=dataset.d_u, frame_size=tuple(dataset.frame_size), dt=dataset.dt,
                       conv_channels=tuple(config.conv_channels), hidden=tuple(config.hidden),
                       env_name=dataset.env_name)


def step_rng(seed, step):
    return np.random.default_rng([seed, step])


def train_step(params, cfg, config, view, step, adam):
    """One iteration: sample, encode, label, evaluate the objective, update ``params`` in place."""
    rng = step_rng(config.seed, step)
    k = config.batch_size
    rec = rng.integers(0, len(view.indices), size=k)
    idx = view.indices[rec]
    u = view.controls[rec]
    noise = config.eps_latent * rng.standard_normal((k, 2 * cfg.d_h))
    gains = config.gains(cfg.d_u, cfg.dt)
    tape = Tape(checked=True)
    try:
        with tape.scope("encoder"):
            batch = ob.encode_batch(tape, params, cfg, view.frames[idx[:, 0]], view.frames[idx[:, 1]],
                                    view.frames[idx[:, 2]], u, noise)
        prior = sample_prior_v(batch.v.value, rng)
        with tape.scope("hindsight"):
            ob.label_batch(tape, batch, prior, gains, target_grad=config.target_grad)
        parts = ob.total_loss(tape, params, cfg, batch, config.weights(), gains, config.lyapunov_q(cfg.d_h), rng)
    except NonFiniteError as exc:
        raise TrainingDiverged(step, exc.scope or exc.op, str(exc)) from None
    grads = backward(tape, parts["total"])
    grads = {n: g for n, g in grads.items() if n in params}
    gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(gnorm):
        bad = next(n for n, g in grads.items() if not np.all(np.isfinite(g)))
        raise TrainingDiverged(step, "gradient", bad)
    adam_step(params, grads, adam, config.lr, config.beta1, config.beta2, config.adam_eps)
    out = {name: float(parts[name].value) for name in ("cpc", "cons", "curv", "risk", "total")}
    out["grad_norm"] = gnorm
    return out


def checkpoint_tensors(model, adam, step):
    t = model.to_tensors()
    t["train.step"] = np.float64(step)
    t["adam.step"] = np.float64(adam.step)
    for n in adam.m:
        t[f"adam.m.{n}"] = adam.m[n]
        t[f"adam.v.{n}"] = adam.v[n]
    return t


def restore(tensors):
    model = LatentModel.from_tensors(tensors)
    adam = AdamState(step=int(tensors.get("adam.step", 0)))
    for n in model.params:
        if f"adam.m.{n}" in tensors:
            adam.m[n] = tensors[f"adam.m.{n}"].copy()
            adam.v[n] = tensors[f"adam.v.{n}"].copy()
    return model, adam, int(tensors.get("train.step", 0))


def train(config, dataset, out_dir=None, resume=None, progress_every=0):
    """Run the training loop; returns ``(model, log)``.

    Checkpoints go to ``out_dir`` every ``config.checkpoint_every`` steps and
    at the end (``final.ckpt``); the log is written as ``train_log.csv``.
    ``resume`` is a checkpoint path to continue from.
    """
    cfg = model_config_for(config, dataset)
    view = dataset.training_view()  # no ground truth past this point
    if resume is not None:
        model, adam, start = restore(load_tensors(resume))
        if model.cfg != cfg:
            raise ConfigError(f"checkpoint model {model.cfg} does not match dataset/config {cfg}")
        params = model.params
    else:
        params = init_params(cfg, np.random.default_rng(config.seed), config.init_log_var,
                             config.init_head_scale)
        adam, start = AdamState(), 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tlog = TrainLog()
    t0 = time.perf_counter()
    for step in range(start + 1, config.steps + 1):
        rec = train_step(params, cfg, config, view, step, adam)
        rec["step"] = step
        rec["seconds"] = time.perf_counter() - t0
        tlog.append(rec)
        if progress_every and step % progress_every == 0:
            log.info("step %d total %.4f risk %.4f cpc %.4f", step, rec["total"], rec["risk"], rec["cpc"])
        if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0 and step < config.steps:
            save_tensors(out / f"step_{step:06d}.ckpt", checkpoint_tensors(LatentModel(cfg, params), adam, step))
    model = LatentModel(cfg, params)
    if out is not None:
        save_tensors(out / "final.ckpt", checkpoint_tensors(model, adam, config.steps))
        tlog.write_csv(out / "train_log.csv")
    return model, tlog
