"""Encoder and latent dynamics with the (configuration, velocity) split.

A frame ``i`` maps to a latent configuration ``h = e(i)``; an observation of
two consecutive frames gives ``z = (h, v)`` with ``v`` the finite difference
of the two embeddings. The dynamics predict the next velocity with a
residual MLP and integrate it with one Euler step, so
``h' - h == dt * v'`` holds exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, concat, exp, tanh
from .tensor.checkpoint import load_tensors, save_tensors
from .tensor.layers import conv, conv_output_size, dense, init_conv, init_dense

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LatentState:
    h: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if h.shape != v.shape:
            raise ValueError(f"h and v must share a shape, got {h.shape} and {v.shape}")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "v", v)

    def vector(self):
        return np.concatenate([self.h, self.v], axis=-1)

    def __sub__(self, other):
        return LatentState(self.h - other.h, self.v - other.v)


@dataclass(frozen=True)
class ModelConfig:
    """Network shapes. The latent configuration has one coordinate per control."""

    d_u: int = 2
    frame_size: tuple = (32, 32)
    dt: float = 0.05
    conv_channels: tuple = (16, 32, 32)
    kernel: int = 3
    hidden: tuple = (64, 64)
    env_name: str = "pointmass"

    @property
    def d_h(self):
        return self.d_u

    def feature_size(self):
        h, w = self.frame_size
        for _ in self.conv_channels:
            h = conv_output_size(h, self.kernel, 2)
            w = conv_output_size(w, self.kernel, 2)
            if h < 1 or w < 1:
                raise ValueError(
                    f"frame size {self.frame_size} too small for {len(self.conv_channels)} stride-2 convolutions"
                )
        return h * w * (self.conv_channels[-1] if self.conv_channels else 1)


def init_params(cfg, rng, log_var=0.0, head_scale=1.0):
    params = {}
    c_in = 1
    for i, c_out in enumerate(cfg.conv_channels):
        init_conv(params, f"enc.conv{i}", cfg.kernel, c_in, c_out, rng)
        c_in = c_out
    init_dense(params, "enc.head", cfg.feature_size(), cfg.d_h, rng)
    params["enc.head.w"] *= head_scale
    n_in = 2 * cfg.d_h + cfg.d_u
    for i, n_out in enumerate(cfg.hidden):
        init_dense(params, f"dyn.fc{i}", n_in, n_out, rng)
        n_in = n_out
    # small last layer: the residual net starts near constant velocity
    init_dense(params, "dyn.out", n_in, cfg.d_h, rng, scale=1e-2)
    params["dyn.log_var"] = np.full(2 * cfg.d_h, float(log_var))
    return params


# --- tape-level building blocks ----------------------------------------------


def embed_tape(tape, params, cfg, frames):
    """Per-frame encoder ``e`` on a (N, H, W) Var -> (N, d_h)."""
    n = frames.shape[0]
    x = frames.reshape(n, *cfg.frame_size, 1)
    for i in range(len(cfg.conv_channels)):
        x = conv(tape, params, f"enc.conv{i}", x, stride=2, activation="relu")
    return dense(tape, params, "enc.head", x.reshape(n, -1))


def _mlp_weights(tape, params, cfg):
    names = [f"dyn.fc{i}" for i in range(len(cfg.hidden))] + ["dyn.out"]
    return [(tape.param(f"{n}.w", params[f"{n}.w"]), tape.param(f"{n}.b", params[f"{n}.b"])) for n in names]


def velocity_tape(tape, params, cfg, h, v, u, tangent=None):
    """Residual dynamics ``g(h, v, u) = v + mlp(h, v, u)``.

    With ``tangent = (dh, dv, du)`` also returns the exact directional
    derivative of ``g``, carried forward through the same layers as graph
    operations so it can itself be differentiated.
    """
    layers = _mlp_weights(tape, params, cfg)
    x = concat([h, v, u], axis=-1)
    dx = concat(list(tangent), axis=-1) if tangent is not None else None
    for w, b in layers[:-1]:
        x = tanh(x @ w + b)
        if dx is not None:
            dx = (1.0 - x * x) * (dx @ w)
    w, b = layers[-1]
    out = v + (x @ w + b)
    if dx is None:
        return out
    return out, tangent[1] + dx @ w


def predict_tape(tape, params, cfg, h, v, u, dt):
    v_next = velocity_tape(tape, params, cfg, h, v, u)
    return h + dt * v_next, v_next


def log_density_tape(tape, params, x, mean):
    """Diagonal-Gaussian log-density, summed over the last axis."""
    log_var = tape.param("dyn.log_var", params["dyn.log_var"])
    r = x - mean
    d = x.shape[-1]
    return -0.5 * ((r * r) * exp(-log_var) + log_var).sum(axis=-1) - 0.5 * d * LOG_2PI


# --- plain-array operations ---------------------------------------------------


def encode(current, previous, dt, embed):
    """``z = (e(current), (e(current) - e(previous)) / dt)`` for any embedding ``e``."""
    h = np.asarray(embed(current), dtype=np.float64)
    h_prev = np.asarray(embed(previous), dtype=np.float64)
    if h.shape != h_prev.shape:
        raise ValueError("frames must embed to matching shapes")
    return LatentState(h, (h - h_prev) / dt)


def predict(z, u, dt, g):
    """One latent step: ``v' = g(h, v, u)``, ``h' = h + dt * v'``."""
    u = np.asarray(u, dtype=np.float64)
    v_next = np.asarray(g(z.h, z.v, u), dtype=np.float64)
    if v_next.shape != z.h.shape:
        raise ValueError(f"g returned shape {v_next.shape}, expected {z.h.shape}")
    return LatentState(z.h + dt * v_next, v_next)


def gaussian_log_density(x, mean, log_var):
    log_var = np.asarray(log_var, dtype=np.float64)
    if not np.all(np.isfinite(log_var)):
        raise ValueError("variance must be positive and finite")
    r = np.asarray(x, dtype=np.float64) - mean
    d = r.shape[-1]
    return -0.5 * np.sum(r * r * np.exp(-log_var) + log_var, axis=-1) - 0.5 * d * LOG_2PI


@dataclass
class LatentModel:
    """Trained encoder + dynamics bundled for inference."""

    cfg: ModelConfig
    params: dict = field(repr=False)

    @classmethod
    def create(cls, cfg, seed=0):
        return cls(cfg, init_params(cfg, np.random.default_rng(seed)))

    @property
    def dt(self):
        return self.cfg.dt

    def embed(self, frames):
        """h for one frame (H, W) or a stack (N, H, W)."""
        frames = np.asarray(frames, dtype=np.float64)
        single = frames.ndim == 2
        if frames.shape[-2:] != tuple(self.cfg.frame_size):
            raise ValueError(f"frame size {frames.shape[-2:]} does not match model {self.cfg.frame_size}")
        tape = Tape(checked=False)
        x = tape.input("frames", frames[None] if single else frames)
        h = embed_tape(tape, self.params, self.cfg, x).value
        return h[0] if single else h

    def encode(self, current, previous):
        return encode(current, previous, self.cfg.dt, self.embed)

    def g(self, h, v, u):
        tape = Tape(checked=False)
        args = [tape.input(n, np.atleast_2d(a)) for n, a in (("h", h), ("v", v), ("u", u))]
        out = velocity_tape(tape, self.params, self.cfg, *args).value
        return out[0] if np.ndim(h) == 1 else out

    def predict(self, z, u):
        if np.shape(u)[-1] != self.cfg.d_u or z.h.shape[-1] != self.cfg.d_h:
            raise ValueError("latent/control dimension mismatch")
        return predict(z, u, self.cfg.dt, self.g)

    def log_density(self, z_next, z, u):
        mean = self.predict(z, u)
        return gaussian_log_density(z_next.vector(), mean.vector(), self.params["dyn.log_var"])

    # checkpoint metadata travels as scalar tensors named "meta.*"
    def to_tensors(self):
        env_id = {"pointmass": 0, "reacher": 1}.get(self.cfg.env_name, -1)
        meta = {
            "meta.d_h": self.cfg.d_h,
            "meta.d_u": self.cfg.d_u,
            "meta.frame_size": np.array(self.cfg.frame_size, dtype=np.float64),
            "meta.dt": self.cfg.dt,
            "meta.kernel": self.cfg.kernel,
            "meta.conv_channels": np.array(self.cfg.conv_channels, dtype=np.float64),
            "meta.hidden": np.array(self.cfg.hidden, dtype=np.float64),
            "meta.env_id": env_id,
        }
        out = {k: np.asarray(v, dtype=np.float64) for k, v in meta.items()}
        out.update(self.params)
        return out

    @classmethod
    def from_tensors(cls, tensors):
        env_names = {0: "pointmass", 1: "reacher"}
        cfg = ModelConfig(
            d_u=int(tensors["meta.d_u"]),
            frame_size=tuple(int(x) for x in tensors["meta.frame_size"]),
            dt=float(tensors["meta.dt"]),
            conv_channels=tuple(int(x) for x in tensors["meta.conv_channels"]),
            kernel=int(tensors["meta.kernel"]),
            hidden=tuple(int(x) for x in tensors["meta.hidden"]),
            env_name=env_names.get(int(tensors["meta.env_id"]), "unknown"),
        )
        if int(tensors["meta.d_h"]) != cfg.d_h:
            raise ValueError("checkpoint has d_h != d_u")
        params = {k: v.copy() for k, v in tensors.items() if k.startswith(("enc.", "dyn."))}
        return cls(cfg, params)

    def save(self, path):
        save_tensors(path, self.to_tensors())

    @classmethod
    def load(cls, path):
        return cls.from_tensors(load_tensors(path))
