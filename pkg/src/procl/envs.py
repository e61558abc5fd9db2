"""Ground-truth 2-D simulators, pixel renderers and the transition dataset.

Both environments are double integrators on a 2-D configuration with hard
limits: on contact the configuration is clamped and the normal velocity
component zeroed. Frames are 32x32 grayscale float32 in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

POINTMASS_HALF_WIDTH = 0.3
BLOB_SIGMA_PX = 1.5
REACHER_LINK = 0.14
REACHER_LINE_WIDTH_PX = 2.0


@dataclass(frozen=True)
class GroundTruthState:
    config: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "config", np.asarray(self.config, dtype=np.float64))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=np.float64))

    def __eq__(self, other):
        return (
            isinstance(other, GroundTruthState)
            and np.array_equal(self.config, other.config)
            and np.array_equal(self.velocity, other.velocity)
        )

    __hash__ = None


def _check_step_inputs(state, u, u_max):
    u = np.asarray(u, dtype=np.float64)
    if not (np.all(np.isfinite(state.config)) and np.all(np.isfinite(state.velocity)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite state or control")
    if np.any(np.abs(u) > u_max + 1e-12):
        raise ValueError(f"control {u} outside [-{u_max}, {u_max}]")
    return u


def _integrate_clamped(state, u, dt, lower, upper):
    vel = state.velocity + dt * u
    pos = state.config + dt * vel
    hit_hi = pos > upper
    hit_lo = pos < lower
    pos = np.where(hit_hi, upper, np.where(hit_lo, lower, pos))
    vel = np.where(hit_hi | hit_lo, 0.0, vel)
    return GroundTruthState(pos, vel)


PM_LOWER = np.full(2, -POINTMASS_HALF_WIDTH)
PM_UPPER = np.full(2, POINTMASS_HALF_WIDTH)
REACHER_LOWER = np.radians([-160.0, 0.0])
REACHER_UPPER = np.radians([160.0, 160.0])


def step_pointmass(state, u, dt=0.05, u_max=1.0):
    u = _check_step_inputs(state, u, u_max)
    return _integrate_clamped(state, u, dt, PM_LOWER, PM_UPPER)


def step_reacher(state, u, dt=0.02, u_max=1.0):
    """Joint-space double integrator; root in [-160, 160] deg, elbow in [0, 160] deg."""
    u = _check_step_inputs(state, u, u_max)
    return _integrate_clamped(state, u, dt, REACHER_LOWER, REACHER_UPPER)


def _pixel_grid(size):
    rows, cols = np.mgrid[0:size[0], 0:size[1]]
    return rows.astype(np.float64), cols.astype(np.float64)


def world_to_pixel(xy, size=(32, 32)):
    """World (x, y) in [-0.3, 0.3]^2 to (row, col); the origin lands on pixel (H/2, W/2)."""
    x, y = xy[..., 0], xy[..., 1]
    col = (x + POINTMASS_HALF_WIDTH) / (2 * POINTMASS_HALF_WIDTH) * size[1]
    row = (POINTMASS_HALF_WIDTH - y) / (2 * POINTMASS_HALF_WIDTH) * size[0]
    return row, col


def render_pointmass(state, size=(32, 32)):
    rows, cols = _pixel_grid(size)
    r0, c0 = world_to_pixel(state.config, size)
    d2 = (rows - r0) ** 2 + (cols - c0) ** 2
    return np.exp(-d2 / (2.0 * BLOB_SIGMA_PX**2)).astype(np.float32)


def reacher_joints(config):
    """Elbow and fingertip positions (world units) by forward kinematics."""
    a1, a2 = config
    elbow = REACHER_LINK * np.array([np.cos(a1), np.sin(a1)])
    tip = elbow + REACHER_LINK * np.array([np.cos(a1 + a2), np.sin(a1 + a2)])
    return elbow, tip


def _segment_distance(rows, cols, p, q):
    d = q - p
    denom = float(d @ d)
    t = np.zeros_like(rows) if denom == 0 else np.clip(((rows - p[0]) * d[0] + (cols - p[1]) * d[1]) / denom, 0, 1)
    return np.hypot(rows - (p[0] + t * d[0]), cols - (p[1] + t * d[1]))


def render_reacher(state, size=(32, 32)):
    rows, cols = _pixel_grid(size)
    elbow, tip = reacher_joints(state.config)
    pts = [np.array(world_to_pixel(p, size)) for p in (np.zeros(2), elbow, tip)]
    d = np.minimum(_segment_distance(rows, cols, pts[0], pts[1]), _segment_distance(rows, cols, pts[1], pts[2]))
    # one-pixel linear falloff around a solid core
    return np.clip(REACHER_LINE_WIDTH_PX / 2 + 0.5 - d, 0.0, 1.0).astype(np.float32)


def reacher_tip(config):
    return reacher_joints(config)[1]


@dataclass(frozen=True)
class Env:
    """Static description of one environment."""

    name: str
    dt: float
    d_s: int
    d_u: int
    u_max: float
    lower: np.ndarray
    upper: np.ndarray
    frame_size: tuple
    step_fn: Callable
    render_fn: Callable

    def step(self, state, u):
        return self.step_fn(state, u, self.dt, self.u_max)

    def render(self, state):
        return self.render_fn(state, self.frame_size)

    def sample_state(self, rng):
        return GroundTruthState(rng.uniform(self.lower, self.upper), np.zeros(self.d_s))

    def in_bounds(self, config):
        return bool(np.all(config >= self.lower) and np.all(config <= self.upper))


ENV_NAMES = ("pointmass", "reacher")


def make_env(name, frame_size=(32, 32), dt=None):
    if name == "pointmass":
        return Env(name, 0.05 if dt is None else dt, 2, 2, 1.0, PM_LOWER, PM_UPPER, tuple(frame_size),
                   step_pointmass, render_pointmass)
    if name == "reacher":
        return Env(name, 0.02 if dt is None else dt, 2, 2, 1.0, REACHER_LOWER, REACHER_UPPER, tuple(frame_size),
                   step_reacher, render_reacher)
    raise ValueError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")


# --- dataset ------------------------------------------------------------------


@dataclass
class TrainingView:
    """What the learner may see: frames, frame-index triples and controls."""

    frames: np.ndarray  # (F, H, W) float32
    indices: np.ndarray  # (R, 3) uint32: frames t-1, t, t+1
    controls: np.ndarray  # (R, d_u) float64
    dt: float


@dataclass
class Dataset:
    env_name: str
    dt: float
    d_s: int
    d_u: int
    frame_size: tuple
    u_max: float
    seed: int
    frames: np.ndarray
    indices: np.ndarray
    controls: np.ndarray
    episodes: np.ndarray
    _ground_truth: np.ndarray  # (R, 2*d_s): config at t then config at t+1; evaluation only

    def __len__(self):
        return len(self.indices)

    def training_view(self):
        return TrainingView(self.frames, self.indices, self.controls, self.dt)

    def ground_truth(self):
        return self._ground_truth

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        meta = ("env_name", "dt", "d_s", "d_u", "frame_size", "u_max", "seed")
        arrays = ("frames", "indices", "controls", "episodes", "_ground_truth")
        return all(getattr(self, m) == getattr(other, m) for m in meta) and all(
            getattr(self, a).dtype == getattr(other, a).dtype and np.array_equal(getattr(self, a), getattr(other, a))
            for a in arrays
        )


def collect_random(env, n_steps, episode_len=50, seed=0):
    """Roll out uniform random controls in fixed-length episodes.

    Each episode starts at rest from a uniform in-bounds configuration and
    yields ``episode_len - 2`` records, since a record needs frames at
    t-1, t and t+1.
    """
    if episode_len < 3 or n_steps < episode_len:
        raise ValueError("need n_steps >= episode_len >= 3")
    rng = np.random.default_rng(seed)
    n_eps = n_steps // episode_len
    frames = np.empty((n_eps * episode_len, *env.frame_size), dtype=np.float32)
    per_ep = episode_len - 2
    idx = np.empty((n_eps * per_ep, 3), dtype=np.uint32)
    ctrl = np.empty((n_eps * per_ep, env.d_u))
    eps = np.empty(n_eps * per_ep, dtype=np.uint32)
    gt = np.empty((n_eps * per_ep, 2 * env.d_s))
    for e in range(n_eps):
        state = env.sample_state(rng)
        us = rng.uniform(-env.u_max, env.u_max, size=(episode_len - 1, env.d_u))
        configs = [state.config]
        base = e * episode_len
        frames[base] = env.render(state)
        for t in range(episode_len - 1):
            state = env.step(state, us[t])
            configs.append(state.config)
            frames[base + t + 1] = env.render(state)
        for t in range(1, episode_len - 1):
            r = e * per_ep + t - 1
            idx[r] = (base + t - 1, base + t, base + t + 1)
            ctrl[r] = us[t]
            eps[r] = e
            gt[r] = np.concatenate([configs[t], configs[t + 1]])
    return Dataset(env.name, env.dt, env.d_s, env.d_u, tuple(env.frame_size), env.u_max, seed,
                   frames, idx, ctrl, eps, gt)


DATASET_MAGIC = b"PROCLDS1"
DATASET_VERSION = 1


class DatasetError(Exception):
    pass


class BadMagicError(DatasetError):
    pass


class TruncatedError(DatasetError):
    pass


class VersionError(DatasetError):
    pass


def save_dataset(dataset, path):
    """Write the binary dataset file (all fields little-endian).

    Header: magic, version u32, name (u16 length + utf-8), dt f64,
    dims u32[4] = (d_s, d_u, height, width), u_max f64, seed u64.
    Then frame count u32 + f32 frames, record count u32 + fixed-width
    records (3 u32 indices, d_u f64 controls, u32 episode, 2*d_s f64 truth).
    """
    d = dataset
    name = d.env_name.encode("utf-8")
    rec = np.zeros(len(d), dtype=_record_dtype(d.d_u, d.d_s))
    rec["idx"] = d.indices
    rec["u"] = d.controls
    rec["ep"] = d.episodes
    rec["gt"] = d._ground_truth
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IH", DATASET_VERSION, len(name)))
        fh.write(name)
        fh.write(struct.pack("<d4Id", d.dt, d.d_s, d.d_u, *d.frame_size, d.u_max))
        fh.write(struct.pack("<QI", d.seed, len(d.frames)))
        fh.write(np.ascontiguousarray(d.frames, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(d)))
        fh.write(rec.tobytes())


def _record_dtype(d_u, d_s):
    return np.dtype([("idx", "<u4", (3,)), ("u", "<f8", (d_u,)), ("ep", "<u4"), ("gt", "<f8", (2 * d_s,))])


def load_dataset(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != DATASET_MAGIC:
        raise BadMagicError("bad magic")
    pos = 8

    def take(fmt):
        nonlocal pos
        n = struct.calcsize(fmt)
        if pos + n > len(buf):
            raise TruncatedError("truncated header")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += n
        return vals

    (version,) = take("<I")
    if version != DATASET_VERSION:
        raise VersionError(f"version mismatch: file {version}, expected {DATASET_VERSION}")
    (name_len,) = take("<H")
    if pos + name_len > len(buf):
        raise TruncatedError("truncated header")
    env_name = buf[pos:pos + name_len].decode("utf-8")
    pos += name_len
    dt, d_s, d_u, h, w, u_max = take("<d4Id")
    seed, n_frames = take("<QI")
    nbytes = n_frames * h * w * 4
    if pos + nbytes > len(buf):
        raise TruncatedError(f"truncated: header promises {n_frames} frames")
    frames = np.frombuffer(buf, dtype="<f4", count=n_frames * h * w, offset=pos).reshape(n_frames, h, w).astype(np.float32)
    pos += nbytes
    (n_rec,) = take("<I")
    rdt = _record_dtype(d_u, d_s)
    if len(buf) - pos != n_rec * rdt.itemsize:
        raise TruncatedError(f"truncated: header promises {n_rec} records, file holds {(len(buf) - pos) / rdt.itemsize:g}")
    rec = np.frombuffer(buf, dtype=rdt, count=n_rec, offset=pos)
    indices = rec["idx"].astype(np.uint32)
    if n_rec and int(indices.max()) >= n_frames:
        raise DatasetError("record references a frame past the frame table")
    return Dataset(env_name, dt, d_s, d_u, (h, w), u_max, seed, frames, indices,
                   rec["u"].astype(np.float64), rec["ep"].astype(np.uint32), rec["gt"].astype(np.float64))
