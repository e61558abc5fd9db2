"""PD control in the learned latent space: goal reaching and trajectory tracking.

The controller only ever sees rendered frames; ground-truth states are read
solely to score the episode.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .envs import GroundTruthState
from .model import LatentState
from .objectives import LyapunovQ, lyapunov_value_np


def pd_control(z, z_target, gains, u_max=np.inf):
    """``u = clip(Kp (h* - h) + Kd (v* - v), -u_max, u_max)``."""
    if z.h.shape != z_target.h.shape:
        raise ValueError("latent dimensions differ")
    u = gains.kp * (z_target.h - z.h) + gains.kd * (z_target.v - z.v)
    return np.clip(u, -u_max, u_max)


@dataclass
class EpisodeTrace:
    """Per-step record of one closed-loop episode."""

    gt_distance: np.ndarray  # (T,)
    latent_v: np.ndarray  # (T,) V(z - z_target)
    controls: np.ndarray  # (T, d_u)
    states: np.ndarray  # (T, d_s) configurations
    initial_distance: float

    def __len__(self):
        return len(self.gt_distance)


def config_distance(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


class _Observer:
    """Tracks the previous embedding so each frame is embedded once."""

    def __init__(self, model, first_frame):
        self.model = model
        self.h_prev = np.asarray(model.embed(first_frame), dtype=np.float64)

    def observe(self, frame):
        h = np.asarray(self.model.embed(frame), dtype=np.float64)
        z = LatentState(h, (h - self.h_prev) / self.model.dt)
        self.h_prev = h
        return z


def run_goal_reaching(env, model, gains, target_state, start_state, steps=100, q=None):
    """Drive ``start_state`` toward the configuration shown in the target image.

    The target observation repeats the target frame, so its latent velocity
    is exactly zero. The start is observed the same way (system at rest).
    Entry ``k`` of the trace is taken after ``k + 1`` actions.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    q = q or LyapunovQ.isotropic(dim=env.d_u)
    target_frame = env.render(target_state)
    h_star = np.asarray(model.embed(target_frame), dtype=np.float64)
    z_target = LatentState(h_star, np.zeros_like(h_star))
    state = start_state
    obs = _Observer(model, env.render(state))
    z = obs.observe(env.render(state))
    dist, lat, us, configs = [], [], [], []
    for _ in range(steps):
        u = pd_control(z, z_target, gains, env.u_max)
        state = env.step(state, u)
        z = obs.observe(env.render(state))
        dist.append(config_distance(state.config, target_state.config))
        lat.append(float(lyapunov_value_np(z.h - z_target.h, z.v - z_target.v, q)))
        us.append(u)
        configs.append(state.config)
    return EpisodeTrace(np.array(dist), np.array(lat), np.array(us), np.array(configs),
                        config_distance(start_state.config, target_state.config))


@dataclass
class ReferenceTrajectory:
    frames: np.ndarray  # (n, H, W)
    h: np.ndarray  # (n, d_h)
    v: np.ndarray  # (n, d_h); v[0] = 0, v[k] = (h[k] - h[k-1]) / dt
    configs: np.ndarray | None = None  # ground truth, scoring only

    @classmethod
    def from_frames(cls, frames, model, configs=None):
        frames = np.asarray(frames)
        if len(frames) < 2:
            raise ValueError("a reference needs at least two frames")
        h = np.asarray(model.embed(frames), dtype=np.float64)
        v = np.zeros_like(h)
        v[1:] = (h[1:] - h[:-1]) / model.dt
        return cls(frames, h, v, None if configs is None else np.asarray(configs))

    def __len__(self):
        return len(self.h)


def circle_reference(env, n, radius=0.15, period_steps=200, center=(0.0, 0.0)):
    """Ground-truth states and frames on a circle, starting at angle 0."""
    ang = 2 * np.pi * np.arange(n) / period_steps
    c = np.asarray(center)
    configs = c + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    frames = np.stack([env.render(GroundTruthState(p, np.zeros(2))) for p in configs])
    return configs, frames


def run_tracking(env, model, gains, reference, start_state=None, q=None):
    """Follow an encoded reference with the latent PD law.

    At step ``k`` the target is ``(h_k, v_k)`` of the reference; entry ``k``
    of the trace scores the state observed at step ``k`` against reference
    configuration ``k``. By default the system starts at rest on the
    reference's first configuration.
    """
    if len(reference) < 2:
        raise ValueError("reference must have at least two steps")
    if reference.configs is None:
        raise ValueError("reference needs ground-truth configurations for scoring")
    q = q or LyapunovQ.isotropic(dim=env.d_u)
    state = start_state or GroundTruthState(reference.configs[0], np.zeros(env.d_s))
    obs = _Observer(model, env.render(state))
    dist, lat, us, configs = [], [], [], []
    for k in range(len(reference)):
        z = obs.observe(env.render(state))
        z_ref = LatentState(reference.h[k], reference.v[k])
        dist.append(config_distance(state.config, reference.configs[k]))
        lat.append(float(lyapunov_value_np(z.h - z_ref.h, z.v - z_ref.v, q)))
        configs.append(state.config)
        u = pd_control(z, z_ref, gains, env.u_max)
        us.append(u)
        state = env.step(state, u)
    return EpisodeTrace(np.array(dist), np.array(lat), np.array(us), np.array(configs), dist[0])


def evaluate_goal_reaching(env, model, gains, episodes=50, steps=100, seed=0, q=None):
    """Random start/target pairs, both at rest and uniform over the workspace."""
    rng = np.random.default_rng(seed)
    traces = []
    for _ in range(episodes):
        start = env.sample_state(rng)
        target = env.sample_state(rng)
        traces.append(run_goal_reaching(env, model, gains, target, start, steps, q))
    return traces


def summarize(traces, field="gt_distance"):
    """Per-step median, mean and sample standard deviation across episodes."""
    if not traces:
        raise ValueError("no traces to summarize")
    data = np.stack([getattr(t, field) for t in traces])
    n = len(traces)
    std = data.std(axis=0, ddof=1) if n > 1 else np.zeros(data.shape[1])
    return {
        "step": np.arange(1, data.shape[1] + 1),
        "median": np.median(data, axis=0),
        "mean": data.mean(axis=0),
        "std": std,
    }


def write_traces_csv(path, traces):
    d_u = traces[0].controls.shape[1] if traces else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "step", "gt_distance", "latent_V"] + [f"u_{i + 1}" for i in range(d_u)])
        for e, t in enumerate(traces):
            for k in range(len(t)):
                w.writerow([e, k + 1, repr(t.gt_distance[k]), repr(t.latent_v[k])] + [repr(x) for x in t.controls[k]])


def write_summary_csv(path, summary):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "median", "mean", "std"])
        for row in zip(summary["step"], summary["median"], summary["mean"], summary["std"]):
            w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])
