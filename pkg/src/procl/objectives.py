"""Training objectives: the three PC3 terms, hindsight PD targets and the
latent PD-control Lyapunov risk.

Tape functions take :class:`procl.tensor.Var` arguments and build part of a
differentiable graph. The ``*_np`` helpers evaluate the same formulas on
plain arrays and are what the control runtime and the tests use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import embed_tape, log_density_tape, predict_tape, velocity_tape
from .tensor import concat, logsumexp, norm, relu, take


@dataclass(frozen=True)
class PDGains:
    kp: np.ndarray
    kd: np.ndarray
    dt: float

    def __post_init__(self):
        kp = np.atleast_1d(np.asarray(self.kp, dtype=np.float64))
        kd = np.atleast_1d(np.asarray(self.kd, dtype=np.float64))
        if kp.shape != kd.shape:
            raise ValueError("kp and kd must have the same dimension")
        if np.any(kp <= 0) or np.any(kd <= 0):
            raise ValueError("PD gains must be strictly positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "kp", kp)
        object.__setattr__(self, "kd", kd)

    @classmethod
    def isotropic(cls, kp=10.0, kd=2.0, dim=2, dt=0.05):
        return cls(np.full(dim, kp), np.full(dim, kd), dt)


@dataclass(frozen=True)
class LyapunovQ:
    qh: np.ndarray
    qv: np.ndarray

    def __post_init__(self):
        qh = np.atleast_1d(np.asarray(self.qh, dtype=np.float64))
        qv = np.atleast_1d(np.asarray(self.qv, dtype=np.float64))
        if np.any(qh <= 0) or np.any(qv <= 0):
            raise ValueError("Lyapunov weights must be strictly positive")
        object.__setattr__(self, "qh", qh)
        object.__setattr__(self, "qv", qv)

    @classmethod
    def isotropic(cls, qh=1.0, qv=0.1, dim=2):
        return cls(np.full(dim, qh), np.full(dim, qv))


@dataclass(frozen=True)
class LossWeights:
    lambda_pc3: float = 1.0
    lambda_r: float = 10.0
    lambda_cpc: float = 1.0
    lambda_cons: float = 1.0
    lambda_curv: float = 10.0
    eps_latent: float = 0.01
    sigma_curv: float = 0.1

    def __post_init__(self):
        for name, val in vars(self).items():
            if val < 0 or not math.isfinite(val):
                raise ValueError(f"{name} must be a non-negative finite number, got {val}")


@dataclass
class LatentBatch:
    """K transitions in latent space, as tape variables.

    ``h_next``/``v_next`` already carry the training noise. Targets are
    filled in by :func:`label_batch`.
    """

    h: object
    v: object
    u: object
    h_next: object
    v_next: object
    h_target: object = None
    v_target: object = None

    def __len__(self):
        return self.h.shape[0]


# --- PD law and its inverse -------------------------------------------------


def pd_control_np(h, v, h_target, v_target, gains, u_max=np.inf):
    u = gains.kp * (np.asarray(h_target) - h) + gains.kd * (np.asarray(v_target) - v)
    return np.clip(u, -u_max, u_max)


def hindsight_target_np(h, v, u, v_target, gains):
    """Latent configuration target under which the PD law would have issued ``u``."""
    return (u + gains.kp * h - gains.kd * (v_target - v)) / gains.kp


def hindsight_target(h, v, u, v_target, gains):
    return (u + gains.kp * h - gains.kd * (v_target - v)) * (1.0 / gains.kp)


# --- Lyapunov function --------------------------------------------------------


def lyapunov_value_np(h_err, v_err, q):
    h_err = np.asarray(h_err, dtype=np.float64)
    v_err = np.asarray(v_err, dtype=np.float64)
    return np.sum(q.qh * h_err * h_err, axis=-1) + np.sum(q.qv * v_err * v_err, axis=-1)


def lyapunov_value(h_err, v_err, q):
    return (q.qh * (h_err * h_err)).sum(axis=-1) + (q.qv * (v_err * v_err)).sum(axis=-1)


def lyapunov_risk(batch, q, dt):
    """Mean positive part of the finite-difference Lie derivative of V toward each target."""
    if batch.h_target is None or batch.v_target is None:
        raise ValueError("batch has no pseudo-targets; label it first")
    v_next = lyapunov_value(batch.h_next - batch.h_target, batch.v_next - batch.v_target, q)
    v_now = lyapunov_value(batch.h - batch.h_target, batch.v - batch.v_target, q)
    return relu((v_next - v_now) * (1.0 / dt)).mean()


def lyapunov_risk_np(h, v, h_next, v_next, h_target, v_target, q, dt):
    v1 = lyapunov_value_np(np.asarray(h_next) - h_target, np.asarray(v_next) - v_target, q)
    v0 = lyapunov_value_np(np.asarray(h) - h_target, np.asarray(v) - v_target, q)
    return float(np.mean(np.maximum(0.0, (v1 - v0) / dt)))


# --- PC3 terms ----------------------------------------------------------------


def cpc_from_log_densities(logp):
    """Contrastive loss from a (K, K) matrix ``logp[i, j] = ln F(z'_i | z_j, u_j)``.

    Negatives are the whole minibatch, positive included, so the loss is
    bounded below by ``-ln K``.
    """
    k = logp.shape[0]
    diag = take(logp.reshape(-1), np.arange(k) * (k + 1))
    return -(diag - logsumexp(logp, axis=1) + math.log(k)).mean()


def cpc_from_densities_np(p):
    logp = np.log(np.asarray(p, dtype=np.float64))
    k = logp.shape[0]
    m = logp.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logp - m).sum(axis=1, keepdims=True)))[:, 0]
    return float(-np.mean(np.diag(logp) - lse + math.log(k)))


def _means(tape, params, cfg, batch):
    h1, v1 = predict_tape(tape, params, cfg, batch.h, batch.v, batch.u, cfg.dt)
    return concat([h1, v1], axis=-1)


def cpc_loss(tape, params, cfg, batch, means=None):
    means = _means(tape, params, cfg, batch) if means is None else means
    k, d = means.shape
    x = concat([batch.h_next, batch.v_next], axis=-1)
    logp = log_density_tape(tape, params, x.reshape(k, 1, d), means.reshape(1, k, d))
    return cpc_from_log_densities(logp)


def consistency_loss(tape, params, cfg, batch, means=None):
    means = _means(tape, params, cfg, batch) if means is None else means
    x = concat([batch.h_next, batch.v_next], axis=-1)
    return -log_density_tape(tape, params, x, means).mean()


def curvature_loss(tape, params, cfg, batch, sigma, rng):
    """Mean first-order Taylor error of the latent mean map under N(0, sigma^2) perturbations.

    The Jacobian-vector product is exact (forward tangent propagation).
    """
    k, d_h = batch.h.shape
    d_u = batch.u.shape[1]
    eta = sigma * rng.standard_normal((k, 2 * d_h + d_u))
    eh, ev, eu = eta[:, :d_h], eta[:, d_h:2 * d_h], eta[:, 2 * d_h:]
    ht, vt, ut = batch.h + eh, batch.v + ev, batch.u + eu
    ehv, evv, euv = tape.const(eh), tape.const(ev), tape.const(eu)
    g_tilde, jg = velocity_tape(tape, params, cfg, ht, vt, ut, tangent=(ehv, evv, euv))
    g_base = velocity_tape(tape, params, cfg, batch.h, batch.v, batch.u)
    dt = cfg.dt
    # f(z~) - J(z~) eta - f(z) for f(z, u) = (h + dt*g, g)
    r_h = (ht + dt * g_tilde) - (ehv + dt * jg) - (batch.h + dt * g_base)
    r_v = g_tilde - jg - g_base
    return norm(concat([r_h, r_v], axis=-1), axis=-1).mean()


# --- batch assembly -----------------------------------------------------------


def encode_batch(tape, params, cfg, frames_prev, frames_cur, frames_next, u, noise=None):
    """Encode the three frames of each transition into a :class:`LatentBatch`.

    ``noise`` is a (K, 2*d_h) array added to the next-state encoding.
    """
    k = frames_cur.shape[0]
    frames = tape.const(np.concatenate([frames_prev, frames_cur, frames_next]).astype(np.float64))
    e = embed_tape(tape, params, cfg, frames)
    e_prev, e_cur, e_next = e[0:k], e[k:2 * k], e[2 * k:3 * k]
    inv_dt = 1.0 / cfg.dt
    h, v = e_cur, (e_cur - e_prev) * inv_dt
    h_next, v_next = e_next, (e_next - e_cur) * inv_dt
    if noise is not None:
        d = cfg.d_h
        h_next = h_next + noise[:, :d]
        v_next = v_next + noise[:, d:]
    return LatentBatch(h, v, tape.input("u", np.asarray(u, dtype=np.float64)), h_next, v_next)


def label_batch(tape, batch, prior_idx, gains, target_grad=True):
    """Attach hindsight targets: ``v_target = v[prior_idx]``, ``h_target`` by inverting the PD law.

    With ``target_grad=False`` both targets enter the graph as constants.
    """
    v_target = take(batch.v, prior_idx)
    h_target = hindsight_target(batch.h, batch.v, batch.u, v_target, gains)
    if not target_grad:
        v_target, h_target = tape.const(v_target.value), tape.const(h_target.value)
    batch.v_target, batch.h_target = v_target, h_target
    return batch


def pc3_loss(tape, params, cfg, batch, weights, rng):
    parts = pc3_components(tape, params, cfg, batch, weights, rng)
    return parts["pc3"]


def pc3_components(tape, params, cfg, batch, weights, rng):
    means = _means(tape, params, cfg, batch)
    with tape.scope("cpc"):
        cpc = cpc_loss(tape, params, cfg, batch, means)
    with tape.scope("cons"):
        cons = consistency_loss(tape, params, cfg, batch, means)
    with tape.scope("curv"):
        curv = curvature_loss(tape, params, cfg, batch, weights.sigma_curv, rng)
    pc3 = weights.lambda_cpc * cpc + weights.lambda_cons * cons + weights.lambda_curv * curv
    return {"cpc": cpc, "cons": cons, "curv": curv, "pc3": pc3}


def total_loss(tape, params, cfg, batch, weights, gains, q, rng):
    """ProCL objective ``lambda_pc3 * L_pc3 + lambda_r * R``; returns every component."""
    parts = pc3_components(tape, params, cfg, batch, weights, rng)
    with tape.scope("risk"):
        risk = lyapunov_risk(batch, q, gains.dt)
    parts["risk"] = risk
    parts["total"] = weights.lambda_pc3 * parts["pc3"] + weights.lambda_r * risk
    return parts

