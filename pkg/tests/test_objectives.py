import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from procl import objectives as ob
from procl.model import ModelConfig, init_params
from procl.tensor import Tape, backward, grad_check

from oracles import COMPONENTS, check_point, objective, random_point

SMALL = ModelConfig(frame_size=(8, 8), conv_channels=(3, 4), hidden=(6,))
GAINS = ob.PDGains.isotropic(10.0, 2.0, 2, 0.05)
Q = ob.LyapunovQ.isotropic(1.0, 0.1, 2)


def make_batch(tape, h, v, u, h_next, v_next, h_target=None, v_target=None):
    c = tape.const
    b = ob.LatentBatch(c(h), c(v), c(u), c(h_next), c(v_next))
    if h_target is not None:
        b.h_target, b.v_target = c(h_target), c(v_target)
    return b


# --- CPC ----------------------------------------------------------------------


def test_cpc_hand_example():
    p = np.array([[1.0, 0.5], [0.2, 0.8]])
    want = -(math.log(1 / 0.75) + math.log(0.8 / 0.5)) / 2
    assert ob.cpc_from_densities_np(p) == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(-0.3789, abs=1e-4)
    tape = Tape()
    assert float(ob.cpc_from_log_densities(tape.const(np.log(p))).value) == pytest.approx(want, abs=1e-12)


def test_cpc_single_sample_and_equal_densities():
    tape = Tape()
    assert float(ob.cpc_from_log_densities(tape.const(np.array([[-3.0]]))).value) == 0.0
    assert float(ob.cpc_from_log_densities(tape.const(np.full((5, 5), -2.0))).value) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([2, 8, 64]), st.integers(0, 2**32 - 1))
def test_cpc_lower_bound(k, seed):
    rng = np.random.default_rng(seed)
    logp = rng.normal(scale=rng.uniform(0.1, 50), size=(k, k))
    tape = Tape()
    assert float(ob.cpc_from_log_densities(tape.const(logp)).value) >= -math.log(k) - 1e-12


def test_cpc_bound_attained_when_diagonal_dominates():
    k = 8
    logp = np.full((k, k), -1e4)
    np.fill_diagonal(logp, 0.0)
    tape = Tape()
    assert float(ob.cpc_from_log_densities(tape.const(logp)).value) == pytest.approx(-math.log(k))


# --- consistency and curvature ----------------------------------------------------


def _identity_dynamics_params(cfg):
    # out layer zero -> g(h, v, u) = v exactly, unit variance
    params = init_params(cfg, np.random.default_rng(0))
    params["dyn.out.w"][:] = 0.0
    params["dyn.out.b"][:] = 0.0
    return params


def test_consistency_perfect_prediction_unit_variance():
    params = _identity_dynamics_params(SMALL)
    h = np.array([[0.1, 0.2]])
    v = np.array([[1.0, -1.0]])
    tape = Tape()
    b = make_batch(tape, h, v, np.zeros((1, 2)), h + 0.05 * v, v)
    val = float(ob.consistency_loss(tape, params, SMALL, b).value)
    assert val == pytest.approx(2 * math.log(2 * math.pi))
    assert val == pytest.approx(3.6758, abs=1e-4)


def test_consistency_monotone_and_batch_of_one():
    params = _identity_dynamics_params(SMALL)
    rng = np.random.default_rng(1)
    h, v = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    base_next = h + 0.05 * v
    r = rng.normal(size=(3, 2))
    vals = []
    for scale in (0.0, 0.5, 1.0, 2.0):
        tape = Tape()
        vals.append(float(ob.consistency_loss(tape, params, SMALL,
                                              make_batch(tape, h, v, np.zeros((3, 2)), base_next + scale * r, v)).value))
    assert vals == sorted(vals)
    singles = []
    for i in range(3):
        tape = Tape()
        b = make_batch(tape, h[i:i + 1], v[i:i + 1], np.zeros((1, 2)), base_next[i:i + 1] + r[i:i + 1], v[i:i + 1])
        singles.append(float(ob.consistency_loss(tape, params, SMALL, b).value))
    assert np.mean(singles) == pytest.approx(vals[2])


def test_curvature_zero_for_linear_dynamics_and_zero_sigma():
    params = _identity_dynamics_params(SMALL)
    rng = np.random.default_rng(2)
    h, v, u = (rng.normal(size=(4, 2)) for _ in range(3))
    tape = Tape()
    b = make_batch(tape, h, v, u, h, v)
    assert float(ob.curvature_loss(tape, params, SMALL, b, 0.1, rng).value) == pytest.approx(0.0, abs=1e-14)
    params = init_params(SMALL, rng)
    tape = Tape()
    b = make_batch(tape, h, v, u, h, v)
    assert float(ob.curvature_loss(tape, params, SMALL, b, 0.0, rng).value) == pytest.approx(0.0, abs=1e-14)


def test_taylor_remainder_scalar_oracle():
    # the curvature measure for f(z) = z^2 at z = 1, eta = 0.1
    f, df = (lambda z: z * z), (lambda z: 2 * z)
    assert abs(f(1.1) - df(1.1) * 0.1 - f(1.0)) == pytest.approx(0.01)


def test_curvature_positive_for_nonlinear_dynamics():
    params = init_params(SMALL, np.random.default_rng(3))
    params["dyn.out.w"] *= 100.0
    rng = np.random.default_rng(3)
    h, v, u = (rng.normal(size=(4, 2)) for _ in range(3))
    tape = Tape()
    b = make_batch(tape, h, v, u, h, v)
    assert float(ob.curvature_loss(tape, params, SMALL, b, 0.5, rng).value) > 1e-3


# --- PC3 combination ---------------------------------------------------------------


def _random_batch_parts(seed, k=4):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(k, 2)) for _ in range(5)]


def _pc3(weights, seed=0):
    params = init_params(SMALL, np.random.default_rng(seed))
    tape = Tape()
    b = make_batch(tape, *_random_batch_parts(seed))
    return {k: float(x.value) for k, x in
            ob.pc3_components(tape, params, SMALL, b, weights, np.random.default_rng(9)).items()}


def test_pc3_weighted_sum():
    parts = _pc3(ob.LossWeights())
    assert parts["pc3"] == pytest.approx(parts["cpc"] + parts["cons"] + 10 * parts["curv"])


def test_pc3_zero_weights_and_linearity():
    zero = ob.LossWeights(lambda_cpc=0, lambda_cons=0, lambda_curv=0)
    assert _pc3(zero)["pc3"] == 0.0
    one = _pc3(ob.LossWeights(lambda_cpc=1, lambda_cons=2, lambda_curv=3))["pc3"]
    two = _pc3(ob.LossWeights(lambda_cpc=2, lambda_cons=4, lambda_curv=6))["pc3"]
    assert two == pytest.approx(2 * one)


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        ob.LossWeights(lambda_r=-1.0)


# --- hindsight targets ---------------------------------------------------------------


def test_hindsight_examples():
    z = np.zeros(2)
    np.testing.assert_allclose(ob.hindsight_target_np(z, z, np.array([10.0, 0]), z, GAINS), [1.0, 0.0])
    h, v = np.array([0.3, -0.7]), np.array([0.2, 0.1])
    np.testing.assert_allclose(ob.hindsight_target_np(h, v, np.zeros(2), v, GAINS), h)
    ht = ob.hindsight_target_np(np.array([1.0, 1.0]), np.array([0.5, 0.0]), np.array([2.0, 0.0]), z, GAINS)
    np.testing.assert_allclose(ht, [1.3, 1.0], rtol=0, atol=1e-15)


def test_hindsight_round_trip_1000():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        gains = ob.PDGains(rng.uniform(0.1, 50, 2), rng.uniform(0.1, 20, 2), 0.05)
        h, v, u, vt = (rng.normal(scale=3, size=2) for _ in range(4))
        ht = ob.hindsight_target_np(h, v, u, vt, gains)
        worst = max(worst, np.max(np.abs(ob.pd_control_np(h, v, ht, vt, gains) - u)))
    assert worst < 1e-9


def test_hindsight_tape_matches_numpy():
    rng = np.random.default_rng(1)
    h, v, u, vt = (rng.normal(size=(6, 2)) for _ in range(4))
    tape = Tape()
    got = ob.hindsight_target(tape.const(h), tape.const(v), tape.const(u), tape.const(vt), GAINS).value
    np.testing.assert_allclose(got, ob.hindsight_target_np(h, v, u, vt, GAINS), rtol=1e-14)


def test_gains_must_be_positive():
    with pytest.raises(ValueError):
        ob.PDGains(np.array([10.0, 0.0]), np.array([2.0, 2.0]), 0.05)


# --- Lyapunov ----------------------------------------------------------------------


def test_lyapunov_value_examples():
    assert ob.lyapunov_value_np(np.zeros(2), np.zeros(2), Q) == 0.0
    assert ob.lyapunov_value_np(np.array([1.0, 0]), np.zeros(2), Q) == 1.0
    assert ob.lyapunov_value_np(np.array([1.0, 1.0]), np.array([2.0, 0]), Q) == pytest.approx(2.4)


def test_lyapunov_positive_definite():
    rng = np.random.default_rng(0)
    errs = rng.normal(size=(1000, 4)) * 10.0 ** rng.uniform(-6, 3, size=(1000, 1))
    assert np.all(ob.lyapunov_value_np(errs[:, :2], errs[:, 2:], Q) > 0)


def test_lyapunov_q_rejects_non_positive():
    with pytest.raises(ValueError):
        ob.LyapunovQ(np.array([1.0, 0.0]), np.array([0.1, 0.1]))


def _risk(h, v, hn, vn, ht, vt, dt=0.05):
    tape = Tape()
    b = make_batch(tape, h, v, np.zeros_like(h), hn, vn, ht, vt)
    return float(ob.lyapunov_risk(b, Q, dt).value)


def test_risk_hand_examples():
    z = np.zeros((1, 2))
    # stationary
    h = np.array([[0.4, 0.1]])
    assert _risk(h, z, h, z, z, z) == 0.0
    # V: 1.0 -> 0.5 contracts
    assert _risk(np.array([[1.0, 0]]), z, np.array([[math.sqrt(0.5), 0]]), z, z, z) == 0.0
    # V: 1.0 -> 1.5 expands: (0.5 / 0.05) = 10
    assert _risk(np.array([[1.0, 0]]), z, np.array([[math.sqrt(1.5), 0]]), z, z, z) == pytest.approx(10.0)


def test_risk_requires_targets():
    tape = Tape()
    b = make_batch(tape, *_random_batch_parts(0))
    with pytest.raises(ValueError):
        ob.lyapunov_risk(b, Q, 0.05)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99))
def test_risk_non_negative_and_scale(seed, c):
    parts = [np.random.default_rng([seed, i]).normal(size=(8, 2)) for i in range(6)]
    r = _risk(*parts)
    assert r >= 0.0
    assert _risk(*[c * p for p in parts]) == pytest.approx(c * c * r, rel=1e-10, abs=1e-14)
    assert ob.lyapunov_risk_np(*parts, Q, 0.05) == pytest.approx(r, rel=1e-12)


def test_risk_zero_on_contracting_batch():
    rng = np.random.default_rng(5)
    h, v, ht, vt = (rng.normal(size=(16, 2)) for _ in range(4))
    hn, vn = ht + 0.5 * (h - ht), vt + 0.5 * (v - vt)
    assert _risk(h, v, hn, vn, ht, vt) == 0.0


# --- total loss and gradients -----------------------------------------------------------


def _labeled(tape, seed, params):
    rng = np.random.default_rng(seed)
    frames = tape.const(rng.random((12, 8, 8)))
    u = rng.uniform(-1, 1, (4, 2))
    b = ob.encode_batch(tape, params, SMALL, frames.value[:4], frames.value[4:8], frames.value[8:], u,
                        0.01 * rng.standard_normal((4, 4)))
    return ob.label_batch(tape, b, rng.integers(0, 4, 4), GAINS)


def test_total_loss_lambda_r_zero_is_pc3():
    params = init_params(SMALL, np.random.default_rng(0))
    tape = Tape()
    b = _labeled(tape, 0, params)
    w = ob.LossWeights(lambda_r=0.0)
    parts = ob.total_loss(tape, params, SMALL, b, w, GAINS, Q, np.random.default_rng(1))
    assert float(parts["total"].value) == float(parts["pc3"].value)


def test_total_loss_risk_only_zero_on_contracting():
    params = init_params(SMALL, np.random.default_rng(0))
    rng = np.random.default_rng(5)
    h, v, ht, vt = (rng.normal(size=(4, 2)) for _ in range(4))
    tape = Tape()
    b = make_batch(tape, h, v, np.zeros((4, 2)), ht + 0.5 * (h - ht), vt + 0.5 * (v - vt), ht, vt)
    parts = ob.total_loss(tape, params, SMALL, b, ob.LossWeights(lambda_pc3=0.0), GAINS, Q, rng)
    assert float(parts["total"].value) == 0.0


@pytest.mark.parametrize("component", COMPONENTS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_objective_grad_check(component, seed):
    params = random_point(seed)
    assert grad_check(objective(component, seed, params), check_point(component, params)) < 1e-4


def test_risk_invariant_to_latent_shift():
    # the coordinates left out of the gradient check above really are flat
    params = random_point(7)
    f = objective("risk", 7, params)
    shifted = dict(params)
    shifted["enc.head.b"] = params["enc.head.b"] + np.array([0.3, -0.2])
    g = objective("risk", 7, shifted)
    a, b = float(f(Tape()).value), float(g(Tape()).value)
    assert a == pytest.approx(b, rel=1e-9, abs=1e-9)
    tape = Tape()
    out = f(tape, **{n: tape.param(n, v) for n, v in params.items()})
    assert np.all(np.abs(backward(tape, out)["enc.head.b"]) < 1e-9)


def test_curvature_invariant_to_output_bias():
    params = random_point(8)
    tape = Tape()
    out = objective("curv", 8, params)(tape, **{n: tape.param(n, v) for n, v in params.items()})
    assert np.all(np.abs(backward(tape, out)["dyn.out.b"]) < 1e-9)


def test_target_gradient_switch():
    params = init_params(SMALL, np.random.default_rng(0))

    def risk_grad(flow):
        tape = Tape()
        rng = np.random.default_rng(7)
        u = rng.uniform(-1, 1, (4, 2))
        fr = rng.random((12, 8, 8))
        b = ob.encode_batch(tape, params, SMALL, fr[:4], fr[4:8], fr[8:], u)
        ob.label_batch(tape, b, rng.integers(0, 4, 4), GAINS, target_grad=flow)
        return backward(tape, ob.lyapunov_risk(b, Q, 0.05))["enc.head.w"]

    a, b = risk_grad(True), risk_grad(False)
    assert np.any(a != b)
