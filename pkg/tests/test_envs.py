import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from procl.envs import (
    BadMagicError,
    GroundTruthState,
    TruncatedError,
    VersionError,
    collect_random,
    load_dataset,
    make_env,
    render_pointmass,
    save_dataset,
    step_pointmass,
    step_reacher,
)


def S(config, velocity=(0.0, 0.0)):
    return GroundTruthState(np.array(config, float), np.array(velocity, float))


def test_pointmass_step_by_hand():
    s = step_pointmass(S([0, 0]), [1.0, 0.0], dt=0.05)
    np.testing.assert_allclose(s.velocity, [0.05, 0.0], rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.config, [0.0025, 0.0], rtol=0, atol=1e-15)


def test_pointmass_rest_is_fixed_point():
    s0 = S([0.1, -0.2])
    assert step_pointmass(s0, [0.0, 0.0]) == s0


@pytest.mark.parametrize("ux", [0.0, 0.5, 1.0])
def test_pointmass_wall_clamp(ux):
    s = step_pointmass(S([0.3, 0.0], [1.0, 0.0]), [ux, 0.0])
    np.testing.assert_array_equal(s.config, [0.3, 0.0])
    assert s.velocity[0] == 0.0


def test_step_rejects_non_finite_and_out_of_range():
    with pytest.raises(ValueError):
        step_pointmass(S([np.nan, 0.0]), [0.0, 0.0])
    with pytest.raises(ValueError):
        step_pointmass(S([0.0, 0.0]), [1.5, 0.0])


def test_reacher_rest_is_fixed_point():
    s0 = S([0.0, np.radians(80)])
    assert step_reacher(s0, [0.0, 0.0]) == s0


def test_reacher_root_limit():
    s = step_reacher(S([np.radians(160), 0.5], [2.0, 0.0]), [1.0, 0.0])
    assert s.config[0] == np.radians(160)
    assert s.velocity[0] == 0.0


def test_reacher_step_by_hand():
    s = step_reacher(S([0.0, 0.0]), [1.0, 0.0], dt=0.02)
    np.testing.assert_allclose(s.velocity, [0.02, 0.0], rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.config, [0.0004, 0.0], rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(["pointmass", "reacher"]), st.integers(0, 2**32 - 1))
def test_bang_bang_controls_never_leave_bounds(name, seed):
    env = make_env(name)
    rng = np.random.default_rng(seed)
    state = env.sample_state(rng)
    for _ in range(300):
        state = env.step(state, rng.choice([-1.0, 1.0], size=2))
        assert env.in_bounds(state.config)
        assert np.all(np.isfinite(state.velocity))


def test_dynamics_deterministic():
    env = make_env("pointmass")
    s = S([0.1, 0.2], [0.3, -0.1])
    assert env.step(s, [0.2, -0.7]) == env.step(s, [0.2, -0.7])


def test_true_state_pd_reaches_target():
    env = make_env("pointmass")
    rng = np.random.default_rng(0)
    for _ in range(50):
        state, target = env.sample_state(rng), env.sample_state(rng).config
        for _ in range(200):
            u = np.clip(10.0 * (target - state.config) - 2.0 * state.velocity, -1, 1)
            state = env.step(state, u)
        assert np.linalg.norm(state.config - target) < 0.01


def test_render_center_peak():
    f = render_pointmass(S([0.0, 0.0]))
    assert f.shape == (32, 32) and f.dtype == np.float32
    assert np.unravel_index(np.argmax(f), f.shape) == (16, 16)
    assert f[16, 16] == 1.0
    assert f.min() >= 0.0 and f.max() <= 1.0


def test_render_corner_truncation():
    center = render_pointmass(S([0.0, 0.0]))
    corner = render_pointmass(S([0.3, 0.3]))
    r, c = np.unravel_index(np.argmax(corner), corner.shape)
    assert r <= 2 and c >= 29
    assert corner.sum() < center.sum()


def test_render_deterministic():
    env = make_env("reacher")
    s = S([0.3, 1.0])
    assert env.render(s).tobytes() == env.render(s).tobytes()
    f = env.render(s)
    assert f.min() >= 0.0 and f.max() <= 1.0 and f.max() == 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(0, 2 * np.pi))
def test_render_distinguishes_states_two_pixels_apart(x, y, ang):
    px = 0.6 / 32
    other = np.clip([x + 2 * px * np.cos(ang), y + 2 * px * np.sin(ang)], -0.3, 0.3)
    if np.linalg.norm(other - [x, y]) < 2 * px - 1e-12:
        return  # clipped against a wall
    a, b = render_pointmass(S([x, y])), render_pointmass(S(other))
    assert np.linalg.norm(a - b) > 0


def test_collect_counts_and_bounds():
    ds = collect_random(make_env("pointmass"), 10000, 50, seed=7)
    assert len(ds) == 9600
    assert len(np.unique(ds.episodes)) == 200
    assert np.all(np.abs(ds.controls) <= 1.0)
    # three consecutive frames of one episode
    assert np.all(np.diff(ds.indices.astype(int), axis=1) == 1)
    assert np.all(ds.indices[:, 0] // 50 == ds.indices[:, 2] // 50)


def test_collect_reproducible():
    env = make_env("reacher")
    assert collect_random(env, 300, 30, seed=3) == collect_random(env, 300, 30, seed=3)
    assert not collect_random(env, 300, 30, seed=3) == collect_random(env, 300, 30, seed=4)


def test_collect_records_follow_dynamics():
    env = make_env("pointmass")
    ds = collect_random(env, 200, 20, seed=1)
    # the training view carries no ground truth
    assert not any("truth" in f.name for f in dataclasses.fields(ds.training_view()))
    gt = ds.ground_truth()
    for r in range(len(ds)):
        frame = env.render(S(gt[r, 2:]))
        np.testing.assert_array_equal(ds.frames[ds.indices[r, 2]], frame)


def test_collect_rejects_bad_sizes():
    env = make_env("pointmass")
    with pytest.raises(ValueError):
        collect_random(env, 10, 2)
    with pytest.raises(ValueError):
        collect_random(env, 10, 20)


@pytest.fixture
def small_dataset():
    # 12 steps in episodes of 6 -> 2 episodes x 4 records; trim to 10 records below
    return collect_random(make_env("pointmass"), 18, 6, seed=5)


def test_dataset_round_trip(tmp_path, small_dataset):
    path = tmp_path / "d.bin"
    save_dataset(small_dataset, path)
    assert load_dataset(path) == small_dataset
    assert path.read_bytes()[:8] == b"PROCLDS1"


def test_dataset_ten_record_round_trip(tmp_path):
    ds = collect_random(make_env("reacher"), 25, 5, seed=2)
    assert len(ds) == 15
    path = tmp_path / "d.bin"
    save_dataset(ds, path)
    assert load_dataset(path) == ds


def test_dataset_bad_magic(tmp_path, small_dataset):
    path = tmp_path / "d.bin"
    save_dataset(small_dataset, path)
    raw = bytearray(path.read_bytes())
    raw[0:8] = b"NOTADATA"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError, match="bad magic"):
        load_dataset(path)


def test_dataset_truncated(tmp_path, small_dataset):
    path = tmp_path / "d.bin"
    save_dataset(small_dataset, path)
    raw = path.read_bytes()
    rec_size = 3 * 4 + 2 * 8 + 4 + 4 * 8
    path.write_bytes(raw[:-rec_size])
    with pytest.raises(TruncatedError, match="truncated"):
        load_dataset(path)


def test_dataset_version_mismatch(tmp_path, small_dataset):
    path = tmp_path / "d.bin"
    save_dataset(small_dataset, path)
    raw = bytearray(path.read_bytes())
    raw[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_dataset(path)
