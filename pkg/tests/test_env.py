"""Episode protocol: reset/step/seed semantics, rewards, clipping."""

from pathlib import Path

import numpy as np
import pytest

from freqctl import EnvConfig, Event, compute_reward, make_env
from freqctl.errors import ConfigError, DimensionMismatch, EpisodeDone

CASES = Path(__file__).resolve().parents[1] / "src" / "freqctl" / "cases"
IEEE14 = CASES / "ieee14.case"
LOSSLESS = CASES / "ieee14_lossless.case"


@pytest.fixture()
def env():
    return make_env(EnvConfig(case_path=IEEE14))


# ---------------------------------------------------------------------------
# construction

def test_default_action_box(env):
    assert env.n_gen == 5
    assert np.array_equal(env.action_low, np.full(5, -0.1))
    assert np.array_equal(env.action_high, np.full(5, 0.1))


def test_action_interval():
    env = make_env(EnvConfig(case_path=IEEE14, n_actions=20))
    assert env.action_interval == pytest.approx(0.25)


def test_bad_window_rejected():
    with pytest.raises(ConfigError):
        make_env(EnvConfig(case_path=IEEE14, t_act_start=10.0, t_final=10.0))


def test_bad_action_box_rejected():
    with pytest.raises(ConfigError):
        make_env(EnvConfig(case_path=IEEE14, action_low=0.1, action_high=-0.1))


def test_unknown_disturbance_bus_rejected():
    with pytest.raises(ConfigError):
        make_env(EnvConfig(case_path=IEEE14,
                           disturbance=Event(time=1.0, bus=77, dp=0.6)))


# ---------------------------------------------------------------------------
# reward

def test_reward_values():
    cfg = EnvConfig(case_path=IEEE14)
    assert compute_reward(60.0, False, cfg) == 0.0
    assert compute_reward(59.9, True, cfg) == pytest.approx(-300.0)
    assert compute_reward(60.05, False, cfg) == pytest.approx(-5.0)
    # symmetric in the deviation sign
    assert compute_reward(60.1, True, cfg) == compute_reward(59.9, True, cfg)
    assert compute_reward(59.97, False, cfg) <= 0.0


# ---------------------------------------------------------------------------
# reset

def test_reset_observation_underfrequency(env):
    obs = env.reset()
    assert obs.shape == (5,)
    assert np.all(obs < 0.0)  # load increase pulls every machine down


def test_reset_zero_disturbance_flat():
    env = make_env(EnvConfig(case_path=IEEE14,
                             disturbance=Event(time=1.0, bus=4, dp=0.0)))
    obs = env.reset()
    assert np.max(np.abs(obs)) < 1e-6


def test_reset_deterministic_with_seed(env):
    env.seed(7)
    obs1 = env.reset()
    env.seed(7)
    obs2 = env.reset()
    assert np.array_equal(obs1, obs2)


def test_seed_returns_applied_value(env):
    assert env.seed(123) == 123


def test_randomized_disturbance_draws_differ():
    cfg = EnvConfig(case_path=IEEE14, randomize_disturbance=True,
                    dp_low=0.2, dp_high=0.8)
    env = make_env(cfg)
    env.seed(7)
    obs7 = env.reset()
    env.seed(8)
    obs8 = env.reset()
    assert not np.allclose(obs7, obs8)
    env.seed(7)
    assert np.array_equal(env.reset(), obs7)


# ---------------------------------------------------------------------------
# step

def test_episode_protocol_counts(env):
    obs = env.reset()
    total = 0.0
    for k in range(20):
        res = env.step(np.zeros(5))
        total += res.reward
        assert res.done == (k == 19)
        assert res.info["step"] == k + 1
    assert res.info["t"] == pytest.approx(10.0)
    assert res.info["cumulative_reward"] == pytest.approx(total)
    with pytest.raises(EpisodeDone):
        env.step(np.zeros(5))


def test_step_before_reset_raises(env):
    with pytest.raises(EpisodeDone):
        env.step(np.zeros(5))


def test_zero_action_mid_rewards_near_droop():
    env = make_env(EnvConfig(case_path=LOSSLESS))
    env.reset()
    govs = env.case.governors_by_gen()
    denom = sum(1 / g.r_droop for g in govs) + sum(g.d for g in env.case.generators)
    dev = 0.6 / denom * 60.0
    rewards = [env.step(np.zeros(5)).reward for _ in range(19)]
    assert all(abs(r + 100.0 * dev) < 0.15 * 100.0 * dev for r in rewards)


def test_action_clipping_and_info(env):
    env.reset()
    res = env.step(np.array([10.0, -10.0, 0.0, 0.05, 0.2]))
    assert res.info["n_clipped"] == 3
    assert np.all(res.info["offsets"] <= env.action_high + 1e-12)
    assert np.all(res.info["offsets"] >= env.action_low - 1e-12)


def test_cumulative_offsets_clamped(env):
    env.reset()
    pomax = env.case.governors_by_gen()[0].p_offset_max
    for _ in range(15):
        res = env.step(np.full(5, 0.1))
    # 15 * 0.1 = 1.5 exceeds the per-governor clamp
    assert np.all(res.info["offsets"] == pytest.approx(pomax))


def test_wrong_action_shape(env):
    env.reset()
    with pytest.raises(DimensionMismatch):
        env.step(np.zeros(3))


def test_nonfinite_action_rejected(env):
    env.reset()
    with pytest.raises(ValueError):
        env.step(np.array([np.nan, 0, 0, 0, 0]))


def test_inner_step_count_and_trace(env):
    env.reset()
    rows0 = env.trace().shape[0]
    assert rows0 == 501  # t=0 row plus 500 steps to t=5 at h=0.01
    env.step(np.zeros(5))
    assert env.trace().shape[0] == rows0 + 25  # ceil(0.25 / 0.01)
    assert env.trace()[-1, 0] == pytest.approx(5.25)


def test_episode_wall_time_exact():
    env = make_env(EnvConfig(case_path=IEEE14, n_actions=60))
    env.reset()
    for _ in range(60):
        res = env.step(np.zeros(5))
    assert res.info["t"] == 10.0  # exact, not approximate


def test_restoration_feasible(env):
    # total achievable offset must exceed the disturbance
    cfg = env.cfg
    assert cfg.n_actions * cfg.action_high * env.n_gen > cfg.disturbance.dp


def test_positive_offsets_raise_frequency(env):
    env.reset()
    res = None
    for _ in range(10):
        res = env.step(np.full(5, 0.024))  # total 1.2 > 0.6 disturbance
    assert res.info["f_coi_hz"] > 60.0  # overshoot above nominal
