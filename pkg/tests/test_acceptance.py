"""Acceptance gate: one test per criterion, each printing a pass line.

The training criteria (9-12) share three session-scoped batches of full
DDPG runs; with the compiled kernels the whole module takes a few minutes.
Run with `-s -v` to watch the per-criterion lines.
"""

import math
from pathlib import Path

import numpy as np
import pytest

from freqctl import (ControlInput, DdpgConfig, EnvConfig, Event, SimConfig,
                     coi_frequency, compute_reward, init_dynamics, load_case,
                     make_env, run_until, save_checkpoint, solve_power_flow)
from freqctl.agent import DdpgAgent, run_training
from freqctl.expcli import evaluate, main

CASES = Path(__file__).resolve().parents[1] / "src" / "freqctl" / "cases"
IEEE14 = CASES / "ieee14.case"
LOSSLESS = CASES / "ieee14_lossless.case"
TWOBUS = CASES / "twobus.case"

SEEDS = (0, 1, 2)


def _report(num: int, text: str) -> None:
    print(f"PASS criterion {num}: {text}")


# ---------------------------------------------------------------------------
# shared training fixtures

def _train_batch(tmp_dir: Path, n_actions: int, learning_start: int):
    env_cfg = EnvConfig(case_path=IEEE14, n_actions=n_actions)
    agent_cfg = DdpgConfig(learning_start=learning_start)
    out = []
    for seed in SEEDS:
        log, agent, _ = run_training(env_cfg, agent_cfg, seed=seed)
        ckpt = tmp_dir / f"n{n_actions}_ls{learning_start}_s{seed}.ckpt"
        save_checkpoint(agent, ckpt)
        out.append((log, ckpt))
    return out


@pytest.fixture(scope="session")
def runs_default(tmp_path_factory):
    """n_actions=20, learning_start=200, 150 episodes, three seeds."""
    return _train_batch(tmp_path_factory.mktemp("default"), 20, 200)


@pytest.fixture(scope="session")
def runs_n60(tmp_path_factory):
    return _train_batch(tmp_path_factory.mktemp("n60"), 60, 200)


@pytest.fixture(scope="session")
def runs_ls0(tmp_path_factory):
    return _train_batch(tmp_path_factory.mktemp("ls0"), 20, 0)


# ---------------------------------------------------------------------------

def test_criterion_01_power_flow():
    pf = solve_power_flow(load_case(IEEE14))
    assert pf.iterations <= 10
    assert pf.max_mismatch <= 1e-8
    pf2 = solve_power_flow(load_case(TWOBUS))
    theta2 = math.asin(-0.1) / 2.0
    v2 = math.cos(theta2)
    assert abs(pf2.v_ang[1] - theta2) < 1e-6
    assert abs(pf2.v_mag[1] - v2) < 1e-6
    _report(1, f"ieee14 in {pf.iterations} iterations "
               f"(mismatch {pf.max_mismatch:.1e}); 2-bus matches the "
               f"analytic solution to 1e-6")


def test_criterion_02_equilibrium(capfd):
    import time
    case = load_case(IEEE14)
    minit, state = init_dynamics(case, solve_power_flow(case))
    t0 = time.perf_counter()
    s, _, _ = run_until(state, ControlInput.zero(case.n_gen), case,
                        SimConfig(), 10.0, minit)
    wall = time.perf_counter() - t0
    peak = float(np.max(np.abs(s.domega)))
    assert peak < 1e-6
    assert wall < 1.0
    _report(2, f"10 s undisturbed run: max|domega| = {peak:.2e} pu "
               f"in {wall:.2f} s")


def test_criterion_03_integrator_order():
    case = load_case(IEEE14)
    minit, state = init_dynamics(case, solve_power_flow(case))
    u = ControlInput.zero(case.n_gen)
    ev = Event(time=1.0, bus=4, dp=0.6)

    def endpoint(h):
        cfg = SimConfig(h_nominal=h, newton_tol=1e-12)
        s, _, _ = run_until(state, u, case, cfg, 3.0, minit, events=[ev])
        return np.concatenate([s.delta, s.domega, s.pv, s.pm, s.v_mag, s.v_ang])

    e_h = np.linalg.norm(endpoint(0.02) - endpoint(0.0025))
    e_h2 = np.linalg.norm(endpoint(0.01) - endpoint(0.0025))
    ratio = e_h / e_h2
    assert 3.5 <= ratio <= 4.5
    _report(3, f"h vs h/2 global-error ratio {ratio:.2f} (expected ~4.2)")


def test_criterion_04_droop_oracle():
    case = load_case(LOSSLESS)
    minit, state = init_dynamics(case, solve_power_flow(case))
    s, _, _ = run_until(state, ControlInput.zero(case.n_gen), case,
                        SimConfig(), 60.0, minit,
                        events=[Event(time=1.0, bus=4, dp=0.6)])
    govs = case.governors_by_gen()
    denom = sum(1.0 / g.r_droop for g in govs) + sum(g.d for g in case.generators)
    f_pred = case.f_nominal * (1.0 - 0.6 / denom)
    f_sim = coi_frequency(s, case)
    assert abs(f_sim - f_pred) < 0.01
    _report(4, f"simulated steady frequency {f_sim:.4f} Hz vs droop formula "
               f"{f_pred:.4f} Hz (diff {abs(f_sim - f_pred):.2e})")


def test_criterion_05_reward_units():
    cfg = EnvConfig(case_path=IEEE14)
    # exact up to the float64 representation of the decimal inputs
    assert compute_reward(60.0, False, cfg) == 0.0
    assert compute_reward(59.9, True, cfg) == -3000.0 * abs(59.9 - 60.0)
    assert compute_reward(59.9, True, cfg) == pytest.approx(-300.0, abs=1e-9)
    assert compute_reward(60.05, False, cfg) == -100.0 * abs(60.05 - 60.0)
    assert compute_reward(60.05, False, cfg) == pytest.approx(-5.0, abs=1e-9)
    _report(5, "rewards (60, mid)=0, (59.9, final)=-300, (60.05, mid)=-5")


def test_criterion_06_episode_protocol():
    env = make_env(EnvConfig(case_path=IEEE14))
    env.seed(0)
    env.reset()
    rewards = []
    for k in range(20):
        res = env.step(np.zeros(5))
        rewards.append(res.reward)
        assert res.done == (k == 19)
    assert res.info["t"] == 10.0
    assert res.info["cumulative_reward"] == sum(rewards)
    from freqctl.errors import EpisodeDone
    with pytest.raises(EpisodeDone):
        env.step(np.zeros(5))
    _report(6, "exactly 20 steps, done at t=10 s, cumulative reward exact")


def test_criterion_07_gradient_checks():
    rng = np.random.default_rng(2024)
    eps = 1e-5
    worst = 0.0
    trials = 0
    attempts = 0
    while trials < 100 and attempts < 2000:
        attempts += 1
        obs_dim = int(rng.integers(2, 5))
        act_dim = int(rng.integers(1, 4))
        hidden = (int(rng.integers(4, 9)),)
        agent = DdpgAgent(obs_dim, act_dim, DdpgConfig(hidden=hidden),
                          -1.0, 1.0, seed=int(rng.integers(1 << 30)))
        obs = rng.normal(size=(2, obs_dim))
        u, cache_a = agent.actor.forward(agent._actor_in(obs))
        q, cache_c = agent.critic.forward(
            agent._critic_in(obs, agent.scale_action(u)))
        margins = [np.min(np.abs(pre)) for _, pre in cache_a[:-1]]
        margins += [np.min(np.abs(pre)) for _, pre in cache_c[:-1]]
        if min(margins) < 1e-3:  # too close to a relu kink for clean FD
            continue
        trials += 1
        kind = trials % 3

        if kind == 0:  # critic parameters
            w = rng.normal(size=(2, 1))
            grads, _ = agent.critic.backward(cache_c, w)
            analytic = np.concatenate([g.ravel() for g in grads])
            net, nin = agent.critic, agent._critic_in(obs, agent.scale_action(u))

            def f(net=net, nin=nin, w=w):
                return float(np.sum(w * net.forward(nin)[0]))
        elif kind == 1:  # actor parameters, direct
            w = rng.normal(size=(2, act_dim))
            grads, _ = agent.actor.backward(cache_a, w)
            analytic = np.concatenate([g.ravel() for g in grads])
            net, nin = agent.actor, agent._actor_in(obs)

            def f(net=net, nin=nin, w=w):
                return float(np.sum(w * net.forward(nin)[0]))
        else:  # chained actor-through-critic
            _, d_in = agent.critic.backward(cache_c, np.full((2, 1), 1.0))
            grads, _ = agent.actor.backward(cache_a, d_in[:, obs_dim:])
            analytic = np.concatenate([g.ravel() for g in grads])
            net = agent.actor

            def f(net=net, agent=agent, obs=obs):
                uu, _ = net.forward(agent._actor_in(obs))
                qq, _ = agent.critic.forward(
                    agent._critic_in(obs, agent.scale_action(uu)))
                return float(np.sum(qq))

        def set_flat(flat, net=net):
            k = 0
            for p in net.params:
                p[...] = flat[k:k + p.size].reshape(p.shape)
                k += p.size

        flat0 = np.concatenate([p.ravel() for p in net.params])
        fd = np.zeros_like(flat0)
        for j in range(flat0.size):
            up, dn = flat0.copy(), flat0.copy()
            up[j] += eps
            dn[j] -= eps
            set_flat(up)
            f_up = f()
            set_flat(dn)
            f_dn = f()
            fd[j] = (f_up - f_dn) / (2 * eps)
        set_flat(flat0)
        denom = np.maximum(np.abs(analytic) + np.abs(fd), 1e-6)
        worst = max(worst, float(np.max(np.abs(analytic - fd) / denom)))
    assert trials == 100
    assert worst < 1e-4
    _report(7, f"100 randomized nets: worst relative gradient error {worst:.2e}")


def test_criterion_08_ddpg_algebra():
    cfg = DdpgConfig(gamma=0.0, batch=8)
    agent = DdpgAgent(5, 5, cfg, -0.1, 0.1, seed=1)
    rng = np.random.default_rng(0)
    for _ in range(8):
        agent.buffer.push(rng.normal(size=5), rng.uniform(-0.1, 0.1, 5),
                          rng.normal(), rng.normal(size=5), 1.0)
    obs, act, rew, nxt, done = agent.buffer.sample(8, rng)
    u2, _ = agent.target_actor.forward(agent._actor_in(nxt))
    q2, _ = agent.target_critic.forward(
        agent._critic_in(nxt, agent.scale_action(u2)))
    y = rew + cfg.gamma * (1.0 - done) * q2[:, 0]
    assert np.array_equal(y, rew)

    agent.update()  # desynchronize
    agent.soft_update(tau=1.0)
    for tgt, src in ((agent.target_actor, agent.actor),
                     (agent.target_critic, agent.critic)):
        for pt, ps in zip(tgt.params, src.params):
            assert np.array_equal(pt, ps)

    # no parameter changes before learning_start
    env = make_env(EnvConfig(case_path=IEEE14))
    fresh = DdpgAgent(5, 5, DdpgConfig(learning_start=200),
                      env.action_low, env.action_high, seed=3)
    snap = [p.copy() for p in fresh.actor.params + fresh.critic.params
            + fresh.target_actor.params + fresh.target_critic.params]
    env.seed(3)
    steps = 0
    while steps < 150:  # stay below learning_start
        obs = env.reset()
        done = False
        while not done and steps < 150:
            res = env.step(fresh.select_action(obs, explore=True))
            fresh.buffer.push(obs, np.zeros(5), res.reward, res.obs, res.done)
            obs = res.obs
            done = res.done
            fresh.total_env_steps += 1
            steps += 1
    for p, s0 in zip(fresh.actor.params + fresh.critic.params
                     + fresh.target_actor.params + fresh.target_critic.params,
                     snap):
        assert np.array_equal(p, s0)
    _report(8, "gamma=0 targets, tau=1 copy, and frozen weights before "
               "learning_start all exact")


def test_criterion_09_training_default(runs_default):
    devs = [log.last_window_mean_dev(50) for log, _ in runs_default]
    n_pass = sum(d <= 0.02 for d in devs)
    assert n_pass >= 2, f"last-50 deviations {devs}"
    _report(9, "last-50 mean |df(T_f)| per seed: "
               + ", ".join(f"{d:.4f}" for d in devs)
               + f" Hz; {n_pass}/3 seeds <= 0.02 Hz")


def test_criterion_10_trend_action_count(runs_default, runs_n60):
    d20 = float(np.mean([log.last_window_mean_dev(50) for log, _ in runs_default]))
    d60 = float(np.mean([log.last_window_mean_dev(50) for log, _ in runs_n60]))
    assert d20 < d60
    _report(10, f"pooled last-50 deviation: n_actions=20 {d20:.4f} Hz "
                f"< n_actions=60 {d60:.4f} Hz")


def test_criterion_11_trend_learning_start(runs_default, runs_ls0):
    d200 = float(np.mean([log.last_window_mean_dev(50) for log, _ in runs_default]))
    d0 = float(np.mean([log.last_window_mean_dev(50) for log, _ in runs_ls0]))
    assert d200 < d0
    _report(11, f"pooled last-50 deviation: learning_start=200 {d200:.4f} Hz "
                f"< learning_start=0 {d0:.4f} Hz")


def test_criterion_12_validation_rollout(runs_default, tmp_path):
    best = min(runs_default, key=lambda r: r[0].last_window_mean_dev(50))
    dev, trace = evaluate(best[1], EnvConfig(case_path=IEEE14), tmp_path)
    assert dev <= 0.05
    _report(12, f"best checkpoint deterministic rollout: |f(10 s) - 60| = "
                f"{dev:.4f} Hz (trace at {trace.name})")


def test_criterion_13_train_determinism(tmp_path):
    for sub in ("a", "b"):
        rc = main(["train", "--case", str(IEEE14), "--seed", "11",
                   "--episodes", "6", "--out-dir", str(tmp_path / sub)])
        assert rc == 0
    b1 = (tmp_path / "a" / "train_log.csv").read_bytes()
    b2 = (tmp_path / "b" / "train_log.csv").read_bytes()
    assert b1 == b2
    _report(13, f"serial train twice: train_log.csv byte-identical "
                f"({len(b1)} bytes)")
