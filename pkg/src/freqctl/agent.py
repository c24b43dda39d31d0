"""From-scratch DDPG: numpy MLPs with hand-derived gradients, replay buffer,
target networks, Adam, and the delayed-learning training loop.

The agent plays the secondary frequency controller: before ``learning_start``
environment steps it acts uniformly at random and performs no updates; after
that it follows the actor plus clipped gaussian exploration noise and does one
gradient update per environment step.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CheckpointMismatch, DimensionMismatch, TrainingDiverged,
                     Underfull)

_CKPT_MAGIC = b"DDPG1"


@dataclass
class DdpgConfig:
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    batch: int = 64
    buffer_capacity: int = 100_000
    noise_sigma: float = 0.1          # fraction of the action half-range
    learning_start: int = 200         # environment steps
    updates_per_step: int = 1
    episodes: int = 150
    hidden: tuple[int, ...] = (64, 64)
    # quadratic penalty on the actor's output pre-activations; keeps the
    # tanh out of saturation where its gradient (and learning) dies
    actor_preact_reg: float = 0.0
    # annealing schedule, in env steps counted from learning_start: hold the
    # full exploration noise / learning rates for `anneal_hold_steps`, then
    # fade both linearly to zero over `anneal_steps`, so the policy settles
    # and the tail episodes measure it cleanly (0 disables fading)
    anneal_hold_steps: int = 0
    anneal_steps: int = 0
    # network-input preconditioning: observations are divided by this before
    # entering the nets (actions are fed in units of the action half-range)
    obs_scale: float = 0.3


class Mlp:
    """Fully connected net, rectifier hidden units, tanh or identity output."""

    def __init__(self, sizes, out_activation="tanh", rng=None, final_scale=3e-3):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if out_activation not in ("tanh", "linear"):
            raise ValueError(f"unknown output activation {out_activation!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.out_activation = out_activation
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        last = len(sizes) - 2
        for li, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = final_scale if li == last else 1.0 / np.sqrt(n_in)
            self.weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
            self.biases.append(rng.uniform(-bound, bound, size=n_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "Mlp":
        dup = Mlp.__new__(Mlp)
        dup.sizes = self.sizes
        dup.out_activation = self.out_activation
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup

    def forward(self, x: np.ndarray):
        """Batch forward pass; returns (output, cache for backward)."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise DimensionMismatch(
                f"input must be (batch, {self.sizes[0]}), got {x.shape}")
        cache = []
        h = x
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = h @ w.T + b
            cache.append((h, pre))
            if li < len(self.weights) - 1:
                h = np.maximum(pre, 0.0)
            elif self.out_activation == "tanh":
                h = np.tanh(pre)
            else:
                h = pre
        return h, cache

    def backward(self, cache, d_out: np.ndarray, d_pre_out: np.ndarray | None = None):
        """Exact reverse-mode gradients for a matching forward pass.

        d_out is dL/d(output), shape (batch, n_out); d_pre_out optionally adds
        a gradient term applied directly to the output pre-activation (used
        for pre-activation regularizers). Returns (grads in params order,
        dL/d(input)).
        """
        if len(cache) != len(self.weights):
            raise DimensionMismatch("cache does not match network depth")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        d = np.asarray(d_out, dtype=float)
        for li in range(len(self.weights) - 1, -1, -1):
            h_in, pre = cache[li]
            if li == len(self.weights) - 1:
                if self.out_activation == "tanh":
                    t = np.tanh(pre)
                    d = d * (1.0 - t * t)
                if d_pre_out is not None:
                    d = d + d_pre_out
            else:
                d = d * (pre > 0.0)
            grads[2 * li] = d.T @ h_in
            grads[2 * li + 1] = d.sum(axis=0)
            d = d @ self.weights[li]
        return grads, d


class Adam:
    """Per-array Adam state; steps parameters in place."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


class ReplayBuffer:
    """Ring buffer of transitions with oldest-first eviction."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self.cursor = 0

    def push(self, obs, action, reward, next_obs, done) -> None:
        i = self.cursor
        self.obs[i] = obs
        self.act[i] = action
        self.rew[i] = reward
        self.next_obs[i] = next_obs
        self.done[i] = float(done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        """Uniform sample without replacement within the batch."""
        if self.size < batch:
            raise Underfull(f"buffer holds {self.size} < batch {batch}")
        idx = rng.choice(self.size, size=batch, replace=False)
        return (self.obs[idx], self.act[idx], self.rew[idx],
                self.next_obs[idx], self.done[idx])


class DdpgAgent:
    """Actor-critic learner over a box action space."""

    def __init__(self, obs_dim: int, act_dim: int, cfg: DdpgConfig,
                 action_low, action_high, seed: int = 0):
        self.cfg = cfg
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.action_low = np.broadcast_to(np.asarray(action_low, float), (act_dim,)).copy()
        self.action_high = np.broadcast_to(np.asarray(action_high, float), (act_dim,)).copy()
        self.action_center = 0.5 * (self.action_low + self.action_high)
        self.action_half = 0.5 * (self.action_high - self.action_low)
        self.rng = np.random.default_rng(seed)
        hidden = list(cfg.hidden)
        self.actor = Mlp([obs_dim, *hidden, act_dim], "tanh", self.rng)
        self.critic = Mlp([obs_dim + act_dim, *hidden, 1], "linear", self.rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = Adam(self.actor.params, cfg.actor_lr)
        self.critic_opt = Adam(self.critic.params, cfg.critic_lr)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, obs_dim, act_dim)
        self.total_env_steps = 0

    # -- acting ------------------------------------------------------------

    def _actor_in(self, obs: np.ndarray) -> np.ndarray:
        return obs / self.cfg.obs_scale

    def _critic_in(self, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
        return np.concatenate([obs / self.cfg.obs_scale,
                               action / self.action_half], axis=1)

    def set_action_bounds(self, action_low, action_high) -> None:
        self.action_low = np.broadcast_to(
            np.asarray(action_low, float), (self.act_dim,)).copy()
        self.action_high = np.broadcast_to(
            np.asarray(action_high, float), (self.act_dim,)).copy()
        self.action_center = 0.5 * (self.action_low + self.action_high)
        self.action_half = 0.5 * (self.action_high - self.action_low)

    def scale_action(self, u: np.ndarray) -> np.ndarray:
        return self.action_center + self.action_half * u

    def act(self, obs) -> np.ndarray:
        """Deterministic policy action (evaluation path)."""
        obs = np.asarray(obs, dtype=float).reshape(1, -1)
        u, _ = self.actor.forward(self._actor_in(obs))
        return np.clip(self.scale_action(u[0]), self.action_low, self.action_high)

    def anneal_scale(self, counter: int | None = None) -> float:
        """Multiplier for noise and learning rates under the anneal schedule."""
        if self.cfg.anneal_steps <= 0:
            return 1.0
        c = self.total_env_steps if counter is None else counter
        past = c - self.cfg.learning_start - self.cfg.anneal_hold_steps
        if past <= 0:
            return 1.0
        return max(0.0, 1.0 - past / self.cfg.anneal_steps)

    def noise_scale(self, counter: int) -> float:
        """Exploration noise std (as a fraction of the half-range) at a step."""
        return self.cfg.noise_sigma * self.anneal_scale(counter)

    def select_action(self, obs, counter: int | None = None,
                      explore: bool = True) -> np.ndarray:
        """Uniform random before learning_start, else actor (+ noise if exploring)."""
        c = self.total_env_steps if counter is None else counter
        if c < self.cfg.learning_start:
            return self.rng.uniform(self.action_low, self.action_high)
        a = self.act(obs)
        if explore:
            sigma = self.noise_scale(c)
            if sigma > 0.0:
                a = a + self.rng.normal(0.0, sigma * self.action_half)
        return np.clip(a, self.action_low, self.action_high)

    # -- learning ----------------------------------------------------------

    def soft_update(self, tau: float | None = None) -> None:
        tau = self.cfg.tau if tau is None else tau
        for tgt, src in ((self.target_actor, self.actor),
                         (self.target_critic, self.critic)):
            for pt, ps in zip(tgt.params, src.params):
                pt[...] = tau * ps + (1.0 - tau) * pt

    def update(self):
        """One critic and one actor Adam step, then soft target updates.

        Returns (critic_loss, actor_objective).
        """
        cfg = self.cfg
        scale = self.anneal_scale()
        self.critic_opt.lr = cfg.critic_lr * scale
        self.actor_opt.lr = cfg.actor_lr * scale
        obs, act, rew, nxt, done = self.buffer.sample(cfg.batch, self.rng)
        m = obs.shape[0]

        u2, _ = self.target_actor.forward(self._actor_in(nxt))
        q2, _ = self.target_critic.forward(
            self._critic_in(nxt, self.scale_action(u2)))
        y = rew + cfg.gamma * (1.0 - done) * q2[:, 0]

        q, cache_c = self.critic.forward(self._critic_in(obs, act))
        err = q[:, 0] - y
        critic_loss = float(np.mean(err * err))
        d_q = (2.0 / m) * err[:, None]
        grads_c, _ = self.critic.backward(cache_c, d_q)
        self.critic_opt.step(self.critic.params, grads_c)

        u, cache_a = self.actor.forward(self._actor_in(obs))
        qa, cache_c2 = self.critic.forward(
            self._critic_in(obs, self.scale_action(u)))
        actor_objective = float(np.mean(qa))
        # ascend mean Q: upstream gradient of -mean(Q) through the critic
        # input; the critic sees scale_action(u)/half = u + center/half,
        # so du needs no extra factor
        _, d_in = self.critic.backward(cache_c2, np.full((m, 1), -1.0 / m))
        d_u = d_in[:, self.obs_dim:]
        d_pre = None
        if cfg.actor_preact_reg > 0.0:
            d_pre = (2.0 * cfg.actor_preact_reg / m) * cache_a[-1][1]
        grads_a, _ = self.actor.backward(cache_a, d_u, d_pre_out=d_pre)
        self.actor_opt.step(self.actor.params, grads_a)

        self.soft_update()
        return critic_loss, actor_objective


@dataclass
class TrainLog:
    """Per-episode records of one training run."""
    seed: int
    config: dict
    final_f_hz: list[float] = field(default_factory=list)
    episode_return: list[float] = field(default_factory=list)
    step_rewards: list[list[float]] | None = None

    @property
    def episodes(self) -> int:
        return len(self.final_f_hz)

    def deviations(self, f_star: float = 60.0) -> np.ndarray:
        return np.abs(np.asarray(self.final_f_hz) - f_star)

    def last_window_mean_dev(self, window: int = 50, f_star: float = 60.0) -> float:
        dev = self.deviations(f_star)
        if window > dev.size:
            raise ValueError(f"window {window} exceeds {dev.size} episodes")
        return float(dev[-window:].mean())


def train(agent: DdpgAgent, env, cfg: DdpgConfig, seed: int,
          record_rewards: bool = False) -> TrainLog:
    """Run `cfg.episodes` training episodes; deterministic given the seed.

    The environment is reseeded here; the agent's rng state is whatever the
    caller constructed (use the same seed for a fully reproducible run).
    """
    env.seed(seed)
    log = TrainLog(seed=seed, config={
        "gamma": cfg.gamma, "tau": cfg.tau, "actor_lr": cfg.actor_lr,
        "critic_lr": cfg.critic_lr, "batch": cfg.batch,
        "noise_sigma": cfg.noise_sigma, "learning_start": cfg.learning_start,
        "updates_per_step": cfg.updates_per_step, "episodes": cfg.episodes,
        "n_actions": env.cfg.n_actions, "hidden": list(cfg.hidden),
    }, step_rewards=[] if record_rewards else None)

    for ep in range(cfg.episodes):
        obs = env.reset()
        ep_return = 0.0
        rewards: list[float] = []
        final_f = None
        done = False
        while not done:
            action = agent.select_action(obs, explore=True)
            result = env.step(action)
            agent.buffer.push(obs, action, result.reward, result.obs, result.done)
            agent.total_env_steps += 1
            obs = result.obs
            ep_return += result.reward
            rewards.append(result.reward)
            done = result.done
            if done:
                final_f = result.info["f_coi_hz"]
            if (agent.total_env_steps >= cfg.learning_start
                    and agent.buffer.size >= cfg.batch
                    and agent.anneal_scale() > 0.0):
                for _ in range(cfg.updates_per_step):
                    critic_loss, actor_obj = agent.update()
                    if not (np.isfinite(critic_loss) and np.isfinite(actor_obj)):
                        raise TrainingDiverged(
                            f"non-finite loss at episode {ep + 1}, env step "
                            f"{agent.total_env_steps}: critic {critic_loss}, "
                            f"actor {actor_obj}")
        log.final_f_hz.append(float(final_f))
        log.episode_return.append(float(ep_return))
        if record_rewards:
            log.step_rewards.append(rewards)
    return log


def run_training(env_cfg, agent_cfg: DdpgConfig, seed: int,
                 record_rewards: bool = False):
    """Build a fresh (env, agent) pair from one seed and train.

    Returns (TrainLog, agent, env). This is the path the CLI uses; identical
    seeds give bit-identical logs.
    """
    from .env import make_env  # local import to avoid a cycle

    env = make_env(env_cfg)
    agent = DdpgAgent(env.n_gen, env.n_gen, agent_cfg,
                      env.action_low, env.action_high, seed=seed)
    log = train(agent, env, agent_cfg, seed, record_rewards=record_rewards)
    return log, agent, env


# ---------------------------------------------------------------------------
# checkpoints: magic, uint32 layer-size headers, then little-endian float64
# parameter blocks for actor, critic, target actor, target critic (per layer:
# weight matrix row-major, then bias).

def _write_net_params(chunks: list[bytes], net: Mlp) -> None:
    for w, b in zip(net.weights, net.biases):
        chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())


def save_checkpoint(agent: DdpgAgent, path: str | Path) -> None:
    chunks = [_CKPT_MAGIC]
    for sizes in (agent.actor.sizes, agent.critic.sizes):
        chunks.append(struct.pack("<I", len(sizes)))
        chunks.append(struct.pack(f"<{len(sizes)}I", *sizes))
    chunks.append(struct.pack("<d", agent.cfg.obs_scale))
    for net in (agent.actor, agent.critic, agent.target_actor, agent.target_critic):
        _write_net_params(chunks, net)
    Path(path).write_bytes(b"".join(chunks))


def _read_net_params(buf: bytes, offset: int, net: Mlp) -> int:
    for li, (n_in, n_out) in enumerate(zip(net.sizes[:-1], net.sizes[1:])):
        nw = n_in * n_out
        end = offset + 8 * (nw + n_out)
        if end > len(buf):
            raise CheckpointMismatch("checkpoint truncated")
        net.weights[li] = np.frombuffer(
            buf, dtype="<f8", count=nw, offset=offset).reshape(n_out, n_in).copy()
        net.biases[li] = np.frombuffer(
            buf, dtype="<f8", count=n_out, offset=offset + 8 * nw).copy()
        offset = end
    return offset


def load_checkpoint(path: str | Path, cfg: DdpgConfig | None = None,
                    action_low=None, action_high=None, seed: int = 0) -> DdpgAgent:
    """Restore an agent from a checkpoint; behavior is bit-identical to save time."""
    buf = Path(path).read_bytes()
    if buf[:len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointMismatch(f"{path}: not a {_CKPT_MAGIC.decode()} checkpoint")
    offset = len(_CKPT_MAGIC)

    def _read_sizes(off):
        if off + 4 > len(buf):
            raise CheckpointMismatch("checkpoint truncated")
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + 4 * n > len(buf):
            raise CheckpointMismatch("checkpoint truncated")
        sizes = struct.unpack_from(f"<{n}I", buf, off)
        return list(sizes), off + 4 * n

    actor_sizes, offset = _read_sizes(offset)
    critic_sizes, offset = _read_sizes(offset)
    if len(actor_sizes) < 2 or len(critic_sizes) < 2:
        raise CheckpointMismatch("checkpoint headers malformed")
    obs_dim, act_dim = actor_sizes[0], actor_sizes[-1]
    if critic_sizes[0] != obs_dim + act_dim or critic_sizes[-1] != 1:
        raise CheckpointMismatch(
            f"critic sizes {critic_sizes} inconsistent with actor {actor_sizes}")
    if offset + 8 > len(buf):
        raise CheckpointMismatch("checkpoint truncated")
    (obs_scale,) = struct.unpack_from("<d", buf, offset)
    offset += 8
    if not 0 < obs_scale < 1e6:
        raise CheckpointMismatch(f"implausible obs_scale {obs_scale}")

    cfg = cfg if cfg is not None else DdpgConfig()
    cfg = DdpgConfig(**{**cfg.__dict__, "hidden": tuple(actor_sizes[1:-1]),
                        "obs_scale": obs_scale})
    low = action_low if action_low is not None else -np.ones(act_dim)
    high = action_high if action_high is not None else np.ones(act_dim)
    agent = DdpgAgent(obs_dim, act_dim, cfg, low, high, seed=seed)
    for net in (agent.actor, agent.critic, agent.target_actor, agent.target_critic):
        offset = _read_net_params(buf, offset, net)
    if offset != len(buf):
        raise CheckpointMismatch("checkpoint has trailing bytes")
    return agent
