"""Episode protocol around the simulator.

An episode simulates 0 .. t_final seconds of a disturbed system. reset() runs
the pre-action phase (disturbance applied at its instant) and returns the
observation at t_act_start; each step() applies one incremental governor
offset and advances exactly one action interval, wrapping as many simulator
steps as the interval needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import (ControlInput, Event, SimConfig, coi_frequency,
                       machine_frequencies, run_until)
from .errors import (ConfigError, DimensionMismatch, EpisodeDone,
                     EpisodeInitError, NewtonDivergence, NonConvergence,
                     ParseError)
from .netmodel import init_dynamics, load_case, read_sections, solve_power_flow


@dataclass
class EnvConfig:
    case_path: str | Path
    disturbance: Event = field(default_factory=lambda: Event(time=1.0, bus=4, dp=0.6))
    t_act_start: float = 5.0
    t_final: float = 10.0
    n_actions: int = 20
    action_low: float = -0.1      # pu per governor, -10 MW on a 100 MVA base
    action_high: float = 0.1
    w_mid: float = 100.0
    w_final: float = 3000.0
    action_mode: str = "incremental"
    sim: SimConfig = field(default_factory=SimConfig)
    randomize_disturbance: bool = False
    dp_low: float = 0.2
    dp_high: float = 0.8


def validate_config(cfg: EnvConfig) -> None:
    if cfg.t_act_start >= cfg.t_final:
        raise ConfigError("t_act_start must be strictly before t_final")
    if cfg.n_actions < 1:
        raise ConfigError("n_actions must be at least 1")
    if cfg.action_low >= cfg.action_high:
        raise ConfigError("action_low must be below action_high")
    if cfg.w_mid <= 0 or cfg.w_final <= 0:
        raise ConfigError("reward weights must be positive")
    if cfg.action_mode not in ("incremental", "absolute"):
        raise ConfigError(f"unknown action_mode {cfg.action_mode!r}")
    if cfg.t_act_start < 0 or cfg.disturbance.time < 0:
        raise ConfigError("times must be non-negative")
    if cfg.randomize_disturbance and cfg.dp_low > cfg.dp_high:
        raise ConfigError("dp_low must not exceed dp_high")
    if cfg.sim.h_nominal <= 0:
        raise ConfigError("h_nominal must be positive")


def compute_reward(f_hz: float, is_final: bool, cfg: EnvConfig,
                   f_star: float = 60.0) -> float:
    """Penalize absolute frequency deviation; heavily at the final instant."""
    w = cfg.w_final if is_final else cfg.w_mid
    return -w * abs(f_hz - f_star)


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    info: dict


class Env:
    """Single-threaded episode protocol over the frequency simulator."""

    def __init__(self, cfg: EnvConfig):
        validate_config(cfg)
        self.cfg = cfg
        self.case = load_case(cfg.case_path)
        if not 1 <= cfg.disturbance.bus <= self.case.n_bus:
            raise ConfigError(f"disturbance bus {cfg.disturbance.bus} not in case")
        self.n_gen = self.case.n_gen
        self.action_low = np.full(self.n_gen, cfg.action_low)
        self.action_high = np.full(self.n_gen, cfg.action_high)
        self._pomax = np.array([g.p_offset_max for g in self.case.governors_by_gen()])
        self._rng = np.random.default_rng(0)
        self._applied_seed = 0
        self._equilibrium = None        # (minit, state0)
        self._reset_cache: dict = {}
        self._state = None
        self._case_now = None
        self._k = 0
        self._cum_reward = 0.0
        self._offsets = np.zeros(self.n_gen)
        self._pending: list[Event] = []
        self._trace_rows: list[np.ndarray] = []

    # -- protocol ----------------------------------------------------------

    def seed(self, value: int) -> int:
        """Deterministically reseed the episode RNG; returns the seed used."""
        self._rng = np.random.default_rng(value)
        self._applied_seed = int(value)
        return self._applied_seed

    @property
    def action_interval(self) -> float:
        return (self.cfg.t_final - self.cfg.t_act_start) / self.cfg.n_actions

    def _equilibrium_init(self):
        if self._equilibrium is None:
            pf = solve_power_flow(self.case)
            minit, state0 = init_dynamics(self.case, pf)
            self._equilibrium = (minit, state0)
        return self._equilibrium

    def _draw_disturbance(self) -> Event:
        d = self.cfg.disturbance
        if not self.cfg.randomize_disturbance:
            return d
        dp = float(self._rng.uniform(self.cfg.dp_low, self.cfg.dp_high))
        return Event(time=d.time, bus=d.bus, dp=dp, dq=d.dq)

    def reset(self) -> np.ndarray:
        """Start a new episode; returns the observation at t_act_start."""
        try:
            minit, state0 = self._equilibrium_init()
            self._minit = minit
            disturbance = self._draw_disturbance()
            key = (disturbance.bus, disturbance.dp, disturbance.dq, disturbance.time)
            cached = self._reset_cache.get(key)
            if cached is None:
                row0 = self._trace_row(state0)
                events = [disturbance] if disturbance.time <= self.cfg.t_act_start else []
                state, trace, case_now = run_until(
                    state0, ControlInput.zero(self.n_gen), self.case,
                    self.cfg.sim, self.cfg.t_act_start, minit, events=events)
                pending = [] if events else [disturbance]
                cached = (state, [row0] + list(trace), case_now, pending)
                if not self.cfg.randomize_disturbance:
                    self._reset_cache[key] = cached
            state, rows, case_now, pending = cached
            self._state = state.copy()
            self._trace_rows = list(rows)
            self._case_now = case_now
            self._pending = list(pending)
        except (NonConvergence, NewtonDivergence) as exc:
            raise EpisodeInitError(f"episode initialization failed: {exc}") from exc
        self._k = 0
        self._cum_reward = 0.0
        self._offsets = np.zeros(self.n_gen)
        return self._observe()

    def step(self, action) -> StepResult:
        """Apply one action and advance one action interval."""
        if self._state is None:
            raise EpisodeDone("call reset() before step()")
        if self._k >= self.cfg.n_actions:
            raise EpisodeDone(f"episode finished after {self.cfg.n_actions} steps")
        a = np.asarray(action, dtype=float).ravel()
        if a.shape != (self.n_gen,):
            raise DimensionMismatch(
                f"action must have shape ({self.n_gen},), got {a.shape}")
        if not np.isfinite(a).all():
            raise ValueError("action contains non-finite components")
        clipped = np.clip(a, self.action_low, self.action_high)
        n_clipped = int(np.sum(clipped != a))
        if self.cfg.action_mode == "incremental":
            self._offsets = np.clip(self._offsets + clipped, -self._pomax, self._pomax)
        else:
            self._offsets = np.clip(clipped, -self._pomax, self._pomax)

        cfg = self.cfg
        t_next = cfg.t_act_start + (cfg.t_final - cfg.t_act_start) * (self._k + 1) / cfg.n_actions
        state, trace, case_now = run_until(
            self._state, ControlInput(self._offsets.copy()), self._case_now,
            cfg.sim, t_next, self._minit,
            events=[e for e in self._pending if e.time <= t_next + 1e-12])
        self._pending = [e for e in self._pending if e.time > t_next + 1e-12]
        self._state = state
        self._case_now = case_now
        self._trace_rows.extend(trace)

        self._k += 1
        is_final = self._k == cfg.n_actions
        f = coi_frequency(state, self.case)
        reward = compute_reward(f, is_final, cfg, self.case.f_nominal)
        self._cum_reward += reward
        info = {
            "t": state.t,
            "f_coi_hz": f,
            "cumulative_reward": self._cum_reward,
            "step": self._k,
            "n_clipped": n_clipped,
            "offsets": self._offsets.copy(),
        }
        return StepResult(obs=self._observe(), reward=reward, done=is_final, info=info)

    # -- helpers -----------------------------------------------------------

    def _observe(self) -> np.ndarray:
        return machine_frequencies(self._state, self.case) - self.case.f_nominal

    def _trace_row(self, state) -> np.ndarray:
        row = np.empty(2 + 2 * self.n_gen)
        row[0] = state.t
        row[1] = coi_frequency(state, self.case)
        row[2:2 + self.n_gen] = machine_frequencies(state, self.case)
        row[2 + self.n_gen:] = state.pm
        return row

    def trace(self) -> np.ndarray:
        """Episode trace so far: rows [t, f_coi_hz, f_i.., pm_i..] per sim step."""
        if not self._trace_rows:
            return np.empty((0, 2 + 2 * self.n_gen))
        return np.vstack(self._trace_rows)


def make_env(cfg: EnvConfig) -> Env:
    """Construct and validate an environment; no simulation happens yet."""
    return Env(cfg)


_ENV_KEYS = {
    "case": str,
    "dist_bus": int, "dist_dp": float, "dist_dq": float, "dist_time": float,
    "t_act_start": float, "t_final": float, "n_actions": int,
    "action_low": float, "action_high": float,
    "w_mid": float, "w_final": float, "action_mode": str,
    "h_nominal": float, "newton_tol": float, "newton_max_iter": int,
    "randomize_disturbance": bool, "dp_low": float, "dp_high": float,
}


def env_config_from_file(path: str | Path) -> EnvConfig:
    """Build an EnvConfig from a section file with an ``[ENV]`` section.

    Keys mirror the EnvConfig fields; ``case`` is resolved relative to the
    config file. CLI flags may override the result afterwards.
    """
    path = Path(path)
    try:
        sections = read_sections(path.read_text(encoding="utf-8"), ("ENV",))
    except ParseError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if "ENV" not in sections:
        raise ConfigError(f"{path}: missing [ENV] section")
    raw: dict = {}
    for tokens in sections["ENV"]:
        if len(tokens) != 2:
            raise ConfigError(f"{path}: [ENV] rows are 'key value', got {tokens!r}")
        key, val = tokens[0].lower(), tokens[1]
        if key not in _ENV_KEYS:
            raise ConfigError(f"{path}: unknown [ENV] key {key!r}")
        kind = _ENV_KEYS[key]
        try:
            raw[key] = (val.lower() in ("1", "true", "yes")) if kind is bool else kind(val)
        except ValueError as exc:
            raise ConfigError(f"{path}: bad value for {key}: {val!r}") from exc
    if "case" not in raw:
        raise ConfigError(f"{path}: [ENV] must set 'case'")

    case_path = Path(raw.pop("case"))
    if not case_path.is_absolute():
        case_path = path.parent / case_path
    dist = Event(time=raw.pop("dist_time", 1.0), bus=raw.pop("dist_bus", 4),
                 dp=raw.pop("dist_dp", 0.6), dq=raw.pop("dist_dq", 0.0))
    sim = SimConfig(h_nominal=raw.pop("h_nominal", 0.01),
                    newton_tol=raw.pop("newton_tol", 1e-8),
                    newton_max_iter=raw.pop("newton_max_iter", 20))
    cfg = EnvConfig(case_path=case_path, disturbance=dist, sim=sim, **raw)
    validate_config(cfg)
    return cfg
