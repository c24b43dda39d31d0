"""Command-line experiment harness.

Subcommands: ``simulate`` (open-loop run), ``train`` (one training run),
``sweep`` (multi-run parameter study), ``eval`` (deterministic rollout of a
checkpoint), ``summarize`` (recompute summary.csv from a train_log.csv).

File contracts:
  train_log.csv  setting,run,episode,f_final_hz,dev_hz,episode_return,status
  summary.csv    setting,mean_dev_hz,std_dev_hz,runs,window
  trace.csv      t,f_coi_hz,f1_hz,...,fn_hz,pm1,...,pmn

Exit codes: 0 success, 1 any failed run, 2 configuration error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .agent import DdpgConfig, load_checkpoint, run_training, save_checkpoint
from .dynamics import ControlInput, Event, SimConfig, run_until
from .env import EnvConfig, env_config_from_file, make_env
from .errors import (CheckpointMismatch, ConfigError, FreqctlError,
                     WindowTooLarge)
from .netmodel import init_dynamics, load_case, solve_power_flow

TRAIN_LOG_HEADER = ["setting", "run", "episode", "f_final_hz", "dev_hz",
                    "episode_return", "status"]
SUMMARY_HEADER = ["setting", "mean_dev_hz", "std_dev_hz", "runs", "window"]

_SANITY_BAND = (55.0, 65.0)   # Hz; f_final outside this fails the run

DEFAULT_CASE = Path(__file__).parent / "cases" / "ieee14.case"


def _fmt(x: float) -> str:
    return f"{x:.12g}"


@dataclass
class SweepSpec:
    param: str                      # "learning_start" | "n_actions"
    values: list[int]
    runs: int = 10
    episodes: int = 150
    env_cfg: EnvConfig = field(default_factory=lambda: EnvConfig(DEFAULT_CASE))
    agent_cfg: DdpgConfig = field(default_factory=DdpgConfig)
    seed_base: int = 0

    def validate(self) -> None:
        if self.param not in ("learning_start", "n_actions"):
            raise ConfigError(f"unknown sweep parameter {self.param!r}")
        if not self.values:
            raise ConfigError("sweep needs a non-empty value list")
        if self.runs < 1:
            raise ConfigError("runs must be at least 1")
        if self.episodes < 1:
            raise ConfigError("episodes must be at least 1")


@dataclass
class SettingSummary:
    setting: str
    mean_dev_hz: float
    std_dev_hz: float
    runs: int
    window: int


@dataclass
class SummaryStats:
    settings: list[SettingSummary]
    # per setting: (episode numbers, cross-run mean f_final, cross-run std)
    per_episode: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]


def _apply_param(spec: SweepSpec, value: int) -> tuple[EnvConfig, DdpgConfig]:
    env_cfg, agent_cfg = spec.env_cfg, spec.agent_cfg
    if spec.param == "n_actions":
        env_cfg = replace(env_cfg, n_actions=int(value))
    else:
        agent_cfg = replace(agent_cfg, learning_start=int(value))
    agent_cfg = replace(agent_cfg, episodes=spec.episodes)
    return env_cfg, agent_cfg


def _run_one(task):
    """One training run of a sweep; returns (s_index, run, rows, error)."""
    spec, s_index, run = task
    value = spec.values[s_index]
    label = str(value)
    seed = spec.seed_base + 1000 * s_index + run
    env_cfg, agent_cfg = _apply_param(spec, value)
    try:
        log, _, _ = run_training(env_cfg, agent_cfg, seed)
        rows = []
        for ep, (f, ret) in enumerate(zip(log.final_f_hz, log.episode_return),
                                      start=1):
            if not (np.isfinite(f) and _SANITY_BAND[0] <= f <= _SANITY_BAND[1]):
                raise FreqctlError(
                    f"episode {ep}: final frequency {f} outside sanity band")
            rows.append([label, run, ep, _fmt(f), _fmt(abs(f - 60.0)),
                         _fmt(ret), "ok"])
        return s_index, run, rows, None
    except FreqctlError as exc:
        row = [label, run, 0, "nan", "nan", "nan", "failed"]
        return s_index, run, [row], f"{type(exc).__name__}: {exc}"


def run_sweep(spec: SweepSpec, out_dir: Path, jobs: int = 1,
              window: int = 50):
    """Execute the sweep; writes train_log.csv and summary.csv.

    Returns (train_log_path, summary_path, n_failed). Runs are seeded
    seed_base + 1000 * setting_index + run so settings are independently
    reproducible; outputs are sorted regardless of execution order.
    """
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(spec, si, run)
             for si in range(len(spec.values)) for run in range(spec.runs)]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]

    results.sort(key=lambda r: (r[0], r[1]))
    n_failed = 0
    all_rows = []
    for _, run, rows, error in results:
        all_rows.extend(rows)
        if error is not None:
            n_failed += 1
            print(f"run {run} failed: {error}", file=sys.stderr)

    train_log_path = out_dir / "train_log.csv"
    _write_csv(train_log_path, TRAIN_LOG_HEADER, all_rows)
    stats = summarize(read_train_log(train_log_path), window=window)
    summary_path = out_dir / "summary.csv"
    _write_summary(summary_path, stats)
    return train_log_path, summary_path, n_failed


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_summary(path: Path, stats: SummaryStats) -> None:
    rows = [[s.setting, _fmt(s.mean_dev_hz), _fmt(s.std_dev_hz), s.runs, s.window]
            for s in stats.settings]
    _write_csv(path, SUMMARY_HEADER, rows)


@dataclass
class TrainLogRow:
    setting: str
    run: int
    episode: int
    f_final_hz: float
    dev_hz: float
    episode_return: float
    status: str


def read_train_log(path: str | Path) -> list[TrainLogRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(TRAIN_LOG_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"{path}: missing columns {sorted(missing)}")
        for rec in reader:
            rows.append(TrainLogRow(
                setting=rec["setting"], run=int(rec["run"]),
                episode=int(rec["episode"]), f_final_hz=float(rec["f_final_hz"]),
                dev_hz=float(rec["dev_hz"]),
                episode_return=float(rec["episode_return"]),
                status=rec["status"]))
    return rows


def summarize(rows: list[TrainLogRow], window: int = 50) -> SummaryStats:
    """Pool |f_final - 60| over each run's last `window` episodes per setting."""
    settings: list[str] = []
    by_setting: dict[str, dict[int, list[TrainLogRow]]] = {}
    for row in rows:
        if row.status != "ok":
            continue
        if row.setting not in by_setting:
            settings.append(row.setting)
            by_setting[row.setting] = {}
        by_setting[row.setting].setdefault(row.run, []).append(row)

    summaries = []
    per_episode = {}
    for setting in settings:
        pooled = []
        runs = by_setting[setting]
        finals = []
        for run in sorted(runs):
            run_rows = sorted(runs[run], key=lambda r: r.episode)
            if len(run_rows) < window:
                raise WindowTooLarge(
                    f"setting {setting} run {run} has {len(run_rows)} episodes "
                    f"< window {window}")
            pooled.extend(r.dev_hz for r in run_rows[-window:])
            finals.append([r.f_final_hz for r in run_rows])
        pooled_arr = np.asarray(pooled)
        n_ep = min(len(f) for f in finals)
        fmat = np.asarray([f[:n_ep] for f in finals])
        per_episode[setting] = (np.arange(1, n_ep + 1),
                                fmat.mean(axis=0), fmat.std(axis=0))
        summaries.append(SettingSummary(
            setting=setting, mean_dev_hz=float(pooled_arr.mean()),
            std_dev_hz=float(pooled_arr.std()), runs=len(runs), window=window))
    return SummaryStats(settings=summaries, per_episode=per_episode)


# ---------------------------------------------------------------------------
# trace output

def _write_trace(path: Path, trace: np.ndarray, n_gen: int) -> None:
    header = (["t", "f_coi_hz"] + [f"f{i}_hz" for i in range(1, n_gen + 1)]
              + [f"pm{i}" for i in range(1, n_gen + 1)])
    rows = [[_fmt(x) for x in row] for row in trace]
    _write_csv(path, header, rows)


def simulate(case_path: str | Path, event: Event | None, t_end: float,
             out_dir: Path, h: float = 0.01) -> Path:
    """Open-loop run: power flow, init, integrate, dump trace.csv."""
    case = load_case(case_path)
    pf = solve_power_flow(case)
    minit, state = init_dynamics(case, pf)
    events = [event] if event is not None else []
    cfg = SimConfig(h_nominal=h)
    row0 = np.empty(2 + 2 * case.n_gen)
    row0[0] = state.t
    hcoef = np.array([g.h for g in case.generators])
    row0[1] = case.f_nominal * (1.0 + float(hcoef @ state.domega) / hcoef.sum())
    row0[2:2 + case.n_gen] = case.f_nominal * (1.0 + state.domega)
    row0[2 + case.n_gen:] = state.pm
    _, trace, _ = run_until(state, ControlInput.zero(case.n_gen), case, cfg,
                            t_end, minit, events=events)
    full = np.vstack([row0[None, :], trace]) if trace.size else row0[None, :]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "trace.csv"
    _write_trace(path, full, case.n_gen)
    return path


def evaluate(checkpoint: str | Path, env_cfg: EnvConfig, out_dir: Path):
    """Deterministic rollout of a trained agent; returns |f(T_f) - 60|.

    Writes the full 0..t_final trace at simulator resolution to trace.csv.
    """
    env = make_env(env_cfg)
    agent = load_checkpoint(checkpoint)
    if agent.obs_dim != env.n_gen or agent.act_dim != env.n_gen:
        raise CheckpointMismatch(
            f"checkpoint dimensions ({agent.obs_dim} obs, {agent.act_dim} act) "
            f"do not match the case ({env.n_gen} machines)")
    agent.set_action_bounds(env.action_low, env.action_high)
    env.seed(0)
    obs = env.reset()
    done = False
    final_f = None
    while not done:
        result = env.step(agent.act(obs))
        obs = result.obs
        done = result.done
        final_f = result.info["f_coi_hz"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_trace(out_dir / "trace.csv", env.trace(), env.n_gen)
    return abs(final_f - env.case.f_nominal), out_dir / "trace.csv"


# ---------------------------------------------------------------------------
# CLI plumbing

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--case", type=Path, default=None, help="case file")
    p.add_argument("--config", type=Path, default=None,
                   help="environment config file with an [ENV] section")
    p.add_argument("--out-dir", type=Path, default=Path("out"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=None, help="simulator step size, s")
    p.add_argument("--n-actions", type=int, default=None)
    p.add_argument("--learning-start", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)


def _env_config(args) -> EnvConfig:
    if args.config is not None:
        cfg = env_config_from_file(args.config)
    else:
        case = args.case if args.case is not None else DEFAULT_CASE
        cfg = EnvConfig(case_path=case)
    if args.case is not None:
        cfg = replace(cfg, case_path=args.case)
    if args.h is not None:
        cfg = replace(cfg, sim=replace(cfg.sim, h_nominal=args.h))
    if args.n_actions is not None:
        cfg = replace(cfg, n_actions=args.n_actions)
    return cfg


def _agent_config(args) -> DdpgConfig:
    cfg = DdpgConfig()
    if args.learning_start is not None:
        cfg = replace(cfg, learning_start=args.learning_start)
    if args.episodes is not None:
        cfg = replace(cfg, episodes=args.episodes)
    return cfg


def cmd_simulate(args) -> int:
    event = None
    if args.event_dp or args.event_dq:
        event = Event(time=args.event_time, bus=args.event_bus,
                      dp=args.event_dp, dq=args.event_dq)
    case = args.case if args.case is not None else DEFAULT_CASE
    path = simulate(case, event, args.t_end, args.out_dir,
                    h=args.h if args.h is not None else 0.01)
    print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    env_cfg = _env_config(args)
    agent_cfg = _agent_config(args)
    log, agent, _ = run_training(env_cfg, agent_cfg, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [["default", 0, ep, _fmt(f), _fmt(abs(f - 60.0)), _fmt(ret), "ok"]
            for ep, (f, ret) in enumerate(zip(log.final_f_hz,
                                              log.episode_return), start=1)]
    _write_csv(out_dir / "train_log.csv", TRAIN_LOG_HEADER, rows)
    ckpt = out_dir / "agent.ckpt"
    save_checkpoint(agent, ckpt)
    window = min(50, log.episodes)
    print(f"trained {log.episodes} episodes; last-{window} mean deviation "
          f"{log.last_window_mean_dev(window):.4f} Hz; wrote {ckpt}")
    return 0


def cmd_sweep(args) -> int:
    env_cfg = _env_config(args)
    agent_cfg = _agent_config(args)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad --values list {args.values!r}") from exc
    spec = SweepSpec(param=args.param, values=values, runs=args.runs,
                     episodes=args.episodes if args.episodes is not None else 150,
                     env_cfg=env_cfg, agent_cfg=agent_cfg, seed_base=args.seed)
    train_log, summary, n_failed = run_sweep(spec, args.out_dir,
                                             jobs=args.jobs, window=args.window)
    print(f"wrote {train_log} and {summary}")
    if n_failed:
        print(f"{n_failed} run(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    env_cfg = _env_config(args)
    dev, path = evaluate(args.checkpoint, env_cfg, args.out_dir)
    print(f"final deviation |f(T_f) - 60| = {dev:.6f} Hz; wrote {path}")
    return 0


def cmd_summarize(args) -> int:
    rows = read_train_log(args.train_log)
    stats = summarize(rows, window=args.window)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "summary.csv"
    _write_summary(path, stats)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freqctl",
        description="Load-frequency-control experiments: simulate, train, "
                    "sweep, evaluate, summarize.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="open-loop disturbance run")
    _add_common(p)
    p.add_argument("--event-bus", type=int, default=4)
    p.add_argument("--event-dp", type=float, default=0.0, help="pu load step")
    p.add_argument("--event-dq", type=float, default=0.0)
    p.add_argument("--event-time", type=float, default=1.0)
    p.add_argument("--t-end", type=float, default=20.0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="single training run")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="multi-run parameter study")
    _add_common(p)
    p.add_argument("--param", choices=("learning_start", "n_actions"),
                   default="learning_start")
    p.add_argument("--values", type=str, default="0,100,200,300,400,500",
                   help="comma-separated setting values")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--window", type=int, default=50)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="deterministic rollout of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("summarize", help="recompute summary.csv from a train log")
    _add_common(p)
    p.add_argument("--train-log", type=Path, required=True)
    p.add_argument("--window", type=int, default=50)
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, WindowTooLarge) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FreqctlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
