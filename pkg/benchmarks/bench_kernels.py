#!/usr/bin/env python3
"""Benchmark the compiled DAE kernels against the pure-numpy fallback.

Times the disturbed IEEE-14 run (the training hot loop) under each available
backend and reports steps/s, wall time, and the worst state disagreement.

Usage: python3 benchmarks/bench_kernels.py [--t-end 20] [--h 0.01]
"""

import argparse
import time
from pathlib import Path

import numpy as np

from freqctl import (ControlInput, Event, SimConfig, coi_frequency,
                     init_dynamics, load_case, run_until, solve_power_flow)
from freqctl import _kernels

CASE = Path(__file__).resolve().parents[1] / "src" / "freqctl" / "cases" / "ieee14.case"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--t-end", type=float, default=20.0)
    ap.add_argument("--h", type=float, default=0.01)
    ap.add_argument("--case", type=Path, default=CASE)
    args = ap.parse_args()

    case = load_case(args.case)
    pf = solve_power_flow(case)
    minit, state = init_dynamics(case, pf)
    u = ControlInput.zero(case.n_gen)
    cfg = SimConfig(h_nominal=args.h)
    event = Event(time=1.0, bus=4, dp=0.6)

    available = _kernels.backends()
    print(f"backends available: {', '.join(available)} "
          f"(active: {_kernels.BACKEND})")
    print(f"case: {args.case.name}, horizon {args.t_end} s, h = {args.h} s\n")

    results = {}
    for name in available:
        with _kernels.use_backend(name):
            t0 = time.perf_counter()
            s, trace, _ = run_until(state, u, case, cfg, args.t_end, minit,
                                    events=[event])
            dt = time.perf_counter() - t0
        results[name] = (s, trace, dt)
        print(f"{name:9s}: {trace.shape[0]:6d} steps in {dt:7.3f} s "
              f"({trace.shape[0] / dt:10.0f} steps/s), "
              f"f_end = {coi_frequency(s, case):.6f} Hz")

    if len(results) == 2:
        sp, sc = results["python"][0], results["compiled"][0]
        diff = max(
            float(np.max(np.abs(getattr(sp, f) - getattr(sc, f))))
            for f in ("delta", "domega", "pv", "pm", "v_mag", "v_ang"))
        speedup = results["python"][2] / results["compiled"][2]
        print(f"\nspeedup: {speedup:.1f}x, max end-state disagreement: {diff:.3e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
