"""Multi-machine frequency dynamics: implicit-trapezoidal DAE integration
with timed load-step events.

Model, per machine i (classical EMF behind transient reactance, two-lag
droop governor):

    d delta_i/dt  = w_s * domega_i
    2 H_i d domega_i/dt = pm_i - pe_i - D_i * domega_i
    Tg_i d pv_i/dt = (pref0_i + p_offset_i - domega_i / R_i) - pv_i
    Tt_i d pm_i/dt = pv_i - pm_i

coupled to complex power balances at every bus with constant-power loads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .errors import NewtonDivergence, UnknownBus
from .netmodel import CaseData, MachineInit, build_admittance


@dataclass
class SimConfig:
    h_nominal: float = 0.01
    newton_tol: float = 1e-8
    newton_max_iter: int = 20


@dataclass(frozen=True)
class Event:
    """Load step: at `time`, add (dp, dq) to the load at `bus`."""
    time: float
    bus: int
    dp: float
    dq: float = 0.0


@dataclass
class ControlInput:
    """Cumulative secondary reference offset per governor."""
    p_offset: np.ndarray

    @classmethod
    def zero(cls, n_gen: int) -> "ControlInput":
        return cls(p_offset=np.zeros(n_gen))


@dataclass
class DynamicState:
    t: float
    delta: np.ndarray
    domega: np.ndarray
    pv: np.ndarray
    pm: np.ndarray
    v_mag: np.ndarray
    v_ang: np.ndarray

    def copy(self) -> "DynamicState":
        return DynamicState(self.t, self.delta.copy(), self.domega.copy(),
                            self.pv.copy(), self.pm.copy(),
                            self.v_mag.copy(), self.v_ang.copy())


class _SimModel:
    """Contiguous parameter arrays marshalled once for the kernels."""

    def __init__(self, case: CaseData, minit: MachineInit):
        gens = case.generators
        govs = case.governors_by_gen()
        cc = np.ascontiguousarray
        self.ng = case.n_gen
        self.nb = case.n_bus
        self.gbus = cc(np.array([g.bus - 1 for g in gens], dtype=np.int64))
        self.emag = cc(minit.e_mag, dtype=float)
        self.xdp = cc(np.array([g.xdp for g in gens]))
        self.h2 = cc(np.array([2.0 * g.h for g in gens]))
        self.hcoef = cc(np.array([g.h for g in gens]))
        self.dco = cc(np.array([g.d for g in gens]))
        self.rinv = cc(np.array([1.0 / gov.r_droop for gov in govs]))
        self.tg = cc(np.array([gov.tg for gov in govs]))
        self.tt = cc(np.array([gov.tt for gov in govs]))
        self.pomax = cc(np.array([gov.p_offset_max for gov in govs]))
        self.pref = cc(minit.pref0, dtype=float)
        ybus = build_admittance(case)
        self.gmat = cc(ybus.real)
        self.bmat = cc(ybus.imag)
        self.ws = 2.0 * math.pi * case.f_nominal
        self.f_nominal = case.f_nominal
        self.pload = np.empty(self.nb)
        self.qload = np.empty(self.nb)
        self.set_loads(case)

    def set_loads(self, case: CaseData) -> None:
        for i, b in enumerate(case.buses):
            self.pload[i] = b.p_load
            self.qload[i] = b.q_load

    def params(self):
        return (self.gmat, self.bmat, self.gbus, self.emag, self.xdp, self.h2,
                self.dco, self.rinv, self.tg, self.tt, self.pref, self.ws)

    def checked_offsets(self, u: ControlInput) -> np.ndarray:
        poff = np.ascontiguousarray(u.p_offset, dtype=float)
        if poff.shape != (self.ng,):
            raise ValueError(f"p_offset must have shape ({self.ng},)")
        if np.any(np.abs(poff) > self.pomax + 1e-12):
            raise ValueError("p_offset exceeds the governor p_offset_max clamp")
        return poff


def coi_frequency(state: DynamicState, case: CaseData) -> float:
    """Center-of-inertia frequency in Hz (inertia-weighted machine mean)."""
    h = np.array([g.h for g in case.generators])
    return case.f_nominal * (1.0 + float(h @ state.domega) / float(h.sum()))


def machine_frequencies(state: DynamicState, case: CaseData) -> np.ndarray:
    """Per-machine frequency in Hz."""
    return case.f_nominal * (1.0 + state.domega)


def apply_event(case: CaseData, event: Event) -> CaseData:
    """Copy of the case with the event's load step added (value semantics)."""
    if not 1 <= event.bus <= case.n_bus:
        raise UnknownBus(f"event references missing bus {event.bus}")
    buses = list(case.buses)
    b = buses[event.bus - 1]
    buses[event.bus - 1] = replace(b, p_load=b.p_load + event.dp,
                                   q_load=b.q_load + event.dq)
    return replace(case, buses=tuple(buses))


def dynamic_residual(state: DynamicState, u: ControlInput, case: CaseData,
                     minit: MachineInit) -> np.ndarray:
    """Differential rhs and algebraic mismatches, length 4*n_gen + 2*n_bus.

    Zero exactly at an equilibrium with consistent network variables.
    """
    model = _SimModel(case, minit)
    poff = model.checked_offsets(u)
    out = np.empty(4 * model.ng + 2 * model.nb)
    _kernels.residual_eval(state.delta, state.domega, state.pv, state.pm,
                           state.v_mag, state.v_ang,
                           model.pload, model.qload, poff,
                           *model.params(), out)
    return out


def _step_buffers(state: DynamicState):
    cur = [np.ascontiguousarray(a, dtype=float).copy()
           for a in (state.delta, state.domega, state.pv, state.pm,
                     state.v_mag, state.v_ang)]
    nxt = [np.empty_like(a) for a in cur]
    return cur, nxt


def trapezoidal_step(state: DynamicState, u: ControlInput, case: CaseData,
                     cfg: SimConfig, h: float, minit: MachineInit) -> DynamicState:
    """Advance one implicit-trapezoidal step of size h."""
    if h <= 0:
        raise ValueError("step size must be positive")
    model = _SimModel(case, minit)
    poff = model.checked_offsets(u)
    cur, nxt = _step_buffers(state)
    niter, resnorm, ok = _kernels.trap_newton(
        *cur, *nxt, model.pload, model.qload, poff, *model.params(),
        h, cfg.newton_tol, cfg.newton_max_iter)
    if not ok:
        raise NewtonDivergence(
            f"trapezoidal step at t={state.t:.6f} (h={h:g}) failed after "
            f"{niter} Newton iterations, residual {resnorm:.3e}",
            iterations=niter, resnorm=resnorm)
    return DynamicState(state.t + h, *nxt)


def _resolve_algebraic(model: _SimModel, cur, cfg: SimConfig, t: float) -> None:
    """Consistent network re-solve after a load step (in place on cur)."""
    delta, _, _, _, vm, va = cur
    niter, resnorm, ok = _kernels.alg_solve(
        delta, vm, va, model.pload, model.qload,
        model.gmat, model.bmat, model.gbus, model.emag, model.xdp,
        cfg.newton_tol, cfg.newton_max_iter)
    if not ok:
        raise NewtonDivergence(
            f"network re-solve at t={t:.6f} failed after {niter} Newton "
            f"iterations, residual {resnorm:.3e}",
            iterations=niter, resnorm=resnorm)


def run_until(state: DynamicState, u: ControlInput, case: CaseData,
              cfg: SimConfig, t_target: float, minit: MachineInit,
              events: tuple[Event, ...] | list[Event] = ()):
    """Integrate to t_target, applying events at their exact instants.

    Steps never exceed cfg.h_nominal; each inter-event segment is divided into
    equal steps that land exactly on the event time / target. Returns
    (state, trace, case) where trace rows are
    [t, f_coi_hz, f_1..f_ng (Hz), pm_1..pm_ng] for every accepted step and
    case reflects any applied events.
    """
    if t_target < state.t - 1e-12:
        raise ValueError(f"t_target {t_target} precedes state.t {state.t}")
    model = _SimModel(case, minit)
    poff = model.checked_offsets(u)
    cur, nxt = _step_buffers(state)
    rows: list[np.ndarray] = []
    ng = model.ng
    fn = model.f_nominal
    hsum = float(model.hcoef.sum())

    def _row(t: float) -> np.ndarray:
        r = np.empty(2 + 2 * ng)
        r[0] = t
        r[1] = fn * (1.0 + float(model.hcoef @ cur[1]) / hsum)
        r[2:2 + ng] = fn * (1.0 + cur[1])
        r[2 + ng:] = cur[3]
        return r

    case_now = case
    pending = sorted((e for e in events), key=lambda e: e.time)

    def _apply_events_at(t: float) -> None:
        nonlocal case_now
        hit = False
        while pending and pending[0].time <= t + 1e-12:
            case_now = apply_event(case_now, pending.pop(0))
            hit = True
        if hit:
            model.set_loads(case_now)
            _resolve_algebraic(model, cur, cfg, t)

    def _advance(t0: float, t1: float, depth: int) -> None:
        """One step t0 -> t1, recursively halved on Newton failure."""
        niter, resnorm, ok = _kernels.trap_newton(
            *cur, *nxt, model.pload, model.qload, poff,
            *model.params(), t1 - t0, cfg.newton_tol, cfg.newton_max_iter)
        if ok:
            for dst, src in zip(cur, nxt):
                dst[:] = src
            return
        if depth >= 3:
            raise NewtonDivergence(
                f"trapezoidal step at t={t0:.6f} failed after {niter} "
                f"Newton iterations, residual {resnorm:.3e}",
                iterations=niter, resnorm=resnorm)
        tm = 0.5 * (t0 + t1)
        _advance(t0, tm, depth + 1)
        _advance(tm, t1, depth + 1)

    t = state.t
    _apply_events_at(t)
    boundaries = sorted({e.time for e in pending if e.time <= t_target + 1e-12})
    for tb in boundaries + [t_target]:
        seg = tb - t
        if seg > 1e-12:
            nsub = max(1, math.ceil(seg / cfg.h_nominal - 1e-9))
            ta = t
            for i in range(1, nsub + 1):
                # land exactly on the boundary regardless of rounding
                ti = tb if i == nsub else ta + seg * i / nsub
                _advance(t, ti, 0)
                t = ti
                rows.append(_row(t))
        _apply_events_at(tb)

    final = DynamicState(t, *cur)
    trace = np.array(rows) if rows else np.empty((0, 2 + 2 * ng))
    return final, trace, case_now
