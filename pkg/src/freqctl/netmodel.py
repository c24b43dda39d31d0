"""Case files, network admittance, Newton power flow, and equilibrium initialization.

Cases are plain-text section files (``[META]``, ``[BUS]``, ``[BRANCH]``,
``[GEN]``, ``[GOV]``) with ``#`` comments and whitespace-separated columns;
see the shipped files under ``freqctl/cases``. All quantities are per-unit on
the system MVA base except inertia/time constants (seconds) and frequency (Hz).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InitError, NonConvergence, ParseError, ValidationError

BUS_KINDS = ("slack", "pv", "pq")

_CASE_SECTIONS = ("META", "BUS", "BRANCH", "GEN", "GOV")


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    p_load: float = 0.0
    q_load: float = 0.0
    v_set: float = 1.0      # used for slack/pv only
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0        # off-nominal ratio on the from side


@dataclass(frozen=True)
class Generator:
    bus: int
    p_set: float
    v_set: float
    h: float                # inertia constant, s
    d: float                # damping, pu torque per pu speed
    xdp: float              # transient reactance, pu


@dataclass(frozen=True)
class Governor:
    gen: int                # 1-based index into the generator list
    r_droop: float
    tg: float
    tt: float
    p_offset_max: float


@dataclass(frozen=True)
class CaseData:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    governors: tuple[Governor, ...]
    base_mva: float = 100.0
    f_nominal: float = 60.0

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    def bus(self, bus_id: int) -> Bus:
        if not 1 <= bus_id <= self.n_bus:
            raise KeyError(f"no bus {bus_id}")
        return self.buses[bus_id - 1]

    def governors_by_gen(self) -> tuple[Governor, ...]:
        """Governors reordered so entry i belongs to generator i."""
        by_gen = {gov.gen: gov for gov in self.governors}
        return tuple(by_gen[i + 1] for i in range(self.n_gen))


@dataclass(frozen=True)
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    iterations: int
    max_mismatch: float


@dataclass(frozen=True)
class MachineInit:
    e_mag: np.ndarray       # internal EMF magnitude per machine
    delta0: np.ndarray      # rotor angle, rad
    pm0: np.ndarray         # initial mechanical power
    pref0: np.ndarray       # initial governor reference (= pm0)


# ---------------------------------------------------------------------------
# parsing

def read_sections(text: str, allowed: tuple[str, ...]) -> dict[str, list[list[str]]]:
    """Tokenize section-format text into {section: [row tokens, ...]}."""
    sections: dict[str, list[list[str]]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError(f"line {lineno}: malformed section header {raw!r}")
            name = line[1:-1].strip().upper()
            if name not in allowed:
                raise ParseError(f"line {lineno}: unknown section [{name}]")
            current = name
            sections.setdefault(name, [])
            continue
        if current is None:
            raise ParseError(f"line {lineno}: data before any section header")
        sections[current].append(line.split())
    return sections


def _num(tok: str, what: str) -> float:
    try:
        return float(tok)
    except ValueError as exc:
        raise ParseError(f"bad {what}: {tok!r}") from exc


def _intval(tok: str, what: str) -> int:
    try:
        return int(tok)
    except ValueError as exc:
        raise ParseError(f"bad {what}: {tok!r}") from exc


def _row(tokens: list[str], n_required: int, n_total: int, section: str) -> list[str]:
    if not n_required <= len(tokens) <= n_total:
        raise ParseError(f"[{section}] row has {len(tokens)} columns, "
                         f"expected {n_required}..{n_total}: {' '.join(tokens)!r}")
    return tokens + [""] * (n_total - len(tokens))


def parse_case(text: str) -> CaseData:
    """Parse and validate case-file contents."""
    sections = read_sections(text, _CASE_SECTIONS)

    meta = {"base_mva": 100.0, "f_nominal": 60.0}
    for tokens in sections.get("META", []):
        if len(tokens) != 2:
            raise ParseError(f"[META] rows are 'key value': {' '.join(tokens)!r}")
        key = tokens[0].lower()
        if key not in meta:
            raise ParseError(f"unknown [META] key {key!r}")
        meta[key] = _num(tokens[1], key)

    buses = []
    for tokens in sections.get("BUS", []):
        t = _row(tokens, 4, 6, "BUS")
        kind = t[1].lower()
        if kind not in BUS_KINDS:
            raise ParseError(f"bus kind must be one of {BUS_KINDS}: {t[1]!r}")
        buses.append(Bus(
            id=_intval(t[0], "bus id"),
            kind=kind,
            p_load=_num(t[2], "p_load"),
            q_load=_num(t[3], "q_load"),
            v_set=_num(t[4], "v_set") if t[4] else 1.0,
            shunt_b=_num(t[5], "shunt_b") if t[5] else 0.0,
        ))

    branches = []
    for tokens in sections.get("BRANCH", []):
        t = _row(tokens, 4, 6, "BRANCH")
        branches.append(Branch(
            from_bus=_intval(t[0], "from_bus"),
            to_bus=_intval(t[1], "to_bus"),
            r=_num(t[2], "r"),
            x=_num(t[3], "x"),
            b_charging=_num(t[4], "b_charging") if t[4] else 0.0,
            tap=_num(t[5], "tap") if t[5] else 1.0,
        ))

    generators = []
    for tokens in sections.get("GEN", []):
        t = _row(tokens, 6, 6, "GEN")
        generators.append(Generator(
            bus=_intval(t[0], "gen bus"),
            p_set=_num(t[1], "p_set"),
            v_set=_num(t[2], "v_set"),
            h=_num(t[3], "h"),
            d=_num(t[4], "d"),
            xdp=_num(t[5], "xdp"),
        ))

    governors = []
    for tokens in sections.get("GOV", []):
        t = _row(tokens, 5, 5, "GOV")
        governors.append(Governor(
            gen=_intval(t[0], "governor gen index"),
            r_droop=_num(t[1], "r_droop"),
            tg=_num(t[2], "tg"),
            tt=_num(t[3], "tt"),
            p_offset_max=_num(t[4], "p_offset_max"),
        ))

    buses.sort(key=lambda b: b.id)
    case = CaseData(
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(generators),
        governors=tuple(governors),
        base_mva=meta["base_mva"],
        f_nominal=meta["f_nominal"],
    )
    validate_case(case)
    return case


def load_case(path: str | Path) -> CaseData:
    return parse_case(Path(path).read_text(encoding="utf-8"))


def validate_case(case: CaseData) -> None:
    """Check every CaseData invariant; raise ValidationError on the first hit."""
    if not case.buses:
        raise ValidationError("case has no buses")
    ids = [b.id for b in case.buses]
    if ids != list(range(1, len(ids) + 1)):
        raise ValidationError(f"bus ids must be unique and contiguous from 1, got {ids}")
    slack = [b.id for b in case.buses if b.kind == "slack"]
    if len(slack) != 1:
        raise ValidationError(f"exactly one slack bus required, found {len(slack)}")
    for b in case.buses:
        if b.v_set <= 0:
            raise ValidationError(f"bus {b.id}: v_set must be positive")

    for br in case.branches:
        if br.x <= 0:
            raise ValidationError(f"branch {br.from_bus}-{br.to_bus}: x must be > 0")
        if br.from_bus == br.to_bus:
            raise ValidationError(f"branch {br.from_bus}-{br.to_bus}: self loop")
        if br.tap <= 0:
            raise ValidationError(f"branch {br.from_bus}-{br.to_bus}: tap must be > 0")
        for end in (br.from_bus, br.to_bus):
            if not 1 <= end <= case.n_bus:
                raise ValidationError(f"branch references missing bus {end}")

    seen_gen_bus: set[int] = set()
    for i, g in enumerate(case.generators, start=1):
        if not 1 <= g.bus <= case.n_bus:
            raise ValidationError(f"generator {i} references missing bus {g.bus}")
        if case.bus(g.bus).kind == "pq":
            raise ValidationError(f"generator {i}: bus {g.bus} must be slack or pv")
        if g.bus in seen_gen_bus:
            raise ValidationError(f"more than one generator on bus {g.bus}")
        seen_gen_bus.add(g.bus)
        if g.h <= 0 or g.xdp <= 0 or g.d < 0:
            raise ValidationError(f"generator {i}: need h > 0, xdp > 0, d >= 0")
    for b in case.buses:
        if b.kind in ("slack", "pv") and b.id not in seen_gen_bus:
            raise ValidationError(f"{b.kind} bus {b.id} has no generator")

    gov_gens = [gov.gen for gov in case.governors]
    if sorted(gov_gens) != list(range(1, case.n_gen + 1)):
        raise ValidationError(
            f"each generator needs exactly one governor; governors cover {sorted(gov_gens)} "
            f"for {case.n_gen} generators")
    for gov in case.governors:
        if gov.r_droop <= 0 or gov.tg <= 0 or gov.tt <= 0 or gov.p_offset_max <= 0:
            raise ValidationError(
                f"governor for gen {gov.gen}: r_droop, tg, tt, p_offset_max must be > 0")


def serialize_case(case: CaseData) -> str:
    """Render CaseData back to the section format; parse(serialize(c)) == c."""
    out = ["[META]",
           f"base_mva {case.base_mva!r}",
           f"f_nominal {case.f_nominal!r}",
           "", "[BUS]"]
    for b in case.buses:
        out.append(f"{b.id} {b.kind} {b.p_load!r} {b.q_load!r} {b.v_set!r} {b.shunt_b!r}")
    out.append("")
    out.append("[BRANCH]")
    for br in case.branches:
        out.append(f"{br.from_bus} {br.to_bus} {br.r!r} {br.x!r} {br.b_charging!r} {br.tap!r}")
    out.append("")
    out.append("[GEN]")
    for g in case.generators:
        out.append(f"{g.bus} {g.p_set!r} {g.v_set!r} {g.h!r} {g.d!r} {g.xdp!r}")
    out.append("")
    out.append("[GOV]")
    for gov in case.governors:
        out.append(f"{gov.gen} {gov.r_droop!r} {gov.tg!r} {gov.tt!r} {gov.p_offset_max!r}")
    out.append("")
    return "\n".join(out)


def lossless_variant(case: CaseData) -> CaseData:
    """Copy of the case with all branch resistances zeroed (lossless in P)."""
    branches = tuple(replace(br, r=0.0) for br in case.branches)
    return replace(case, branches=branches)


# ---------------------------------------------------------------------------
# admittance and power flow

def build_admittance(case: CaseData) -> np.ndarray:
    """Dense complex bus-admittance matrix (pi branch model, from-side taps)."""
    n = case.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        f, t = br.from_bus - 1, br.to_bus - 1
        ys = 1.0 / complex(br.r, br.x)
        bc = 0.5j * br.b_charging
        y[f, f] += (ys + bc) / (br.tap * br.tap)
        y[t, t] += ys + bc
        y[f, t] -= ys / br.tap
        y[t, f] -= ys / br.tap
    for b in case.buses:
        y[b.id - 1, b.id - 1] += 1j * b.shunt_b
    return y


def power_injections(ybus: np.ndarray, v_mag: np.ndarray, v_ang: np.ndarray) -> np.ndarray:
    """Complex bus injections S = V (Y V)* flowing into the network."""
    v = v_mag * np.exp(1j * v_ang)
    return v * np.conj(ybus @ v)


def injection_jacobians(ybus, v_mag, v_ang):
    """dS/d|V| and dS/dtheta in complex form (dense)."""
    v = v_mag * np.exp(1j * v_ang)
    i_bus = ybus @ v
    vn = np.exp(1j * v_ang)
    ds_dva = 1j * v[:, None] * np.conj(np.diag(i_bus) - ybus * v[None, :])
    ds_dvm = v[:, None] * np.conj(ybus * vn[None, :]) + np.diag(np.conj(i_bus) * vn)
    return ds_dvm, ds_dva


def _pf_newton(case, ybus, v, th, tol, max_iter):
    """Polar Newton-Raphson on (theta at pv+pq, |V| at pq), in place.

    Returns (v, th, iterations, max_mismatch); raises NonConvergence.
    """
    kinds = [b.kind for b in case.buses]
    pvpq = np.array([i for i, k in enumerate(kinds) if k != "slack"], dtype=int)
    pq = np.array([i for i, k in enumerate(kinds) if k == "pq"], dtype=int)
    npvpq = pvpq.size

    p_spec = np.array([-b.p_load for b in case.buses])
    q_spec = np.array([-b.q_load for b in case.buses])
    for g in case.generators:
        p_spec[g.bus - 1] += g.p_set

    mism = 0.0
    for it in range(max_iter + 1):
        s = power_injections(ybus, v, th)
        f = np.concatenate([p_spec[pvpq] - s.real[pvpq], q_spec[pq] - s.imag[pq]])
        mism = float(np.max(np.abs(f))) if f.size else 0.0
        if not np.isfinite(mism):
            raise NonConvergence(
                f"power flow produced non-finite mismatch at iteration {it}",
                iterations=it, mismatch=mism)
        if mism <= tol:
            return v, th, it, mism
        if it == max_iter:
            break
        ds_dvm, ds_dva = injection_jacobians(ybus, v, th)
        jac = np.block([
            [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
            [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
        ])
        try:
            dx = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError as exc:
            raise NonConvergence(
                f"singular power-flow Jacobian at iteration {it} "
                f"(mismatch {mism:.3e})", iterations=it, mismatch=mism) from exc
        th[pvpq] += dx[:npvpq]
        v[pq] += dx[npvpq:]
        if np.any(v <= 0.0) or not np.isfinite(v).all():
            raise NonConvergence(
                f"voltage solution collapsed at iteration {it} (mismatch {mism:.3e})",
                iterations=it, mismatch=mism)
    raise NonConvergence(
        f"power flow did not converge in {max_iter} iterations "
        f"(last mismatch {mism:.3e})", iterations=max_iter, mismatch=mism)


def solve_power_flow(case: CaseData, tol: float = 1e-8, max_iter: int = 20) -> PowerFlowSolution:
    """Newton power flow from a flat start (slack/pv buses held at v_set)."""
    ybus = build_admittance(case)
    v = np.ones(case.n_bus)
    th = np.zeros(case.n_bus)
    for b in case.buses:
        if b.kind != "pq":
            v[b.id - 1] = b.v_set
    for g in case.generators:
        v[g.bus - 1] = g.v_set
    v, th, iters, mism = _pf_newton(case, ybus, v, th, tol, max_iter)
    s = power_injections(ybus, v, th)
    return PowerFlowSolution(v_mag=v, v_ang=th, p_inj=s.real, q_inj=s.imag,
                             iterations=iters, max_mismatch=mism)


def init_dynamics(case: CaseData, pf: PowerFlowSolution):
    """Initialize the classical-machine model at equilibrium.

    Computes the internal EMF behind xdp from the terminal conditions, sets
    zero speed deviation, and picks governor states so every derivative is
    exactly zero. Returns (MachineInit, DynamicState).
    """
    from .dynamics import DynamicState  # deferred to avoid an import cycle

    ybus = build_admittance(case)
    v, th = pf.v_mag.copy(), pf.v_ang.copy()
    # Polish to near machine precision so the full dynamic residual starts ~0.
    v, th, _, _ = _pf_newton(case, ybus, v, th, tol=1e-12, max_iter=6)
    s = power_injections(ybus, v, th)

    ng = case.n_gen
    e_mag = np.zeros(ng)
    delta0 = np.zeros(ng)
    pm0 = np.zeros(ng)
    for i, g in enumerate(case.generators):
        b = g.bus - 1
        bus = case.buses[b]
        sg = complex(s.real[b] + bus.p_load, s.imag[b] + bus.q_load)
        vb = v[b] * np.exp(1j * th[b])
        ig = np.conj(sg / vb)
        emf = vb + 1j * g.xdp * ig
        e_mag[i] = abs(emf)
        delta0[i] = float(np.angle(emf))
        pm0[i] = e_mag[i] * v[b] * np.sin(delta0[i] - th[b]) / g.xdp
        if abs(pm0[i] - sg.real) > 1e-8:
            raise InitError(
                f"machine {i + 1} power {pm0[i]:.9f} inconsistent with power-flow "
                f"injection {sg.real:.9f}")

    minit = MachineInit(e_mag=e_mag, delta0=delta0, pm0=pm0, pref0=pm0.copy())
    state = DynamicState(
        t=0.0,
        delta=delta0.copy(),
        domega=np.zeros(ng),
        pv=pm0.copy(),
        pm=pm0.copy(),
        v_mag=v,
        v_ang=th,
    )
    return minit, state
