"""Agreement between the compiled and pure-python kernel backends."""

from pathlib import Path

import numpy as np
import pytest

from freqctl import (ControlInput, Event, SimConfig, init_dynamics, load_case,
                     run_until, solve_power_flow)
from freqctl import _kernels
from freqctl._kernels import pykernels
from freqctl.dynamics import _SimModel

CASES = Path(__file__).resolve().parents[1] / "src" / "freqctl" / "cases"

HAVE_COMPILED = "compiled" in _kernels.backends()

needs_compiled = pytest.mark.skipif(
    not HAVE_COMPILED, reason="compiled kernels not built")


@pytest.fixture(scope="module")
def setup14():
    case = load_case(CASES / "ieee14.case")
    pf = solve_power_flow(case)
    minit, state = init_dynamics(case, pf)
    return case, minit, state


def _kernel_args(case, minit, state, poff=None):
    model = _SimModel(case, minit)
    poff = np.zeros(model.ng) if poff is None else poff
    arrays = (state.delta.copy(), state.domega.copy(), state.pv.copy(),
              state.pm.copy(), state.v_mag.copy(), state.v_ang.copy())
    return model, poff, arrays


@needs_compiled
def test_residual_eval_matches(setup14):
    case, minit, state = setup14
    model, poff, arrays = _kernel_args(case, minit, state)
    rng = np.random.default_rng(3)
    pert = [a + rng.normal(0, 0.01, a.shape) for a in arrays]
    out_py = np.empty(4 * model.ng + 2 * model.nb)
    out_cy = np.empty_like(out_py)
    pykernels.residual_eval(*pert, model.pload, model.qload, poff,
                            *model.params(), out_py)
    _kernels.backends()["compiled"].residual_eval(
        *pert, model.pload, model.qload, poff, *model.params(), out_cy)
    assert np.max(np.abs(out_py - out_cy)) < 1e-13


@needs_compiled
def test_trap_newton_matches(setup14):
    case, minit, state = setup14
    model, poff, arrays = _kernel_args(case, minit, state)
    poff = poff + 0.02
    outs_py = [np.empty_like(a) for a in arrays]
    outs_cy = [np.empty_like(a) for a in arrays]
    it_py, rn_py, ok_py = pykernels.trap_newton(
        *arrays, *outs_py, model.pload, model.qload, poff, *model.params(),
        0.01, 1e-12, 20)
    it_cy, rn_cy, ok_cy = _kernels.backends()["compiled"].trap_newton(
        *arrays, *outs_cy, model.pload, model.qload, poff, *model.params(),
        0.01, 1e-12, 20)
    assert ok_py == ok_cy == 1
    assert it_py == it_cy
    for a, b in zip(outs_py, outs_cy):
        assert np.max(np.abs(a - b)) < 1e-11


@needs_compiled
def test_trajectory_matches(setup14):
    case, minit, state = setup14
    u = ControlInput.zero(case.n_gen)
    cfg = SimConfig(newton_tol=1e-11)
    ev = Event(time=1.0, bus=4, dp=0.6)
    results = {}
    for name in ("python", "compiled"):
        with _kernels.use_backend(name):
            s, tr, _ = run_until(state, u, case, cfg, 5.0, minit, events=[ev])
        results[name] = (np.concatenate([s.delta, s.domega, s.pv, s.pm,
                                         s.v_mag, s.v_ang]), tr)
    dz = np.abs(results["python"][0] - results["compiled"][0]).max()
    dtr = np.abs(results["python"][1] - results["compiled"][1]).max()
    assert dz < 1e-9
    assert dtr < 1e-9


def test_trap_jacobian_consistent_with_residual(setup14):
    """Newton converges quadratically only if the Jacobian matches the
    residual; verify directly with finite differences on the python backend."""
    case, minit, state = setup14
    model, poff, _ = _kernel_args(case, minit, state)
    rng = np.random.default_rng(7)
    base = np.concatenate([state.delta, state.domega, state.pv, state.pm,
                           state.v_mag, state.v_ang])
    base = base + rng.normal(0, 0.005, base.size)
    ng, nb = model.ng, model.nb
    n4 = 4 * ng

    def split(z):
        return (z[:ng], z[ng:2 * ng], z[2 * ng:3 * ng], z[3 * ng:4 * ng],
                z[n4:n4 + nb], z[n4 + nb:])

    x0 = split(base.copy())

    def trap_res(z):
        f0 = np.concatenate(pykernels._diff_rhs(
            *x0[:6], poff, model.gbus, model.emag, model.xdp, model.h2,
            model.dco, model.rinv, model.tg, model.tt, model.pref, model.ws))
        parts = split(z)
        f1 = np.concatenate(pykernels._diff_rhs(
            *parts, poff, model.gbus, model.emag, model.xdp, model.h2,
            model.dco, model.rinv, model.tg, model.tt, model.pref, model.ws))
        x1 = np.concatenate(parts[:4])
        x0cat = np.concatenate(x0[:4])
        rp, rq = pykernels._alg_residual(
            parts[0], parts[4], parts[5], model.pload, model.qload,
            model.gmat + 1j * model.bmat, model.gbus, model.emag, model.xdp)
        h = 0.02
        return np.concatenate([x1 - x0cat - 0.5 * h * (f0 + f1), rp, rq])

    # Newton with the finite-difference Jacobian of this residual must
    # contract quadratically (r_{k+1} ~ C r_k^2); a mismatch between the
    # backend residual and the model would break the sequence
    def fd_newton_step(z):
        eps = 1e-7
        jac = np.zeros((base.size, base.size))
        for j in range(base.size):
            zp, zm = z.copy(), z.copy()
            zp[j] += eps
            zm[j] -= eps
            jac[:, j] = (trap_res(zp) - trap_res(zm)) / (2 * eps)
        return z - np.linalg.solve(jac, trap_res(z))

    z = base + rng.normal(0, 1e-3, base.size)
    r0 = np.max(np.abs(trap_res(z)))
    z = fd_newton_step(z)
    r1 = np.max(np.abs(trap_res(z)))
    z = fd_newton_step(z)
    r2 = np.max(np.abs(trap_res(z)))
    assert r1 < 10.0 * r0 ** 2
    assert r2 < 10.0 * r1 ** 2
