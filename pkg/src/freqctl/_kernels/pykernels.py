"""Pure-numpy fallback for the DAE inner-loop kernels.

Call signatures match ``_ckernels`` exactly; ``freqctl._kernels`` selects one
of the two at import time. State layout everywhere:

    z = [delta (ng), domega (ng), valve (ng), pm (ng), |V| (nb), theta (nb)]

with residual rows ordered the same way (4*ng differential relations followed
by nb active- and nb reactive-power balances).
"""

from __future__ import annotations

import numpy as np

from ..netmodel import injection_jacobians


def _machine_pq(delta, vm, va, gbus, emag, xdp):
    vb = vm[gbus]
    ang = delta - va[gbus]
    pg = emag * vb * np.sin(ang) / xdp
    qg = (emag * vb * np.cos(ang) - vb * vb) / xdp
    return pg, qg


def _alg_residual(delta, vm, va, pload, qload, ybus, gbus, emag, xdp):
    v = vm * np.exp(1j * va)
    s = v * np.conj(ybus @ v)
    pg, qg = _machine_pq(delta, vm, va, gbus, emag, xdp)
    rp = -pload - s.real
    rq = -qload - s.imag
    np.add.at(rp, gbus, pg)
    np.add.at(rq, gbus, qg)
    return rp, rq


def _diff_rhs(delta, omega, valve, pm, vm, va, poff,
              gbus, emag, xdp, h2, dco, rinv, tg, tt, pref, ws):
    pe = emag * vm[gbus] * np.sin(delta - va[gbus]) / xdp
    fd = ws * omega
    fo = (pm - pe - dco * omega) / h2
    fv = (pref + poff - rinv * omega - valve) / tg
    fm = (valve - pm) / tt
    return fd, fo, fv, fm


def _machine_derivs(delta, vm, va, gbus, emag, xdp):
    """Partial derivatives of the machine P/Q injections.

    c1 = dP/ddelta, s1 = dP/d|V_b|, t1 = -dQ/ddelta (= P itself),
    u1 = dQ/d|V_b|.
    """
    vb = vm[gbus]
    ang = delta - va[gbus]
    c1 = emag * vb * np.cos(ang) / xdp
    s1 = emag * np.sin(ang) / xdp
    t1 = emag * vb * np.sin(ang) / xdp
    u1 = (emag * np.cos(ang) - 2.0 * vb) / xdp
    return c1, s1, t1, u1


def _alg_jacobian(delta, vm, va, ybus, gbus, emag, xdp):
    """Jacobian of the 2*nb power balances wrt (delta, |V|, theta)."""
    nb = vm.size
    ng = delta.size
    ds_dvm, ds_dva = injection_jacobians(ybus, vm, va)
    jpv = -ds_dvm.real
    jpa = -ds_dva.real
    jqv = -ds_dvm.imag
    jqa = -ds_dva.imag
    c1, s1, t1, u1 = _machine_derivs(delta, vm, va, gbus, emag, xdp)
    cols = np.arange(ng)
    jpd = np.zeros((nb, ng))
    jqd = np.zeros((nb, ng))
    jpd[gbus, cols] = c1
    jqd[gbus, cols] = -t1
    np.add.at(jpv, (gbus, gbus), s1)
    np.add.at(jpa, (gbus, gbus), -c1)
    np.add.at(jqv, (gbus, gbus), u1)
    np.add.at(jqa, (gbus, gbus), t1)
    return jpd, jqd, jpv, jpa, jqv, jqa


def residual_eval(delta, omega, valve, pm, vm, va, pload, qload, poff,
                  gmat, bmat, gbus, emag, xdp, h2, dco, rinv, tg, tt, pref, ws,
                  out):
    """Concatenated differential rhs and algebraic mismatches at a state."""
    ng = delta.size
    nb = vm.size
    ybus = gmat + 1j * bmat
    fd, fo, fv, fm = _diff_rhs(delta, omega, valve, pm, vm, va, poff,
                               gbus, emag, xdp, h2, dco, rinv, tg, tt, pref, ws)
    rp, rq = _alg_residual(delta, vm, va, pload, qload, ybus, gbus, emag, xdp)
    out[0:ng] = fd
    out[ng:2 * ng] = fo
    out[2 * ng:3 * ng] = fv
    out[3 * ng:4 * ng] = fm
    out[4 * ng:4 * ng + nb] = rp
    out[4 * ng + nb:] = rq
    return out


def trap_newton(delta0, omega0, valve0, pm0, vm0, va0,
                delta1, omega1, valve1, pm1, vm1, va1,
                pload, qload, poff,
                gmat, bmat, gbus, emag, xdp, h2, dco, rinv, tg, tt, pref, ws,
                h, tol, maxit):
    """One implicit-trapezoidal step solved by a full Newton iteration.

    Inputs are the state at t; outputs (the ``*1`` arrays) are overwritten
    with the state at t+h. Returns (iterations, residual_norm, ok).
    """
    ng = delta0.size
    nb = vm0.size
    n4 = 4 * ng
    dim = n4 + 2 * nb
    ybus = gmat + 1j * bmat

    f0 = np.concatenate(_diff_rhs(delta0, omega0, valve0, pm0, vm0, va0, poff,
                                  gbus, emag, xdp, h2, dco, rinv, tg, tt, pref, ws))
    x0 = np.concatenate([delta0, omega0, valve0, pm0])

    delta1[:] = delta0
    omega1[:] = omega0
    valve1[:] = valve0
    pm1[:] = pm0
    vm1[:] = vm0
    va1[:] = va0

    half_h = 0.5 * h
    idx = np.arange(ng)
    resnorm = np.inf
    it = 0
    for it in range(maxit + 1):
        f1 = np.concatenate(_diff_rhs(delta1, omega1, valve1, pm1, vm1, va1, poff,
                                      gbus, emag, xdp, h2, dco, rinv, tg, tt, pref, ws))
        x1 = np.concatenate([delta1, omega1, valve1, pm1])
        rp, rq = _alg_residual(delta1, vm1, va1, pload, qload, ybus, gbus, emag, xdp)
        res = np.concatenate([x1 - x0 - half_h * (f0 + f1), rp, rq])
        resnorm = float(np.max(np.abs(res)))
        if not np.isfinite(resnorm):
            return it, resnorm, 0
        if resnorm <= tol:
            return it, resnorm, 1
        if it == maxit:
            return it, resnorm, 0

        c1, s1, _, _ = _machine_derivs(delta1, vm1, va1, gbus, emag, xdp)
        jf = np.zeros((n4, dim))
        jf[idx, ng + idx] = ws
        jf[ng + idx, idx] = -c1 / h2
        jf[ng + idx, ng + idx] = -dco / h2
        jf[ng + idx, 3 * ng + idx] = 1.0 / h2
        jf[ng + idx, n4 + gbus] = -s1 / h2
        jf[ng + idx, n4 + nb + gbus] = c1 / h2
        jf[2 * ng + idx, ng + idx] = -rinv / tg
        jf[2 * ng + idx, 2 * ng + idx] = -1.0 / tg
        jf[3 * ng + idx, 2 * ng + idx] = 1.0 / tt
        jf[3 * ng + idx, 3 * ng + idx] = -1.0 / tt

        jpd, jqd, jpv, jpa, jqv, jqa = _alg_jacobian(delta1, vm1, va1, ybus,
                                                     gbus, emag, xdp)
        jac = np.zeros((dim, dim))
        jac[:n4] = -half_h * jf
        jac[np.arange(n4), np.arange(n4)] += 1.0
        jac[n4:n4 + nb, 0:ng] = jpd
        jac[n4 + nb:, 0:ng] = jqd
        jac[n4:n4 + nb, n4:n4 + nb] = jpv
        jac[n4:n4 + nb, n4 + nb:] = jpa
        jac[n4 + nb:, n4:n4 + nb] = jqv
        jac[n4 + nb:, n4 + nb:] = jqa

        try:
            dz = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            return it, resnorm, 0
        delta1 += dz[0:ng]
        omega1 += dz[ng:2 * ng]
        valve1 += dz[2 * ng:3 * ng]
        pm1 += dz[3 * ng:4 * ng]
        vm1 += dz[n4:n4 + nb]
        va1 += dz[n4 + nb:]
    return it, resnorm, 0


def alg_solve(delta, vm, va, pload, qload,
              gmat, bmat, gbus, emag, xdp, tol, maxit):
    """Re-solve the network equations in place, machine states held fixed.

    Used for consistent re-initialization right after a load-step event.
    Returns (iterations, residual_norm, ok).
    """
    nb = vm.size
    ybus = gmat + 1j * bmat
    resnorm = np.inf
    it = 0
    for it in range(maxit + 1):
        rp, rq = _alg_residual(delta, vm, va, pload, qload, ybus, gbus, emag, xdp)
        res = np.concatenate([rp, rq])
        resnorm = float(np.max(np.abs(res)))
        if not np.isfinite(resnorm):
            return it, resnorm, 0
        if resnorm <= tol:
            return it, resnorm, 1
        if it == maxit:
            return it, resnorm, 0
        _, _, jpv, jpa, jqv, jqa = _alg_jacobian(delta, vm, va, ybus, gbus, emag, xdp)
        jac = np.block([[jpv, jpa], [jqv, jqa]])
        try:
            dz = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            return it, resnorm, 0
        vm += dz[:nb]
        va += dz[nb:]
    return it, resnorm, 0
