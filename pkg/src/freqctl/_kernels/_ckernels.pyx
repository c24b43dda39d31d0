"""Compiled inner-loop kernels: trapezoidal Newton step, network re-solve,
and the combined differential/algebraic residual.

Mirrors ``pykernels`` exactly (same signatures, same state layout
[delta, domega, valve, pm, |V|, theta]). The Newton matrix is assembled
transposed into a C-contiguous array so LAPACK ``dgesv`` can consume it
column-major without a copy.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, fabs, sin
from scipy.linalg.cython_lapack cimport dgesv

cnp.import_array()


cdef void _diff_rhs(double[::1] delta, double[::1] omega, double[::1] valve,
                    double[::1] pmech, double[::1] vm, double[::1] va,
                    double[::1] poff, cnp.int64_t[::1] gbus,
                    double[::1] emag, double[::1] xdp, double[::1] h2,
                    double[::1] dco, double[::1] rinv, double[::1] tg,
                    double[::1] tt, double[::1] pref, double ws,
                    double[::1] fd, double[::1] fo, double[::1] fv,
                    double[::1] fm) noexcept:
    cdef Py_ssize_t i, b
    cdef double pe
    for i in range(delta.shape[0]):
        b = gbus[i]
        pe = emag[i] * vm[b] * sin(delta[i] - va[b]) / xdp[i]
        fd[i] = ws * omega[i]
        fo[i] = (pmech[i] - pe - dco[i] * omega[i]) / h2[i]
        fv[i] = (pref[i] + poff[i] - rinv[i] * omega[i] - valve[i]) / tg[i]
        fm[i] = (valve[i] - pmech[i]) / tt[i]


cdef void _alg_residual(double[::1] delta, double[::1] vm, double[::1] va,
                        double[::1] pload, double[::1] qload,
                        double[:, ::1] gmat, double[:, ::1] bmat,
                        cnp.int64_t[::1] gbus, double[::1] emag,
                        double[::1] xdp,
                        double[::1] rp, double[::1] rq) noexcept:
    cdef Py_ssize_t nb = vm.shape[0], ng = delta.shape[0]
    cdef Py_ssize_t b, k, i
    cdef double pnet, qnet, th, c, s, g, bb, vb, ang
    for b in range(nb):
        pnet = 0.0
        qnet = 0.0
        for k in range(nb):
            g = gmat[b, k]
            bb = bmat[b, k]
            if g == 0.0 and bb == 0.0:
                continue
            th = va[b] - va[k]
            c = cos(th)
            s = sin(th)
            pnet += vm[k] * (g * c + bb * s)
            qnet += vm[k] * (g * s - bb * c)
        rp[b] = -pload[b] - vm[b] * pnet
        rq[b] = -qload[b] - vm[b] * qnet
    for i in range(ng):
        b = gbus[i]
        vb = vm[b]
        ang = delta[i] - va[b]
        rp[b] += emag[i] * vb * sin(ang) / xdp[i]
        rq[b] += (emag[i] * vb * cos(ang) - vb * vb) / xdp[i]


cdef void _fill_alg_jac(double[::1] delta, double[::1] vm, double[::1] va,
                        double[:, ::1] gmat, double[:, ::1] bmat,
                        cnp.int64_t[::1] gbus, double[::1] emag,
                        double[::1] xdp,
                        double[:, ::1] amat, Py_ssize_t row0, Py_ssize_t cv,
                        Py_ssize_t cth, Py_ssize_t cdelta,
                        bint with_delta) noexcept:
    """Write the power-balance Jacobian rows into amat (amat[col, row] = J[row, col])."""
    cdef Py_ssize_t nb = vm.shape[0], ng = delta.shape[0]
    cdef Py_ssize_t b, k, i, rp_, rq_
    cdef double g, bb, th, c, s, pk, qk
    cdef double dpdvb, dpdthb, dqdvb, dqdthb
    cdef double vb, ang, c1, s1, t1, u1
    for b in range(nb):
        rp_ = row0 + b
        rq_ = row0 + nb + b
        dpdvb = 0.0
        dpdthb = 0.0
        dqdvb = 0.0
        dqdthb = 0.0
        for k in range(nb):
            g = gmat[b, k]
            bb = bmat[b, k]
            if g == 0.0 and bb == 0.0:
                continue
            if k == b:
                dpdvb += 2.0 * vm[b] * g
                dqdvb += -2.0 * vm[b] * bb
                continue
            th = va[b] - va[k]
            c = cos(th)
            s = sin(th)
            pk = g * c + bb * s
            qk = g * s - bb * c
            # residual = machines - load - net, so network partials enter negated
            amat[cv + k, rp_] = -vm[b] * pk
            amat[cth + k, rp_] = -vm[b] * vm[k] * qk
            amat[cv + k, rq_] = -vm[b] * qk
            amat[cth + k, rq_] = vm[b] * vm[k] * pk
            dpdvb += vm[k] * pk
            dpdthb += vm[b] * vm[k] * (-qk)
            dqdvb += vm[k] * qk
            dqdthb += vm[b] * vm[k] * pk
        amat[cv + b, rp_] = -dpdvb
        amat[cth + b, rp_] = -dpdthb
        amat[cv + b, rq_] = -dqdvb
        amat[cth + b, rq_] = -dqdthb
    for i in range(ng):
        b = gbus[i]
        vb = vm[b]
        ang = delta[i] - va[b]
        c1 = emag[i] * vb * cos(ang) / xdp[i]
        s1 = emag[i] * sin(ang) / xdp[i]
        t1 = emag[i] * vb * sin(ang) / xdp[i]
        u1 = (emag[i] * cos(ang) - 2.0 * vb) / xdp[i]
        rp_ = row0 + b
        rq_ = row0 + nb + b
        if with_delta:
            amat[cdelta + i, rp_] += c1
            amat[cdelta + i, rq_] += -t1
        amat[cv + b, rp_] += s1
        amat[cth + b, rp_] += -c1
        amat[cv + b, rq_] += u1
        amat[cth + b, rq_] += t1


cdef double _maxabs(double[::1] vec) noexcept:
    cdef Py_ssize_t i
    cdef double m = 0.0, a
    for i in range(vec.shape[0]):
        a = fabs(vec[i])
        if a != a:  # NaN poisons the norm
            return a
        if a > m:
            m = a
    return m


def residual_eval(delta, omega, valve, pmech, vm, va, pload, qload, poff,
                  gmat, bmat, gbus, emag, xdp, h2, dco, rinv, tg, tt, pref,
                  double ws, out):
    """Concatenated differential rhs and algebraic mismatches at a state."""
    cdef double[::1] o = out
    cdef Py_ssize_t ng = delta.shape[0], nb = vm.shape[0]
    _diff_rhs(delta, omega, valve, pmech, vm, va, poff, gbus, emag, xdp, h2,
              dco, rinv, tg, tt, pref, ws,
              o[0:ng], o[ng:2 * ng], o[2 * ng:3 * ng], o[3 * ng:4 * ng])
    _alg_residual(delta, vm, va, pload, qload, gmat, bmat, gbus, emag, xdp,
                  o[4 * ng:4 * ng + nb], o[4 * ng + nb:4 * ng + 2 * nb])
    return out


def trap_newton(double[::1] delta0, double[::1] omega0, double[::1] valve0,
                double[::1] pm0, double[::1] vm0, double[::1] va0,
                double[::1] delta1, double[::1] omega1, double[::1] valve1,
                double[::1] pm1, double[::1] vm1, double[::1] va1,
                double[::1] pload, double[::1] qload, double[::1] poff,
                double[:, ::1] gmat, double[:, ::1] bmat,
                cnp.int64_t[::1] gbus, double[::1] emag, double[::1] xdp,
                double[::1] h2, double[::1] dco, double[::1] rinv,
                double[::1] tg, double[::1] tt, double[::1] pref, double ws,
                double h, double tol, int maxit):
    """One implicit-trapezoidal step; outputs overwritten with the t+h state.

    Returns (iterations, residual_norm, ok).
    """
    cdef Py_ssize_t ng = delta0.shape[0], nb = vm0.shape[0]
    cdef Py_ssize_t n4 = 4 * ng, dim = n4 + 2 * nb
    cdef Py_ssize_t i, b, it
    cdef double hh = 0.5 * h
    cdef double resnorm = 0.0, vb, ang, c1, s1

    f0_np = np.empty(n4)
    f1_np = np.empty(n4)
    res_np = np.empty(dim)
    a_np = np.empty((dim, dim))
    rhs_np = np.empty(dim)
    ipiv_np = np.empty(dim, dtype=np.intc)
    cdef double[::1] f0 = f0_np
    cdef double[::1] f1 = f1_np
    cdef double[::1] res = res_np
    cdef double[:, ::1] amat = a_np
    cdef double[::1] rhs = rhs_np
    cdef int[::1] ipiv = ipiv_np
    cdef int n_ = <int>dim, one = 1, info = 0

    _diff_rhs(delta0, omega0, valve0, pm0, vm0, va0, poff, gbus, emag, xdp,
              h2, dco, rinv, tg, tt, pref, ws,
              f0[0:ng], f0[ng:2 * ng], f0[2 * ng:3 * ng], f0[3 * ng:4 * ng])
    delta1[:] = delta0
    omega1[:] = omega0
    valve1[:] = valve0
    pm1[:] = pm0
    vm1[:] = vm0
    va1[:] = va0

    for it in range(maxit + 1):
        _diff_rhs(delta1, omega1, valve1, pm1, vm1, va1, poff, gbus, emag,
                  xdp, h2, dco, rinv, tg, tt, pref, ws,
                  f1[0:ng], f1[ng:2 * ng], f1[2 * ng:3 * ng], f1[3 * ng:4 * ng])
        for i in range(ng):
            res[i] = delta1[i] - delta0[i] - hh * (f0[i] + f1[i])
            res[ng + i] = omega1[i] - omega0[i] - hh * (f0[ng + i] + f1[ng + i])
            res[2 * ng + i] = valve1[i] - valve0[i] - hh * (f0[2 * ng + i] + f1[2 * ng + i])
            res[3 * ng + i] = pm1[i] - pm0[i] - hh * (f0[3 * ng + i] + f1[3 * ng + i])
        _alg_residual(delta1, vm1, va1, pload, qload, gmat, bmat, gbus, emag,
                      xdp, res[n4:n4 + nb], res[n4 + nb:dim])
        resnorm = _maxabs(res)
        if resnorm != resnorm:  # NaN
            return it, resnorm, 0
        if resnorm <= tol:
            return it, resnorm, 1
        if it == maxit:
            return it, resnorm, 0

        a_np.fill(0.0)
        for i in range(ng):
            b = gbus[i]
            vb = vm1[b]
            ang = delta1[i] - va1[b]
            c1 = emag[i] * vb * cos(ang) / xdp[i]
            s1 = emag[i] * sin(ang) / xdp[i]
            # delta rows
            amat[i, i] = 1.0
            amat[ng + i, i] = -hh * ws
            # omega rows
            amat[i, ng + i] = hh * c1 / h2[i]
            amat[ng + i, ng + i] = 1.0 + hh * dco[i] / h2[i]
            amat[3 * ng + i, ng + i] = -hh / h2[i]
            amat[n4 + b, ng + i] = hh * s1 / h2[i]
            amat[n4 + nb + b, ng + i] = -hh * c1 / h2[i]
            # valve rows
            amat[ng + i, 2 * ng + i] = hh * rinv[i] / tg[i]
            amat[2 * ng + i, 2 * ng + i] = 1.0 + hh / tg[i]
            # mechanical-power rows
            amat[2 * ng + i, 3 * ng + i] = -hh / tt[i]
            amat[3 * ng + i, 3 * ng + i] = 1.0 + hh / tt[i]
        _fill_alg_jac(delta1, vm1, va1, gmat, bmat, gbus, emag, xdp,
                      amat, n4, n4, n4 + nb, 0, True)

        for i in range(dim):
            rhs[i] = -res[i]
        dgesv(&n_, &one, &amat[0, 0], &n_, &ipiv[0], &rhs[0], &n_, &info)
        if info != 0:
            return it, resnorm, 0
        for i in range(ng):
            delta1[i] += rhs[i]
            omega1[i] += rhs[ng + i]
            valve1[i] += rhs[2 * ng + i]
            pm1[i] += rhs[3 * ng + i]
        for i in range(nb):
            vm1[i] += rhs[n4 + i]
            va1[i] += rhs[n4 + nb + i]
    return maxit, resnorm, 0


def alg_solve(double[::1] delta, double[::1] vm, double[::1] va,
              double[::1] pload, double[::1] qload,
              double[:, ::1] gmat, double[:, ::1] bmat,
              cnp.int64_t[::1] gbus, double[::1] emag, double[::1] xdp,
              double tol, int maxit):
    """Re-solve the network equations in place, machine states held fixed."""
    cdef Py_ssize_t nb = vm.shape[0]
    cdef Py_ssize_t dim = 2 * nb, i, it
    cdef double resnorm = 0.0

    res_np = np.empty(dim)
    a_np = np.empty((dim, dim))
    rhs_np = np.empty(dim)
    ipiv_np = np.empty(dim, dtype=np.intc)
    cdef double[::1] res = res_np
    cdef double[:, ::1] amat = a_np
    cdef double[::1] rhs = rhs_np
    cdef int[::1] ipiv = ipiv_np
    cdef int n_ = <int>dim, one = 1, info = 0

    for it in range(maxit + 1):
        _alg_residual(delta, vm, va, pload, qload, gmat, bmat, gbus, emag,
                      xdp, res[0:nb], res[nb:dim])
        resnorm = _maxabs(res)
        if resnorm != resnorm:
            return it, resnorm, 0
        if resnorm <= tol:
            return it, resnorm, 1
        if it == maxit:
            return it, resnorm, 0
        a_np.fill(0.0)
        _fill_alg_jac(delta, vm, va, gmat, bmat, gbus, emag, xdp,
                      amat, 0, 0, nb, 0, False)
        for i in range(dim):
            rhs[i] = -res[i]
        dgesv(&n_, &one, &amat[0, 0], &n_, &ipiv[0], &rhs[0], &n_, &info)
        if info != 0:
            return it, resnorm, 0
        for i in range(nb):
            vm[i] += rhs[i]
            va[i] += rhs[nb + i]
    return maxit, resnorm, 0
