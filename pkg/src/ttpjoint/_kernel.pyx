# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loop of the marginal log likelihood.

For each subject the marginal likelihood contribution is a weighted sum
over quadrature nodes of

    f(X | b)^delta * S(X | b)^(1-delta) * prod_j N(Y_j; Z_j'beta + b_Y, sigma^2)

The caller precomputes, per subject, everything that does not depend on
the node: the log cumulative exposure-weighted hazard exponentials
W_j = sum_{k<=j} A_k exp(rho_k + U_k'gamma + psi * Z_k'beta) through
cycles X-1 and X, the log increment at cycle X, and the residual sums
SSR = sum r_j^2 and SR = sum r_j with r_j = Y_j - Z_j'beta.  Per node the
survival pieces reduce to single rescalings by E = exp(b_T + psi * b_Y):

    log S(j | b)   = -E * W_j
    log f(X | b)   = -E * W_{X-1} + log(-expm1(-E * dW_X))

and the feature product to a quadratic in b_Y.  The node sum is reduced
in log space with a max shift.
"""

from libc.math cimport exp, log, log1p, expm1, isinf, INFINITY

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef double LOG_SQRT_2PI = 0.9189385332046727417803297364056176398




def subject_logliks(
    const long[::1] delta,
    const double[::1] logw_prev,
    const double[::1] logw_last,
    const double[::1] log_dw,
    const double[::1] ssr,
    const double[::1] sr,
    const double[::1] ncyc,
    const double[::1] node_by,
    const double[::1] node_c,
    const double[::1] node_logw,
    double sigma,
    double clamp,
    double[::1] out,
):
    """Fill ``out`` with per-subject log contributions; return clamp count."""
    cdef Py_ssize_t n = delta.shape[0]
    cdef Py_ssize_t m = node_by.shape[0]
    cdef Py_ssize_t i, k
    cdef long clamps = 0
    cdef double inv2s2 = 0.5 / (sigma * sigma)
    cdef double lognorm = -(LOG_SQRT_2PI + log(sigma))
    cdef double by, lf, ls, t, q, lq, best, acc, val
    cdef double ssr_i, sr_i, nc_i, lwp_i, lwl_i, ldw_i
    cdef long d_i

    scratch_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] scratch = scratch_arr

    with nogil:
        for i in range(n):
            d_i = delta[i]
            ssr_i = ssr[i]
            sr_i = sr[i]
            nc_i = ncyc[i]
            lwp_i = logw_prev[i]
            lwl_i = logw_last[i]
            ldw_i = log_dw[i]
            best = -INFINITY
            for k in range(m):
                by = node_by[k]
                lf = nc_i * lognorm - (ssr_i - 2.0 * by * sr_i + nc_i * by * by) * inv2s2
                if d_i == 1:
                    # log f = -E*W_{X-1} + log(1 - exp(-E*dW))
                    t = node_c[k] + lwp_i
                    if t > clamp:
                        t = clamp
                        clamps += 1
                    lq = node_c[k] + ldw_i
                    if lq > clamp:
                        lq = clamp
                        clamps += 1
                    q = exp(lq)
                    if q > 1e-6:
                        ls = -exp(t) + log(-expm1(-q))
                    else:
                        # log(q - q^2/2 + ...) without underflowing exp(lq)
                        ls = -exp(t) + lq + log1p(-0.5 * q)
                else:
                    t = node_c[k] + lwl_i
                    if t > clamp:
                        t = clamp
                        clamps += 1
                    ls = -exp(t)
                val = lf + ls + node_logw[k]
                scratch[k] = val
                if val > best:
                    best = val
            if isinf(best):
                out[i] = best
                continue
            acc = 0.0
            for k in range(m):
                val = scratch[k] - best
                if val > -45.0:
                    acc += exp(val)
            out[i] = best + log(acc)
    return clamps
