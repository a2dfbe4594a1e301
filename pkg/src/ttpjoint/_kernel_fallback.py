"""Pure-numpy implementation of the log-likelihood inner loop.

Mirrors ``_kernel.pyx`` (same inputs, same clamping, same max-shifted
log-sum-exp reduction) so the two backends are interchangeable;
selection happens in :mod:`ttpjoint.kernel`.
"""

from __future__ import annotations

import numpy as np

_LOG_SQRT_2PI = 0.9189385332046727417803297364056176398


def subject_logliks(
    delta,
    logw_prev,
    logw_last,
    log_dw,
    ssr,
    sr,
    ncyc,
    node_by,
    node_c,
    node_logw,
    sigma,
    clamp,
    out,
):
    """Fill ``out`` with per-subject log contributions; return clamp count."""
    inv2s2 = 0.5 / (sigma * sigma)
    lognorm = -(_LOG_SQRT_2PI + np.log(sigma))
    ev = delta == 1

    # Feature product: a quadratic in b_Y shared by both survival branches.
    lfeat = (
        ncyc[:, None] * lognorm
        - (ssr[:, None] - 2.0 * np.outer(sr, node_by) + np.outer(ncyc, node_by**2))
        * inv2s2
    )

    # Survival factor: log S(X-1) for events, log S(X) for censored.
    t = np.where(ev, logw_prev, logw_last)[:, None] + node_c[None, :]
    clamps = int(np.count_nonzero(t > clamp))
    np.minimum(t, clamp, out=t)
    lsurv = -np.exp(t)  # exp(-inf) = 0 covers empty risk sets

    if np.any(ev):
        # Event factor: log(1 - exp(-E*dW)), series branch for tiny E*dW.
        lq = log_dw[ev][:, None] + node_c[None, :]
        clamps += int(np.count_nonzero(lq > clamp))
        np.minimum(lq, clamp, out=lq)
        q = np.exp(lq)
        small = q <= 1e-6
        with np.errstate(divide="ignore", invalid="ignore"):
            lhaz = np.where(
                small,
                lq + np.log1p(np.where(small, -0.5 * q, 0.0)),
                np.log(-np.expm1(-np.where(small, 1.0, q))),
            )
        lsurv[ev] += lhaz

    vals = lfeat + lsurv + node_logw[None, :]
    best = vals.max(axis=1)
    finite = np.isfinite(best)
    shift = vals - np.where(finite, best, 0.0)[:, None]
    with np.errstate(invalid="ignore"):
        terms = np.exp(shift, out=np.zeros_like(vals), where=shift > -45.0)
    total = terms.sum(axis=1)
    out[:] = np.where(finite, best + np.log(np.where(finite, total, 1.0)), best)
    return clamps
