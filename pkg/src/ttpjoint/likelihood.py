"""Observed-data log likelihood via 2-D Gaussian quadrature.

The integral over the random effects in each subject's likelihood
contribution is replaced by the K*K-node product rule of
:func:`ttpjoint.quadrature.build_rule`.  Per-node integrands are combined
in log space with a max-shifted reduction; the across-subject total uses
``math.fsum`` so it is exactly invariant to subject order.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from . import kernel
from .model import EXP_CLAMP, ModelError, SubjectRecord, ThetaParams
from .quadrature import QuadratureRule, build_rule

DEFAULT_K = 50


class LikelihoodError(ModelError):
    """Non-finite or otherwise invalid likelihood evaluation."""


@dataclass(frozen=True)
class PackedData:
    """Theta-independent array layout of a dataset (cycles padded to J_max)."""

    subject_ids: tuple[str, ...]
    X: np.ndarray        # (n,) observed cycle counts
    delta: np.ndarray    # (n,) event indicators
    A: np.ndarray        # (n, J) exposure, zero-padded
    Y: np.ndarray        # (n, J) features, zero-padded
    mask: np.ndarray     # (n, J) 1.0 on real cycles
    U: np.ndarray        # (n, J, p_U)
    Z: np.ndarray        # (n, J, p_Z)

    @property
    def n(self) -> int:
        return len(self.X)

    @property
    def j_max(self) -> int:
        return self.A.shape[1]


def pack_dataset(data: list[SubjectRecord]) -> PackedData:
    """Flatten subject records into padded arrays for the kernel.

    Every cycle must carry an observed feature value: fitting multiplies
    feature densities over all cycles, so a missing Y is an error here
    (prediction handles partial data separately).
    """
    if not data:
        raise LikelihoodError("empty dataset")
    n = len(data)
    jmax = max(s.X for s in data)
    p_u = len(data[0].cycles[0].U)
    p_z = len(data[0].cycles[0].Z)
    X = np.zeros(n, dtype=np.int64)
    delta = np.zeros(n, dtype=np.int64)
    A = np.zeros((n, jmax))
    Y = np.zeros((n, jmax))
    mask = np.zeros((n, jmax))
    U = np.zeros((n, jmax, p_u))
    Z = np.zeros((n, jmax, p_z))
    for i, subj in enumerate(data):
        X[i] = subj.X
        delta[i] = subj.delta
        for cyc in subj.cycles:
            j = cyc.j - 1
            if len(cyc.U) != p_u or len(cyc.Z) != p_z:
                raise LikelihoodError(
                    f"subject {subj.subject_id}: covariate dimensions differ "
                    f"from the rest of the dataset"
                )
            if cyc.Y is None or not math.isfinite(cyc.Y):
                raise LikelihoodError(
                    f"subject {subj.subject_id}: cycle {cyc.j} is missing "
                    f"its feature value; all cycles must carry Y for fitting"
                )
            A[i, j] = cyc.A
            Y[i, j] = cyc.Y
            mask[i, j] = 1.0
            U[i, j] = cyc.U
            Z[i, j] = cyc.Z
    return PackedData(
        subject_ids=tuple(s.subject_id for s in data),
        X=X, delta=delta, A=A, Y=Y, mask=mask, U=U, Z=Z,
    )


class LoglikEvaluator:
    """Reusable evaluator bound to one packed dataset.

    Repeated calls (the optimizer's bread and butter) share the packed
    arrays and only redo the theta-dependent work.  ``clamp_events``
    accumulates the number of clamped exponents across calls.
    """

    def __init__(self, data: list[SubjectRecord] | PackedData, K: int = DEFAULT_K):
        self.packed = data if isinstance(data, PackedData) else pack_dataset(data)
        if K < 1:
            raise LikelihoodError(f"K must be >= 1, got {K}")
        self.K = K
        self.clamp_events = 0
        self._rows = np.arange(self.packed.n)
        self._ncyc = self.packed.X.astype(np.float64)
        self._clamp_lock = threading.Lock()

    def _survival_terms(self, theta: ThetaParams):
        """Per-subject log W_{X-1}, log W_X and the log increment at cycle X."""
        p = self.packed
        if p.j_max > theta.j_max:
            raise LikelihoodError(
                f"dataset has cycle index {p.j_max} beyond the baseline "
                f"vector (J_max={theta.j_max})"
            )
        base = (
            theta.rho[None, : p.j_max]
            + p.U @ theta.gamma
            + theta.psi_mu * (p.Z @ theta.beta)
        )
        clamps = int(np.count_nonzero((base > EXP_CLAMP) & (p.A * p.mask > 0)))
        incr = p.A * p.mask * np.exp(np.minimum(base, EXP_CLAMP))
        wcum = np.cumsum(incr, axis=1)
        last = p.X - 1
        with np.errstate(divide="ignore"):
            logw_last = np.log(wcum[self._rows, last])
            logw_prev = np.where(
                p.X > 1,
                np.log(wcum[self._rows, np.maximum(last - 1, 0)]),
                -np.inf,
            )
        log_dw = base[self._rows, last]
        return logw_prev, logw_last, log_dw, clamps

    def _residual_sums(self, theta: ThetaParams):
        p = self.packed
        r = (p.Y - p.Z @ theta.beta) * p.mask
        return np.einsum("ij,ij->i", r, r), r.sum(axis=1)

    def per_subject(self, theta: ThetaParams, rule: QuadratureRule | None = None,
                    sigma: float | None = None) -> np.ndarray:
        """Log likelihood contribution of every subject, in dataset order."""
        if rule is None:
            rule = build_rule(theta.D, self.K)
        sigma = theta.sigma if sigma is None else float(sigma)
        if sigma <= 0:
            raise LikelihoodError(f"sigma must be positive, got {sigma}")
        logw_prev, logw_last, log_dw, clamps = self._survival_terms(theta)
        ssr, sr = self._residual_sums(theta)
        node_by = np.ascontiguousarray(rule.nodes2d[:, 0])
        node_c = np.ascontiguousarray(
            rule.nodes2d[:, 1] + theta.psi_mu * rule.nodes2d[:, 0]
        )
        out = np.empty(self.packed.n)
        clamps += kernel.subject_logliks(
            self.packed.delta,
            np.ascontiguousarray(logw_prev),
            np.ascontiguousarray(logw_last),
            np.ascontiguousarray(log_dw),
            np.ascontiguousarray(ssr),
            np.ascontiguousarray(sr),
            self._ncyc,
            node_by,
            node_c,
            np.ascontiguousarray(rule.log_weights2d),
            sigma,
            EXP_CLAMP,
            out,
        )
        with self._clamp_lock:
            self.clamp_events += clamps
        if not np.all(np.isfinite(out)):
            bad = [
                self.packed.subject_ids[i]
                for i in np.nonzero(~np.isfinite(out))[0][:5]
            ]
            raise LikelihoodError(f"non-finite likelihood integrand for subjects {bad}")
        return out

    def total(self, theta: ThetaParams, rule: QuadratureRule | None = None) -> float:
        """Exactly-rounded sum of contributions (order invariant)."""
        return math.fsum(self.per_subject(theta, rule))


def subject_loglik_contribution(
    subject: SubjectRecord,
    theta: ThetaParams,
    rule: QuadratureRule,
    sigma: float | None = None,
) -> float:
    """Log of the quadrature-approximated likelihood of one subject."""
    ev = LoglikEvaluator([subject], K=rule.K)
    return float(ev.per_subject(theta, rule=rule, sigma=sigma)[0])


def log_likelihood(data: list[SubjectRecord], theta: ThetaParams, K: int = DEFAULT_K) -> float:
    """Observed-data log likelihood of the whole dataset."""
    if not data:
        return 0.0
    return LoglikEvaluator(data, K=K).total(theta)
