"""Dynamic prediction of conditional survival for a partially observed subject.

Given a fitted model and a subject's cycles through j0, the conditional
probability of surviving cycle j is sampled by the scheme: draw theta
from N(theta_hat, Sigma_hat) (constraint-violating draws rejected and
redrawn), draw the random effects from a multivariate t with four
degrees of freedom centered at the empirical Bayes mode with the
inverse negative Hessian as scale, then evaluate the survival ratio
S(j)/S(j0).  Future cycles default to exposure 1 with the last observed
covariates carried forward; both are overridable.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .estimation import FitResult, central_hessian
from .model import EXP_CLAMP, CycleRecord, ModelError, SubjectRecord, ThetaParams

DEFAULT_L = 500
T_DOF = 4.0


@dataclass(frozen=True)
class PartialData:
    """Cycles observed through j0 plus assumptions about future cycles.

    ``future_exposure`` / ``future_U`` / ``future_Z`` describe cycles
    j0+1, j0+2, ...; anything not supplied defaults to exposure 1 and the
    last observed covariates carried forward.
    """

    j0: int
    cycles: tuple[CycleRecord, ...]
    future_exposure: tuple[int, ...] = ()
    future_U: tuple = ()
    future_Z: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "cycles", tuple(self.cycles))
        if self.j0 < 1:
            raise ModelError("j0 must be >= 1")
        if len(self.cycles) != self.j0:
            raise ModelError(f"expected {self.j0} observed cycles, got {len(self.cycles)}")
        for k, cyc in enumerate(self.cycles, start=1):
            if cyc.j != k:
                raise ModelError("observed cycles must be consecutive from 1")
            if cyc.Y is None or not math.isfinite(cyc.Y):
                raise ModelError(f"cycle {k}: past cycles must carry a feature value")

    @classmethod
    def from_subject(cls, subject: SubjectRecord, j0: int) -> "PartialData":
        if j0 > subject.X:
            raise ModelError(
                f"subject {subject.subject_id}: j0={j0} exceeds observed X={subject.X}"
            )
        return cls(j0=j0, cycles=subject.cycles[:j0])

    def future_cycle(self, j: int) -> CycleRecord:
        """Assumed cycle record for j > j0 (feature value unknown)."""
        if j <= self.j0:
            raise ModelError(f"cycle {j} is not in the future (j0={self.j0})")
        i = j - self.j0 - 1
        a = self.future_exposure[i] if i < len(self.future_exposure) else 1
        u = self.future_U[i] if i < len(self.future_U) else self.cycles[-1].U
        z = self.future_Z[i] if i < len(self.future_Z) else self.cycles[-1].Z
        return CycleRecord(j=j, A=int(a), Y=None, U=np.asarray(u), Z=np.asarray(z))


@dataclass(frozen=True)
class PredictionResult:
    samples: np.ndarray
    mean: float
    ci_lower: float
    ci_upper: float
    b_hat: np.ndarray
    b_hat_scale: np.ndarray
    theta_rejections: int = 0


def _posterior_terms(partial: PartialData, theta: ThetaParams):
    """Node-free pieces of log p(T > j0, b, data | theta)."""
    w = 0.0
    resid0, nobs = 0.0, partial.j0
    for cyc in partial.cycles:
        if cyc.j > theta.j_max:
            raise ModelError(f"cycle {cyc.j} beyond baseline vector (J_max={theta.j_max})")
        base = theta.rho[cyc.j - 1] + float(cyc.U @ theta.gamma) + theta.psi_mu * float(
            cyc.Z @ theta.beta
        )
        w += cyc.A * math.exp(min(base, EXP_CLAMP))
        resid0 += cyc.Y - float(cyc.Z @ theta.beta)
    d_inv = np.linalg.inv(theta.D)
    return w, resid0, nobs, d_inv


def log_posterior_kernel(partial: PartialData, theta: ThetaParams, b: np.ndarray) -> float:
    """log S(j0 | b) + sum_t log N(Y_t; Z'beta + b_Y, sigma) + log N2(b; 0, D),
    up to constants that do not involve b."""
    w, resid0, nobs, d_inv = _posterior_terms(partial, theta)
    b = np.asarray(b, dtype=float)
    e = math.exp(min(b[1] + theta.psi_mu * b[0], EXP_CLAMP))
    quad_feat = 0.0
    for cyc in partial.cycles:
        r = cyc.Y - float(cyc.Z @ theta.beta) - b[0]
        quad_feat += r * r
    return float(
        -e * w - 0.5 * quad_feat / theta.sigma**2 - 0.5 * b @ d_inv @ b
    )


def empirical_bayes_mode(partial: PartialData, theta_hat: ThetaParams) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mode of the random effects and its inverse-curvature scale."""
    w, resid0, nobs, d_inv = _posterior_terms(partial, theta_hat)
    s2 = theta_hat.sigma**2
    psi = theta_hat.psi_mu

    def neg(b):
        e = math.exp(min(b[1] + psi * b[0], EXP_CLAMP))
        quad = (nobs * b[0] ** 2 - 2.0 * b[0] * resid0) / (2.0 * s2)
        return e * w + quad + 0.5 * float(b @ d_inv @ b)

    def grad(b):
        e = math.exp(min(b[1] + psi * b[0], EXP_CLAMP))
        db = d_inv @ b
        return np.array(
            [
                psi * e * w + (nobs * b[0] - resid0) / s2 + db[0],
                e * w + db[1],
            ]
        )

    res = minimize(neg, np.zeros(2), jac=grad, method="BFGS",
                   options={"gtol": 1e-10, "maxiter": 200})
    if not res.success and float(np.max(np.abs(grad(res.x)))) > 1e-5:
        raise ModelError(f"random-effects mode search did not converge: {res.message}")
    b_hat = res.x

    def logpost(b):
        return -neg(b)

    steps = 1e-4 * (1.0 + np.abs(b_hat))
    hess = central_hessian(logpost, b_hat, steps)
    info = -0.5 * (hess + hess.T)
    try:
        scale = np.linalg.inv(info)
        if not np.all(np.linalg.eigvalsh(scale) > 0):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        warnings.warn(
            "posterior curvature not positive definite at the mode; "
            "falling back to the prior covariance as t scale",
            RuntimeWarning,
            stacklevel=2,
        )
        scale = theta_hat.D
    return b_hat, 0.5 * (scale + scale.T)


def _theta_factor(fit: FitResult) -> np.ndarray:
    if fit.covariance is None:
        raise ModelError("fit covariance unavailable; cannot sample theta")
    cov = 0.5 * (fit.covariance + fit.covariance.T)
    if not cov.any():
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        warnings.warn(
            "fit covariance is not positive definite; sampling from its "
            "nearest positive semidefinite projection",
            RuntimeWarning,
            stacklevel=3,
        )
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_theta(fit: FitResult, rng: np.random.Generator,
                 max_tries: int = 1000) -> tuple[ThetaParams, int]:
    """One draw of theta ~ N(theta_hat, Sigma_hat); invalid draws redrawn.

    Returns the draw and the number of rejected attempts.
    """
    factor = _theta_factor(fit)
    mean = fit.theta_hat.as_vector()
    rejections = 0
    for _ in range(max_tries):
        vec = mean + factor @ rng.standard_normal(len(mean))
        try:
            return fit.theta_hat.replace_vector(vec), rejections
        except ModelError:
            rejections += 1
    raise ModelError(f"no valid theta draw in {max_tries} attempts")


def sample_random_effects(b_hat: np.ndarray, scale: np.ndarray,
                          rng: np.random.Generator) -> np.ndarray:
    """Multivariate t_4 draw: b_hat + chol(scale) z sqrt(4 / chi2_4)."""
    b_hat = np.asarray(b_hat, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if not scale.any():
        # consume no randomness differently: degenerate scale returns center
        return b_hat.copy()
    try:
        L = np.linalg.cholesky(0.5 * (scale + scale.T))
    except np.linalg.LinAlgError as exc:
        raise ModelError("t-distribution scale is not positive definite") from exc
    z = rng.standard_normal(len(b_hat))
    chi = rng.chisquare(T_DOF)
    return b_hat + (L @ z) * math.sqrt(T_DOF / chi)


def survival_ratio(partial: PartialData, j: int, theta: ThetaParams, b: np.ndarray) -> float:
    """S(j | b, theta) / S(j0 | b, theta) over the assumed future cycles."""
    total = 0.0
    for k in range(partial.j0 + 1, j + 1):
        cyc = partial.future_cycle(k)
        if cyc.j > theta.j_max:
            raise ModelError(f"cycle {cyc.j} beyond baseline vector (J_max={theta.j_max})")
        if cyc.A == 0:
            continue
        eta = (
            b[1]
            + theta.rho[cyc.j - 1]
            + float(cyc.U @ theta.gamma)
            + theta.psi_mu * (float(cyc.Z @ theta.beta) + b[0])
        )
        total += math.exp(min(eta, EXP_CLAMP))
    return math.exp(-total)


def conditional_survival(partial: PartialData, j: int, fit: FitResult,
                         L: int = DEFAULT_L,
                         rng: int | np.random.Generator | None = 0) -> PredictionResult:
    """Monte Carlo estimate of pi(j | j0) with quantile confidence limits.

    Passing an integer seed gives bitwise-reproducible results; iteration
    l always uses its own stream derived from (seed, l).
    """
    if j < partial.j0:
        raise ModelError(f"target cycle {j} precedes j0={partial.j0}")
    if L < 1:
        raise ModelError("L must be >= 1")
    root = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    b_hat, scale = empirical_bayes_mode(partial, fit.theta_hat)
    rejections = 0
    samples = np.empty(L)
    if j == partial.j0:
        samples.fill(1.0)
    else:
        streams = root.spawn(L)
        for l, sub in enumerate(streams):
            theta_l, rej = sample_theta(fit, sub)
            rejections += rej
            b_l = sample_random_effects(b_hat, scale, sub)
            samples[l] = survival_ratio(partial, j, theta_l, b_l)
    lo, hi = np.quantile(samples, [0.025, 0.975])
    return PredictionResult(
        samples=samples,
        mean=float(samples.mean()),
        ci_lower=float(lo),
        ci_upper=float(hi),
        b_hat=b_hat,
        b_hat_scale=scale,
        theta_rejections=rejections,
    )
