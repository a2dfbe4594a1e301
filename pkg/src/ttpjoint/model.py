"""Domain types and closed-form model functions.

The longitudinal submodel describes a per-cycle scalar feature
``Y = Z'beta + b_Y + eps`` with ``eps ~ N(0, sigma^2)``.  The survival
submodel is a discrete-time hazard on the cycle scale,

    hazard(j) = 1 - exp(-A_j * exp(b_T + rho_j + U'gamma + psi * Ytilde_j)),

which is identically zero in cycles without fertile-window exposure
(``A_j = 0``).  The two submodels share the correlated random effects
``(b_Y, b_T) ~ MVN(0, D)``.

Everything in this module is a pure function of its inputs; records are
frozen and safe to share across threads or processes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Exponents are clamped here before exponentiation so extreme parameter
# values (or far-tail quadrature nodes) saturate instead of overflowing.
EXP_CLAMP = 700.0


class ModelError(ValueError):
    """Invalid model input: broken invariant, bad dimension or index."""


@dataclass(frozen=True)
class CycleRecord:
    """One observed menstrual cycle for one subject.

    ``Y`` may be None only for prediction-target (future) cycles; during
    fitting every cycle must carry an observed feature value.
    """

    j: int
    A: int
    Y: float | None
    U: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        if self.j < 1:
            raise ModelError(f"cycle index must be >= 1, got {self.j}")
        if self.A not in (0, 1):
            raise ModelError(f"exposure indicator must be 0 or 1, got {self.A}")
        object.__setattr__(self, "U", _readonly(self.U))
        object.__setattr__(self, "Z", _readonly(self.Z))


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's observed survival data and per-cycle records.

    ``X`` is the observed time in cycles, ``min(T, censoring time)``;
    ``delta`` is 1 for an observed event (pregnancy) and 0 for censoring.
    """

    subject_id: str
    X: int
    delta: int
    cycles: tuple[CycleRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "cycles", tuple(self.cycles))
        sid = self.subject_id
        if self.X < 1:
            raise ModelError(f"subject {sid}: X must be >= 1, got {self.X}")
        if self.delta not in (0, 1):
            raise ModelError(f"subject {sid}: delta must be 0 or 1")
        if len(self.cycles) != self.X:
            raise ModelError(
                f"subject {sid}: expected {self.X} cycles, got {len(self.cycles)}"
            )
        for k, cyc in enumerate(self.cycles, start=1):
            if cyc.j != k:
                raise ModelError(
                    f"subject {sid}: cycle {k} has index {cyc.j}; cycles must "
                    f"be consecutive starting at 1"
                )
        if self.delta == 1 and self.cycles[-1].A != 1:
            # An event is impossible without fertile-window exposure: the
            # hazard is exactly zero when A = 0.
            raise ModelError(
                f"subject {sid}: event in cycle {self.X} but exposure A = 0"
            )
        dims_u = {c.U.shape for c in self.cycles}
        dims_z = {c.Z.shape for c in self.cycles}
        if len(dims_u) > 1 or len(dims_z) > 1:
            raise ModelError(f"subject {sid}: inconsistent covariate dimensions")


@dataclass(frozen=True)
class RandomEffects:
    """Subject-level random effects: feature intercept and log-hazard frailty."""

    b_Y: float
    b_T: float


@dataclass(frozen=True)
class ThetaParams:
    """Full parameter vector with constraint metadata.

    ``rho`` holds one baseline effect per cycle index up to the maximum
    cycle seen in the data; evaluating a cycle beyond ``len(rho)`` is an
    error rather than an extrapolation.
    """

    beta: np.ndarray
    gamma: np.ndarray
    rho: np.ndarray
    psi_mu: float
    sigma: float
    sigma1: float
    sigma2: float
    zeta: float

    def __post_init__(self):
        object.__setattr__(self, "beta", _readonly(self.beta))
        object.__setattr__(self, "gamma", _readonly(self.gamma))
        object.__setattr__(self, "rho", _readonly(self.rho))
        if not (self.sigma > 0 and self.sigma1 > 0 and self.sigma2 > 0):
            raise ModelError("sigma, sigma1, sigma2 must all be positive")
        if not abs(self.zeta) < 1:
            raise ModelError(f"zeta must lie in (-1, 1), got {self.zeta}")

    @property
    def D(self) -> np.ndarray:
        """Random-effects covariance [[s1^2, z s1 s2], [z s1 s2, s2^2]]."""
        c = self.zeta * self.sigma1 * self.sigma2
        return np.array(
            [[self.sigma1**2, c], [c, self.sigma2**2]], dtype=float
        )

    @property
    def j_max(self) -> int:
        return len(self.rho)

    def names(self) -> list[str]:
        """Parameter names in canonical vector order."""
        out = [f"beta_{i + 1}" for i in range(len(self.beta))]
        out += [f"gamma_{i + 1}" for i in range(len(self.gamma))]
        out += [f"rho_{j + 1}" for j in range(len(self.rho))]
        out += ["psi_mu", "sigma", "sigma1", "sigma2", "zeta"]
        return out

    def as_vector(self) -> np.ndarray:
        """Pack into the canonical flat order (beta, gamma, rho, psi, sigmas, zeta)."""
        return np.concatenate(
            [
                self.beta,
                self.gamma,
                self.rho,
                [self.psi_mu, self.sigma, self.sigma1, self.sigma2, self.zeta],
            ]
        )

    def replace_vector(self, vec: np.ndarray) -> "ThetaParams":
        """Rebuild a ThetaParams from a flat vector with this one's shape."""
        vec = np.asarray(vec, dtype=float)
        p_z, p_u, jm = len(self.beta), len(self.gamma), len(self.rho)
        if vec.shape != (p_z + p_u + jm + 5,):
            raise ModelError(f"parameter vector has wrong length {vec.shape}")
        k = 0
        beta = vec[k : k + p_z]
        k += p_z
        gamma = vec[k : k + p_u]
        k += p_u
        rho = vec[k : k + jm]
        k += jm
        psi, sigma, sigma1, sigma2, zeta = vec[k : k + 5]
        return ThetaParams(beta, gamma, rho, psi, sigma, sigma1, sigma2, zeta)


def _readonly(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


def feature_mean(Z: np.ndarray, beta: np.ndarray, b_Y: float) -> float:
    """True feature level Z'beta + b_Y for one cycle."""
    Z = np.asarray(Z, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if Z.shape != beta.shape:
        raise ModelError(f"dim(Z)={Z.shape} does not match dim(beta)={beta.shape}")
    return float(Z @ beta + b_Y)


def hazard_exponent(theta: ThetaParams, b: RandomEffects, cycle: CycleRecord) -> float:
    """Linear predictor inside the complementary log-log hazard."""
    if cycle.j > theta.j_max:
        raise ModelError(
            f"cycle index {cycle.j} beyond baseline vector (J_max={theta.j_max})"
        )
    ytilde = feature_mean(cycle.Z, theta.beta, b.b_Y)
    return float(
        b.b_T + theta.rho[cycle.j - 1] + cycle.U @ theta.gamma + theta.psi_mu * ytilde
    )


def hazard(theta: ThetaParams, b: RandomEffects, cycle: CycleRecord) -> float:
    """Per-cycle conception probability; exactly 0 in unexposed cycles."""
    if cycle.A == 0:
        if cycle.j > theta.j_max:
            raise ModelError(
                f"cycle index {cycle.j} beyond baseline vector (J_max={theta.j_max})"
            )
        return 0.0
    eta = hazard_exponent(theta, b, cycle)
    return -math.expm1(-math.exp(min(eta, EXP_CLAMP)))


def survival(theta: ThetaParams, b: RandomEffects, subject: SubjectRecord, j: int) -> float:
    """P(T > j | b) = exp(-sum_{k<=j} A_k exp(eta_k)); S(0) = 1."""
    if not 0 <= j <= subject.X:
        raise ModelError(f"subject {subject.subject_id}: j={j} out of range 0..{subject.X}")
    total = 0.0
    for cyc in subject.cycles[:j]:
        if cyc.A == 1:
            total += math.exp(min(hazard_exponent(theta, b, cyc), EXP_CLAMP))
    return math.exp(-total)


def cycle_density(theta: ThetaParams, b: RandomEffects, subject: SubjectRecord, j: int) -> float:
    """P(T = j | b) = S(j-1) - S(j)."""
    if not 1 <= j <= subject.X:
        raise ModelError(f"subject {subject.subject_id}: j={j} out of range 1..{subject.X}")
    return survival(theta, b, subject, j - 1) - survival(theta, b, subject, j)
