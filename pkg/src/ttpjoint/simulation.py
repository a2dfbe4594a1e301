"""Synthetic data generation and the full replicate study harness.

Datasets follow the design of the source study: a scalar covariate
U ~ N(2, 1) shared by both submodels with Z = (1, U), random effects
drawn from MVN(0, D), features from the linear model, per-cycle
exposure Bernoulli(p), events from the discrete hazard, and
administrative censoring at a fixed cycle.  ``run_study`` repeats
simulate / split / fit / predict / evaluate over m replicates and
aggregates parameter bias, SD and coverage, TTP summaries, AUC and the
pointwise ROC band.  Everything is bitwise reproducible from
(scenario, seed): each replicate and each predicted subject gets its own
deterministic RNG stream.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .estimation import FitConfig, FitResult, fit, param_table
from .evaluation import RocCurve, censor_filter, label_at_horizon, predictable, roc, roc_band
from .features import FeatureKind
from .model import EXP_CLAMP, CycleRecord, ModelError, SubjectRecord, ThetaParams
from .prediction import PartialData, conditional_survival
from .quadrature import chol_upper


def default_theta() -> ThetaParams:
    """True parameter values used throughout the simulation study."""
    return ThetaParams(
        beta=np.array([4.0, -0.5]),
        gamma=np.array([-27.0]),
        rho=np.array([-6.5, 10.0, 17.0, 21.0, 24.0, 25.0]),
        psi_mu=18.0,
        sigma=0.9,
        sigma1=0.3,
        sigma2=3.0,
        zeta=-0.2,
    )


@dataclass(frozen=True)
class Scenario:
    n: int = 300
    p_exposure: float = 0.95
    theta_true: ThetaParams = field(default_factory=default_theta)
    censor_cycle: int = 6
    train_fraction: float = 2.0 / 3.0
    replicates: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ModelError("scenario needs n >= 1 subjects")
        if not 0.0 < self.p_exposure <= 1.0:
            raise ModelError("p_exposure must lie in (0, 1]")
        if self.censor_cycle < 1:
            raise ModelError("censor_cycle must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ModelError("train_fraction must lie in (0, 1)")
        if self.replicates < 1:
            raise ModelError("replicates must be >= 1")


@dataclass(frozen=True)
class TruthRecord:
    """Generated quantities kept aside for oracle checks."""

    subject_ids: tuple[str, ...]
    b: np.ndarray        # (n, 2) true random effects
    t_true: np.ndarray   # event cycle, +inf if none occurred before censoring
    u: np.ndarray        # (n,) baseline covariate


@dataclass(frozen=True)
class Dataset:
    subjects: tuple[SubjectRecord, ...]
    truth: TruthRecord


def stream(*key: int) -> np.random.Generator:
    """Deterministic RNG stream addressed by a tuple of integers."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def substream_seed(*key: int) -> int:
    """64-bit integer seed derived from a stream address (for CLI round trips)."""
    state = np.random.SeedSequence([int(k) for k in key]).generate_state(2)
    return int(state[0]) | (int(state[1]) << 32)


def simulate_dataset(scenario: Scenario, rng: np.random.Generator) -> Dataset:
    """One synthetic dataset plus the truth record behind it."""
    theta = scenario.theta_true
    n, jmax = scenario.n, scenario.censor_cycle
    if jmax > theta.j_max:
        raise ModelError(
            f"censor cycle {jmax} exceeds the baseline vector (J_max={theta.j_max})"
        )
    u = rng.normal(2.0, 1.0, size=n)
    b = rng.standard_normal((n, 2)) @ chol_upper(theta.D)
    a = (rng.random((n, jmax)) < scenario.p_exposure).astype(np.int64)
    eps = rng.normal(0.0, theta.sigma, size=(n, jmax))
    uev = rng.random((n, jmax))

    z = np.column_stack([np.ones(n), u])
    feat_mean = z @ theta.beta + b[:, 0]
    eta = (
        b[:, 1][:, None]
        + theta.rho[None, :jmax]
        + np.outer(u, theta.gamma)
        + theta.psi_mu * feat_mean[:, None]
    )
    hazard = -np.expm1(-np.exp(np.minimum(eta, EXP_CLAMP))) * a
    event = uev < hazard
    any_event = event.any(axis=1)
    first = np.where(any_event, event.argmax(axis=1) + 1, jmax)
    delta = any_event.astype(int)
    y = feat_mean[:, None] + eps

    subjects = []
    width = len(str(n))
    for i in range(n):
        x_i = int(first[i])
        cycles = tuple(
            CycleRecord(
                j=j + 1,
                A=int(a[i, j]),
                Y=float(y[i, j]),
                U=np.array([u[i]]),
                Z=np.array([1.0, u[i]]),
            )
            for j in range(x_i)
        )
        subjects.append(
            SubjectRecord(
                subject_id=f"s{i + 1:0{width}d}",
                X=x_i,
                delta=int(delta[i]),
                cycles=cycles,
            )
        )
    truth = TruthRecord(
        subject_ids=tuple(s.subject_id for s in subjects),
        b=b,
        t_true=np.where(any_event, first.astype(float), np.inf),
        u=u,
    )
    return Dataset(subjects=tuple(subjects), truth=truth)


def split_train_test(subjects, fraction: float, rng: np.random.Generator):
    """Subject-level split into ceil(fraction * n) training and the rest."""
    if not 0.0 < fraction < 1.0:
        raise ModelError("split fraction must lie in (0, 1)")
    subjects = list(subjects)
    n = len(subjects)
    n_train = math.ceil(fraction * n)
    order = rng.permutation(n)
    train_idx = np.sort(order[:n_train])
    test_idx = np.sort(order[n_train:])
    return ([subjects[i] for i in train_idx], [subjects[i] for i in test_idx])


@dataclass(frozen=True)
class CurveFamily:
    """Scale family of peaked curves used to emit synthetic daily series.

    ``GaussianScale`` is h(t; lam) = lam * exp(-lam t^2); the two-parameter
    family is h(t; l1, l2) = l1 * f(sqrt(l2 / l1) t) for a base shape f
    with a unique maximum at 0 (Gaussian embedding: l2 = l1^2).
    """

    kind: str = "gaussian-scale"  # or "two-param-scale"
    grid: np.ndarray = field(
        default_factory=lambda: np.round(np.arange(-9.5, 9.5 + 1e-9, 0.05), 10)
    )
    base_shape: object = None  # callable f(s) for the two-parameter family

    def __post_init__(self):
        if self.kind not in ("gaussian-scale", "two-param-scale"):
            raise ModelError(f"unknown curve family {self.kind!r}")

    def shape(self):
        if self.base_shape is not None:
            return self.base_shape
        return lambda s: np.exp(-np.square(s))


def generate_curve(y_value: float, kind: FeatureKind,
                   family: CurveFamily | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sampled curve whose geometric feature equals ``y_value``.

    Returns (grid, values).  Peak value and curvature at peak invert in
    closed form; the fertile-window average has no closed inverse here.
    """
    family = family or CurveFamily()
    if y_value <= 0:
        raise ModelError(f"curve generation needs a positive feature value, got {y_value}")
    if kind is FeatureKind.AVG_CURVATURE_FERTILE_WINDOW:
        raise ModelError("average curvature has no closed-form curve inverse")
    t = np.asarray(family.grid, dtype=float)
    if family.kind == "gaussian-scale":
        lam = y_value if kind is FeatureKind.PEAK_VALUE else math.sqrt(y_value / 2.0)
        return t, lam * np.exp(-lam * t * t)
    f = family.shape()
    f0 = float(f(np.zeros(1))[0]) if np.ndim(f(np.zeros(1))) else float(f(0.0))
    h = 1e-4
    d2 = abs(float((f(np.array([h])) - 2.0 * f(np.array([0.0])) + f(np.array([-h])))[0]) / h**2)
    if kind is FeatureKind.PEAK_VALUE:
        lam1 = y_value / f0
        lam2 = lam1**2
    else:
        lam2 = y_value / d2
        lam1 = math.sqrt(lam2)
    return t, lam1 * f(np.sqrt(lam2 / lam1) * t)


@dataclass(frozen=True)
class ReplicateResult:
    index: int
    error: str | None = None
    converged: bool = False
    estimates: np.ndarray | None = None
    ses: np.ndarray | None = None
    covered: np.ndarray | None = None
    loglik: float = math.nan
    clamp_events: int = 0
    iterations: int = 0
    auc: float = math.nan
    n_e: int = 0
    curve: RocCurve | None = None
    ttp_mean: float = math.nan
    censor_prop: float = math.nan
    n_cycles: int = 0
    n_cycles_train: int = 0

    @property
    def ok(self) -> bool:
        return self.error is None and self.converged


@dataclass(frozen=True)
class StudyReport:
    scenario: Scenario
    names: tuple[str, ...]
    replicates: tuple[ReplicateResult, ...]
    param_summary: tuple[dict, ...]
    auc_mean: float
    auc_q025: float
    auc_q975: float
    n_e_median: float
    n_e_iqr: float
    ttp_mean: float
    ttp_iqr: float
    censor_mean: float
    censor_iqr: float
    cycles_median: float
    cycles_iqr: float
    train_cycles_median: float
    train_cycles_iqr: float
    n_failed: int
    band_grid: np.ndarray
    band_mean: np.ndarray
    band_lower: np.ndarray
    band_upper: np.ndarray


def predict_scores(fit_result: FitResult, test_subjects, j0: int, horizon: int,
                   L: int, predict_seed: int) -> dict[str, float]:
    """Mean pi(horizon | j0) per usable test subject, deterministic in the seed.

    Subject k in input order draws from the stream (predict_seed, k), so a
    standalone prediction run over the same subjects reproduces the study.
    """
    scores: dict[str, float] = {}
    for k, subj in enumerate(test_subjects):
        if not predictable(subj, j0) or label_at_horizon(subj, horizon) is None:
            continue
        partial = PartialData.from_subject(subj, j0)
        res = conditional_survival(
            partial, horizon, fit_result, L=L,
            rng=stream(predict_seed, k),
        )
        scores[subj.subject_id] = res.mean
    return scores


def run_replicate(scenario: Scenario, index: int, K: int = 50, L: int = 500,
                  j0: int = 1) -> ReplicateResult:
    """Simulate, split, fit, predict and evaluate one replicate."""
    horizon = scenario.censor_cycle
    dataset = simulate_dataset(scenario, stream(scenario.seed, index, 0))
    subjects = dataset.subjects
    train, test = split_train_test(subjects, scenario.train_fraction,
                                   stream(scenario.seed, index, 1))
    x_all = np.array([s.X for s in subjects])
    base = dict(
        index=index,
        ttp_mean=float(x_all.mean()),
        censor_prop=float(np.mean([s.delta == 0 for s in subjects])),
        n_cycles=int(x_all.sum()),
        n_cycles_train=int(sum(s.X for s in train)),
    )
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            result = fit(train, FitConfig(K=K))
        truth = scenario.theta_true.as_vector()
        table = param_table(result)
        estimates = result.theta_hat.as_vector()
        ses = np.array([row["se"] for row in table])
        covered = np.array(
            [row["ci_lower"] <= t <= row["ci_upper"] for row, t in zip(table, truth)]
        )
        scores = predict_scores(
            result, test, j0, horizon, L,
            predict_seed=substream_seed(scenario.seed, index, 2),
        )
        s_arr, labels = censor_filter(test, scores, j0=j0, horizon=horizon)
        curve = roc(s_arr, labels)
        n_e = sum(predictable(s, j0) for s in test)
        return ReplicateResult(
            converged=result.converged and result.covariance_status != "unavailable",
            estimates=estimates,
            ses=ses,
            covered=covered,
            loglik=result.loglik_at_optimum,
            clamp_events=result.clamp_events,
            iterations=result.iterations,
            auc=curve.auc,
            n_e=int(n_e),
            curve=curve,
            **base,
        )
    except Exception as exc:  # replicate failures are data, not crashes
        return ReplicateResult(error=f"{type(exc).__name__}: {exc}", **base)


def _replicate_star(args):
    return run_replicate(*args)


def run_study(scenario: Scenario, K: int = 50, L: int = 500, j0: int = 1,
              workers: int = 1) -> StudyReport:
    """The full replicate study: Table-style summaries plus the ROC band."""
    tasks = [(scenario, r, K, L, j0) for r in range(scenario.replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate_star, tasks, chunksize=1))
    else:
        results = [run_replicate(*t) for t in tasks]
    results.sort(key=lambda r: r.index)
    names = scenario.theta_true.names()
    truth = scenario.theta_true.as_vector()

    good = [r for r in results if r.ok]
    n_failed = len(results) - len(good)
    if not good:
        raise ModelError("every replicate failed; no aggregates to report")

    est = np.vstack([r.estimates for r in good])
    cov = np.vstack([r.covered for r in good])
    param_summary = tuple(
        {
            "parameter": names[i],
            "true": float(truth[i]),
            "bias": float(est[:, i].mean() - truth[i]),
            "sd": float(est[:, i].std(ddof=1)) if len(good) > 1 else 0.0,
            "cp": float(cov[:, i].mean()),
        }
        for i in range(len(names))
    )

    def iqr(v):
        lo, hi = np.quantile(v, [0.25, 0.75])
        return float(hi - lo)

    aucs = np.array([r.auc for r in good])
    n_es = np.array([r.n_e for r in good], dtype=float)
    ttp = np.array([r.ttp_mean for r in results])
    cens = np.array([r.censor_prop for r in results])
    cyc = np.array([r.n_cycles for r in results], dtype=float)
    cyc_tr = np.array([r.n_cycles_train for r in results], dtype=float)

    curves = [r.curve for r in good]
    if len(curves) >= 2:
        grid, mean_c, lo_c, hi_c = roc_band(curves)
    else:
        grid = np.linspace(0.0, 1.0, 101)
        mean_c = lo_c = hi_c = np.full_like(grid, math.nan)

    return StudyReport(
        scenario=scenario,
        names=tuple(names),
        replicates=tuple(results),
        param_summary=param_summary,
        auc_mean=float(aucs.mean()),
        auc_q025=float(np.quantile(aucs, 0.025)),
        auc_q975=float(np.quantile(aucs, 0.975)),
        n_e_median=float(np.median(n_es)),
        n_e_iqr=iqr(n_es),
        ttp_mean=float(ttp.mean()),
        ttp_iqr=iqr(ttp),
        censor_mean=float(cens.mean()),
        censor_iqr=iqr(cens),
        cycles_median=float(np.median(cyc)),
        cycles_iqr=iqr(cyc),
        train_cycles_median=float(np.median(cyc_tr)),
        train_cycles_iqr=iqr(cyc_tr),
        n_failed=n_failed,
        band_grid=grid,
        band_mean=mean_c,
        band_lower=lo_c,
        band_upper=hi_c,
    )
