"""ROC and AUC machinery for subfertility classification.

Scores are predicted conditional survival probabilities pi(horizon | j0)
and the positive label is I(T > horizon).  The empirical ROC steps
through every distinct score cutoff; the area under it (trapezoid rule)
equals the concordance probability with ties counted one half.  Bands
across simulation replicates re-express each curve on a shared
1-specificity grid through monotone piecewise-linear interpolation and
summarize pointwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import ModelError, SubjectRecord


@dataclass(frozen=True)
class RocCurve:
    """Empirical ROC: sensitivity and 1-specificity at ascending cutoffs."""

    cutoffs: np.ndarray
    sensitivity: np.ndarray
    one_minus_specificity: np.ndarray
    auc: float


def roc(scores, labels) -> RocCurve:
    """Empirical ROC over all distinct cutoffs plus the +-inf endpoints."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ModelError("scores and labels must be 1-D arrays of equal length")
    pos = int(np.sum(labels == 1))
    neg = int(np.sum(labels == 0))
    if pos == 0 or neg == 0:
        raise ModelError("ROC needs at least one positive and one negative label")
    cuts = np.unique(scores)
    # sensitivity(c) = P(score > c | label 1); specificity(c) = P(score <= c | 0)
    sens = np.empty(len(cuts) + 2)
    fpr = np.empty(len(cuts) + 2)
    cutoffs = np.concatenate([[-np.inf], cuts, [np.inf]])
    for i, c in enumerate(cutoffs):
        above = scores > c
        sens[i] = np.sum(above & (labels == 1)) / pos
        fpr[i] = np.sum(above & (labels == 0)) / neg
    # cutoffs ascend, so (fpr, sens) runs from (1, 1) down to (0, 0)
    auc = float(np.trapezoid(sens[::-1], fpr[::-1]))
    return RocCurve(cutoffs=cutoffs, sensitivity=sens,
                    one_minus_specificity=fpr, auc=auc)


def predictable(subject: SubjectRecord, j0: int) -> bool:
    """True when T > j0 is known from the observed data."""
    return subject.X > j0 or (subject.delta == 0 and subject.X >= j0)


def label_at_horizon(subject: SubjectRecord, horizon: int) -> int | None:
    """I(T > horizon) when determinable, else None (censored in between)."""
    if subject.delta == 1:
        return int(subject.X > horizon)
    return 1 if subject.X >= horizon else None


def censor_filter(subjects: Sequence[SubjectRecord],
                  scores: Mapping[str, float],
                  j0: int = 1, horizon: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Scores and I(T > horizon) labels for usable prediction subjects.

    Subjects whose censoring hides the label (censored strictly between
    j0 and the horizon) are dropped, as are subjects with T <= j0.
    """
    out_scores, out_labels = [], []
    for subj in subjects:
        if not predictable(subj, j0):
            continue
        label = label_at_horizon(subj, horizon)
        if label is None:
            continue
        if subj.subject_id not in scores:
            raise ModelError(f"no prediction score for subject {subj.subject_id}")
        out_scores.append(scores[subj.subject_id])
        out_labels.append(label)
    return np.asarray(out_scores, dtype=float), np.asarray(out_labels, dtype=int)


def curve_on_grid(curve: RocCurve, grid: np.ndarray) -> np.ndarray:
    """Sensitivity at fixed 1-specificity points via monotone linear
    interpolation of the curve's vertices (vertical jumps collapse to
    their upper value)."""
    order = np.argsort(curve.one_minus_specificity)
    x = curve.one_minus_specificity[order]
    y = curve.sensitivity[order]
    ux, inverse = np.unique(x, return_inverse=True)
    uy = np.zeros(len(ux))
    np.maximum.at(uy, inverse, y)
    return np.interp(grid, ux, uy)


def roc_band(curves: Sequence[RocCurve],
             grid: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pointwise mean and 2.5%/97.5% quantile curves across replicates.

    Returns (grid, mean, lower, upper).
    """
    if len(curves) < 2:
        raise ModelError("need at least two curves for a band")
    grid = np.linspace(0.0, 1.0, 101) if grid is None else np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ModelError("quantile grid is empty")
    if grid.min() < 0 or grid.max() > 1:
        raise ModelError("quantile grid must lie in [0, 1]")
    stack = np.vstack([curve_on_grid(c, grid) for c in curves])
    mean = stack.mean(axis=0)
    lo = np.quantile(stack, 0.025, axis=0)
    hi = np.quantile(stack, 0.975, axis=0)
    return grid, mean, lo, hi
