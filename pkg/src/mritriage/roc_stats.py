"""ROC curves, Mann-Whitney AUC, DeLong's paired test and Fleiss' kappa.

Scores are "higher = more abnormal"; a sample is called positive when its
score is >= the threshold.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm, rankdata

from .errors import DataError, ValidationError


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: int

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise DataError("score must be finite")
        if self.label not in (0, 1):
            raise DataError("label must be 0 or 1")


def _split(samples=None, scores=None, labels=None):
    if samples is not None:
        scores = [s.score for s in samples]
        labels = [s.label for s in samples]
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError("scores and labels must be 1-D and of equal length")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    if not np.all(np.isin(labels, (0, 1))):
        raise DataError("labels must be binary (0/1)")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise DataError("AUC is undefined unless both classes are present")
    return scores, labels


def auc(samples=None, *, scores=None, labels=None):
    """Mann-Whitney AUC with tied pairs counted 0.5.

    Pass either a sequence of :class:`ScoredSample` or ``scores=``/``labels=``
    arrays.
    """
    scores, labels = _split(samples, scores, labels)
    m = int(labels.sum())
    n = labels.size - m
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - m * (m + 1) / 2) / (m * n))


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def __len__(self):
        return len(self.fpr)

    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))

    def trapezoid_area(self):
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2))


def roc_curve(samples=None, *, scores=None, labels=None):
    """One point per distinct score, plus the ``(0, 0)`` start at ``+inf``."""
    scores, labels = _split(samples, scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # Last index of each run of equal scores in descending order.
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    m, n = tp[-1], fp[-1]
    fpr = np.r_[0.0, fp / n]
    tpr = np.r_[0.0, tp / m]
    thresholds = np.r_[np.inf, s[last]]
    return RocCurve(fpr, tpr, thresholds)


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    fpr: float
    tpr: float

    @property
    def sensitivity(self):
        return self.tpr

    @property
    def specificity(self):
        return 1.0 - self.fpr


def operating_point(curve, strategy="youden", value=None):
    """Select a threshold on ``curve``.

    strategy
        ``"youden"``: maximise ``tpr - fpr``; ties go to the lower threshold.
        ``"sensitivity_floor"``: lowest-fpr point with ``tpr >= value``.
        ``"threshold"``: the rates obtained when calling ``score >= value``.
    """
    fpr, tpr, thr = curve.fpr, curve.tpr, curve.thresholds
    if strategy == "youden":
        j = tpr - fpr
        # Thresholds descend along the curve, so the last maximum is the lowest.
        i = int(np.flatnonzero(j == j.max())[-1])
    elif strategy == "sensitivity_floor":
        # The curve always ends at tpr = 1, so only floors above 1 are unreachable.
        if value is None or not 0 <= value <= 1:
            raise ValidationError(f"sensitivity floor {value!r} is unreachable; need a value in [0, 1]")
        ok = np.flatnonzero(tpr >= value)
        best = ok[fpr[ok] == fpr[ok].min()]
        i = int(best[-1])
    elif strategy == "threshold":
        if value is None:
            raise ValidationError("threshold strategy needs a value")
        ok = np.flatnonzero(thr >= value)
        i = int(ok[-1])
    else:
        raise ValidationError(f"unknown operating-point strategy {strategy!r}")
    return OperatingPoint(float(thr[i]), float(fpr[i]), float(tpr[i]))


@dataclass(frozen=True)
class DelongResult:
    auc_a: float
    auc_b: float
    variance_of_difference: float
    z: float
    p_two_sided: float
    degenerate_variance: bool = False

    def to_dict(self):
        return asdict(self)


def placement_values(scores, labels):
    """DeLong structural components ``(V10, V01)`` for one score vector.

    ``V10[i]`` is the fraction of negatives a positive beats (ties 0.5);
    ``V01[j]`` the fraction of positives that beat a negative.
    """
    pos, neg = scores[labels], scores[~labels]
    m, n = pos.size, neg.size
    r_all = rankdata(np.r_[pos, neg])
    r_pos = rankdata(pos)
    r_neg = rankdata(neg)
    v10 = (r_all[:m] - r_pos) / n
    v01 = 1.0 - (r_all[m:] - r_neg) / m
    return v10, v01


def delong_test(scores_a, scores_b, labels):
    """Two-sided DeLong test for the difference of two paired AUCs."""
    a, y = _split(scores=scores_a, labels=labels)
    b, _ = _split(scores=scores_b, labels=labels)
    v10_a, v01_a = placement_values(a, y)
    v10_b, v01_b = placement_values(b, y)
    m, n = v10_a.size, v01_a.size
    auc_a, auc_b = auc(scores=a, labels=y), auc(scores=b, labels=y)
    s10 = np.cov(np.vstack([v10_a, v10_b])) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(np.vstack([v01_a, v01_b])) if n > 1 else np.zeros((2, 2))
    var = (s10[0, 0] + s10[1, 1] - 2 * s10[0, 1]) / m + (s01[0, 0] + s01[1, 1] - 2 * s01[0, 1]) / n
    var = max(float(var), 0.0)
    diff = auc_a - auc_b
    if var == 0.0:
        if diff == 0.0:
            return DelongResult(auc_a, auc_b, 0.0, 0.0, 1.0)
        return DelongResult(auc_a, auc_b, 0.0, math.copysign(math.inf, diff), 0.0, True)
    z = diff / math.sqrt(var)
    p = float(min(1.0, 2 * norm.sf(abs(z))))
    return DelongResult(auc_a, auc_b, var, z, p)


def fleiss_kappa(table):
    """Fleiss' kappa for an ``n_subjects x n_categories`` table of rater counts."""
    counts = np.asarray(table)
    if counts.ndim != 2 or counts.shape[0] < 1:
        raise DataError("ratings table must be a non-empty 2-D array")
    if np.any(counts < 0) or not np.all(counts == np.round(counts)):
        raise DataError("ratings must be non-negative integer counts")
    counts = counts.astype(float)
    per_subject = counts.sum(axis=1)
    raters = per_subject[0]
    if np.any(per_subject != raters):
        raise DataError("every subject must be rated by the same number of raters")
    if raters < 2:
        raise DataError("Fleiss' kappa needs at least two raters per subject")
    p_j = counts.sum(axis=0) / counts.sum()
    p_i = (np.sum(counts * counts, axis=1) - raters) / (raters * (raters - 1))
    p_bar = p_i.mean()
    p_e = float(np.sum(p_j ** 2))
    if p_e == 1.0:
        raise DataError("kappa undefined: every rating falls in a single category")
    return float((p_bar - p_e) / (1 - p_e))


def summarize_repeats(values):
    """Mean and population SD of per-repeat metrics, alongside the raw values."""
    arr = np.asarray(values, dtype=float)
    return {"values": arr.tolist(), "mean": float(arr.mean()), "sd": float(arr.std())}
