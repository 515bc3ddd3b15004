"""Seeded synthetic cohorts and feature sets.

Cohort presets reproduce the published out-patient simulation statistics
(cohort size, abnormal fraction, age, per-class historical reporting delay).
Feature sets are class-conditional Gaussians with a shared isotropic
covariance, so the Bayes posterior is available in closed form.
"""

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import optimize, stats

from ._rng import derive_rng
from .errors import ValidationError
from .noise_correction import ALARM_T, LabeledFeatureSet, TransitionMatrix
from .triage_sim import Exam

WEEKDAYS_ONLY = (1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0)  # day 0 is a Monday


@dataclass(frozen=True)
class CohortParams:
    """Generator settings.

    ``delay_model`` maps true class to a ``(mean, sd)`` pair in days. Delays
    are drawn from a normal truncated at zero and rounded to whole days. With
    ``calibrate_delays`` (the default) the pair is the target moments of the
    realised delays and the underlying normal is solved for; otherwise the
    pair parameterises the underlying normal directly.
    """

    n_exams: int
    abnormal_fraction: float
    days: int = 365
    arrival_weights: tuple = WEEKDAYS_ONLY
    delay_model: dict = field(default_factory=lambda: {0: (10.0, 8.0), 1: (9.0, 7.0)})
    classifier_sensitivity: float = 0.90
    classifier_specificity: float = 0.85
    label_noise_T: TransitionMatrix = ALARM_T
    seed: int = 0
    calibrate_delays: bool = True
    site: str = "SITE"
    age_mean: float = 50.5
    age_sd: float = 17.1

    def __post_init__(self):
        if self.n_exams < 1:
            raise ValidationError("n_exams must be >= 1")
        if not 0 < self.abnormal_fraction < 1:
            raise ValidationError(f"abnormal_fraction must lie in (0, 1), got {self.abnormal_fraction}")
        if self.days < 1:
            raise ValidationError("days must be >= 1")
        w = np.asarray(self.arrival_weights, dtype=float)
        if w.shape != (7,) or np.any(w < 0) or w.sum() <= 0:
            raise ValidationError("arrival_weights needs 7 non-negative weights with a positive sum")
        if self.days < 7 and w[: self.days].sum() <= 0:
            raise ValidationError("no arrival day has positive weight within the horizon")
        for cls in (0, 1):
            mean, sd = self.delay_model[cls]
            if mean < 0 or sd <= 0:
                raise ValidationError(f"delay_model[{cls}] needs mean >= 0 and sd > 0")
        for name in ("classifier_sensitivity", "classifier_specificity"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValidationError(f"{name} must lie in (0, 1], got {v}")
        if not isinstance(self.label_noise_T, TransitionMatrix):
            object.__setattr__(self, "label_noise_T", TransitionMatrix(self.label_noise_T))


def rounded_truncnorm_moments(mu, sigma):
    """Mean and SD of ``rint(X)`` for ``X ~ N(mu, sigma)`` truncated to ``X >= 0``."""
    a = -mu / sigma
    dist = stats.truncnorm(a, np.inf, loc=mu, scale=sigma)
    kmax = int(math.ceil(max(mu, 0) + 12 * sigma)) + 1
    k = np.arange(kmax + 1)
    edges = np.clip(np.r_[k - 0.5, kmax + 0.5], 0, None)
    pmf = np.diff(dist.cdf(edges))
    pmf /= pmf.sum()
    mean = float(np.sum(k * pmf))
    var = float(np.sum((k - mean) ** 2 * pmf))
    return mean, math.sqrt(var)


@lru_cache(maxsize=None)
def calibrate_delay(target_mean, target_sd):
    """Underlying ``(mu, sigma)`` whose rounded zero-truncated delays have the target moments."""
    if target_mean <= 0 or target_sd <= 0:
        raise ValidationError("target delay moments must be positive")

    def resid(x):
        m, s = rounded_truncnorm_moments(x[0], x[1])
        return [m - target_mean, s - target_sd]

    sol = optimize.least_squares(resid, x0=[target_mean, target_sd],
                                 bounds=([-10 * target_sd, 1e-3], [np.inf, np.inf]), xtol=1e-12)
    if max(abs(r) for r in sol.fun) > 1e-6:
        raise ValidationError(f"cannot reach delay moments ({target_mean}, {target_sd}) "
                              "with a zero-truncated normal")
    return float(sol.x[0]), float(sol.x[1])


# Historical out-patient reporting delays are realised (mean, sd) in days, by class.
PRESETS = {
    "kch2018": dict(site="KCH", n_exams=2986, abnormal_fraction=0.671,
                    delay_targets={0: (10.0, 8.0), 1: (9.0, 7.0)},
                    age_mean=51.6, age_sd=14.3),
    "gstt2018": dict(site="GSTT", n_exams=1875, abnormal_fraction=0.501,
                     delay_targets={0: (31.0, 21.0), 1: (28.0, 22.0)},
                     age_mean=50.2, age_sd=14.8),
}


def preset(name, seed=0, **overrides):
    """Cohort parameters for a named hospital-year with calibrated delays."""
    try:
        spec = dict(PRESETS[name])
    except KeyError:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    spec["delay_model"] = spec.pop("delay_targets")
    spec.update(overrides)
    return CohortParams(seed=seed, **spec)


def underlying_delay_params(params, cls):
    """``(mu, sigma)`` of the normal that is truncated and rounded for class ``cls``."""
    mean, sd = params.delay_model[cls]
    if params.calibrate_delays:
        return calibrate_delay(float(mean), float(sd))
    return float(mean), float(sd)


def _flip(true_labels, t, rng):
    p_abnormal = t.t[1][true_labels]
    return (rng.random(true_labels.size) < p_abnormal).astype(np.int64)


def inject_label_noise(true_labels, t, seed):
    """Draw noisy labels: a true label ``i`` becomes 1 with probability ``T[1, i]``."""
    true_labels = np.asarray(true_labels, dtype=np.int64)
    return _flip(true_labels, t, derive_rng(seed, "cohort_gen", "label_noise"))


def _truncnorm_delays(mu, sigma, size, rng):
    if size == 0:
        return np.zeros(0, dtype=np.int64)
    x = stats.truncnorm.rvs(-mu / sigma, np.inf, loc=mu, scale=sigma, size=size, random_state=rng)
    return np.maximum(0, np.rint(x)).astype(np.int64)


def generate_cohort(params):
    """Exams sorted by acquisition day; ids ``<site>-00000`` follow that order."""
    p = params
    n = p.n_exams
    true = (derive_rng(p.seed, "cohort", "labels").random(n) < p.abnormal_fraction).astype(np.int64)

    w = np.asarray(p.arrival_weights, dtype=float)
    day_w = w[np.arange(p.days) % 7]
    acq = derive_rng(p.seed, "cohort", "arrivals").choice(p.days, size=n, p=day_w / day_w.sum())

    delays = np.zeros(n, dtype=np.int64)
    delay_rng = derive_rng(p.seed, "cohort", "delays")
    for cls in (0, 1):
        mask = true == cls
        mu, sigma = underlying_delay_params(p, cls)
        delays[mask] = _truncnorm_delays(mu, sigma, int(mask.sum()), delay_rng)

    noisy = _flip(true, p.label_noise_T, derive_rng(p.seed, "cohort", "label_noise"))

    u = derive_rng(p.seed, "cohort", "classifier").random(n)
    predicted = np.where(true == 1, u < p.classifier_sensitivity, u >= p.classifier_specificity).astype(np.int64)

    ages = np.maximum(18.0, derive_rng(p.seed, "cohort", "ages").normal(p.age_mean, p.age_sd, n))

    order = np.argsort(acq, kind="stable")
    width = max(5, len(str(n - 1)))
    exams = []
    for rank, k in enumerate(order):
        exams.append(Exam(
            id=f"{p.site}-{rank:0{width}d}",
            site=p.site,
            acquisition_day=int(acq[k]),
            historical_report_day=int(acq[k] + delays[k]),
            noisy_label=int(noisy[k]),
            predicted_class=int(predicted[k]),
            true_label=int(true[k]),
            age_years=round(float(ages[k]), 1),
        ))
    return exams


@dataclass(frozen=True)
class FeatureParams:
    """Class-conditional Gaussian features, covariance ``class_cov_scale * I``.

    By convention the last column stands in for the standardised patient age.
    """

    n: int
    d: int
    class_means: tuple
    class_cov_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=float)
        if self.n < 1 or self.d < 1:
            raise ValidationError("n and d must be >= 1")
        if means.shape != (2, self.d):
            raise ValidationError(f"class_means must have shape (2, {self.d})")
        if not self.class_cov_scale > 0:
            raise ValidationError("class_cov_scale must be positive")

    @property
    def means(self):
        return np.asarray(self.class_means, dtype=float)

    @property
    def sigma(self):
        return math.sqrt(self.class_cov_scale)

    @classmethod
    def separated(cls, n, d=4, separation=2.0, seed=0, class_cov_scale=1.0):
        """Class means ``separation`` standard deviations apart along the diagonal."""
        step = separation * math.sqrt(class_cov_scale) / math.sqrt(d)
        return cls(n, d, (tuple([0.0] * d), tuple([step] * d)), class_cov_scale, seed)

    def with_seed(self, seed):
        return replace(self, seed=seed)


def generate_features(params, labels, ids=None):
    """Draw one feature row per label; noisy labels start equal to the true ones."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size != params.n:
        raise ValidationError(f"expected {params.n} labels, got {labels.size}")
    rng = derive_rng(params.seed, "cohort_gen", "features")
    noise = rng.standard_normal((params.n, params.d)) * params.sigma
    x = params.means[labels] + noise
    return LabeledFeatureSet(x, labels.copy(), labels.copy(), ids)


def bayes_log_odds(params, features, prior_abnormal):
    x = np.atleast_2d(np.asarray(features, dtype=float))
    mu0, mu1 = params.means
    w = (mu1 - mu0) / params.class_cov_scale
    c = (mu0 @ mu0 - mu1 @ mu1) / (2 * params.class_cov_scale)
    return x @ w + c + math.log(prior_abnormal / (1 - prior_abnormal))


def bayes_posterior(params, features, prior_abnormal):
    """Analytic ``p(abnormal | x)`` for the generating Gaussians."""
    return 1.0 / (1.0 + np.exp(-bayes_log_odds(params, features, prior_abnormal)))


def bayes_auc(params):
    """Population AUC of the Bayes score, ``Phi(|mu1 - mu0| / (sigma * sqrt 2))``."""
    delta = np.linalg.norm(params.means[1] - params.means[0])
    return float(stats.norm.cdf(delta / (params.sigma * math.sqrt(2))))
