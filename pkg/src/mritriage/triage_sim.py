"""Retrospective day-by-day replay of a radiology reporting worklist.

Each day the exams acquired that day join the queue, the queue is ordered by
(priority class desc, acquisition day asc, id asc), and as many exams as were
historically reported that day are taken from the front. Comparing the
resulting delays with the historical ones, and with a null distribution in
which priorities are assigned at random, measures what a triage classifier
would have changed.
"""

import csv
import heapq
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._rng import derive_rng
from .errors import DataError, ValidationError

POLICIES = ("two_class_priority", "fifo", "random")
LABEL_SOURCES = ("noisy", "true", "predicted")
COHORT_COLUMNS = ["id", "site", "acquisition_day", "historical_report_day",
                  "true_label", "noisy_label", "predicted_class", "age"]


@dataclass(frozen=True)
class Exam:
    id: str
    site: str
    acquisition_day: int
    historical_report_day: int | None
    noisy_label: int
    predicted_class: int | None = None
    true_label: int | None = None
    age_years: float | None = None

    def __post_init__(self):
        if self.acquisition_day < 0:
            raise DataError(f"exam {self.id}: acquisition_day must be >= 0")
        if self.historical_report_day is not None and self.historical_report_day < self.acquisition_day:
            raise DataError(f"exam {self.id}: reported before it was acquired")

    @property
    def historical_delay(self):
        if self.historical_report_day is None:
            return None
        return self.historical_report_day - self.acquisition_day

    def label(self, source):
        if source == "noisy":
            return self.noisy_label
        if source == "true":
            return self.true_label
        if source == "predicted":
            return self.predicted_class
        raise ValidationError(f"unknown label source {source!r}")


@dataclass(frozen=True)
class DailySchedule:
    """Reports that can be published on each day index."""

    capacity: dict

    def __post_init__(self):
        for day, cap in self.capacity.items():
            if cap < 0:
                raise DataError(f"negative capacity on day {day}")

    @property
    def first_day(self):
        return min(self.capacity) if self.capacity else None

    @property
    def horizon(self):
        return max(self.capacity) if self.capacity else None

    @property
    def total(self):
        return sum(self.capacity.values())

    def mean_daily_capacity(self):
        if not self.capacity:
            return 0.0
        return self.total / (self.horizon - self.first_day + 1)


def derive_daily_capacity(exams):
    """Count how many exams were historically reported on each day."""
    counts = Counter()
    for exam in exams:
        if exam.historical_report_day is None:
            raise DataError(f"exam {exam.id} has no historical report day")
        counts[exam.historical_report_day] += 1
    return DailySchedule(dict(sorted(counts.items())))


@dataclass
class SimulationResult:
    report_day: dict
    exams: list = field(repr=False)
    policy: str = "two_class_priority"
    residual_drained: bool = False

    def delay(self, exam):
        return self.report_day[exam.id] - exam.acquisition_day

    def delays_by_class(self, source="noisy"):
        out = {0: [], 1: []}
        for exam in self.exams:
            cls = exam.label(source)
            if cls is None:
                raise DataError(f"exam {exam.id} has no {source} label")
            out[cls].append(self.delay(exam))
        return out

    def total_delay(self):
        return sum(self.delay(e) for e in self.exams)


def _priorities(exams, policy, seed, random_weight):
    if policy == "fifo":
        return [0] * len(exams)
    if policy == "two_class_priority":
        missing = [e.id for e in exams if e.predicted_class is None]
        if missing:
            raise DataError(f"policy two_class_priority needs predicted_class (missing for {missing[0]})")
        return [e.predicted_class for e in exams]
    if policy == "random":
        if seed is None:
            raise ValidationError("random policy needs a seed")
        rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed, "triage_sim", "random")
        return (rng.random(len(exams)) < random_weight).astype(int).tolist()
    raise ValidationError(f"unknown policy {policy!r}; expected one of {POLICIES}")


def run_priority_sim(exams, schedule, policy="two_class_priority", seed=None,
                     random_weight=0.5, drain_before_enqueue=False):
    """Replay the worklist under ``policy`` and record each exam's report day.

    policy
        ``"two_class_priority"`` ranks by ``predicted_class``; ``"fifo"`` by
        acquisition order only; ``"random"`` draws a class per exam with
        ``P(abnormal) = random_weight`` from ``seed`` (an int or Generator).

    Unused capacity on a day is forfeited. Exams still queued after the
    schedule horizon drain at ``ceil(mean daily capacity)`` per day and the
    result is flagged ``residual_drained``. With ``drain_before_enqueue`` the
    day's capacity is spent before that day's arrivals join, so same-day
    reporting is impossible.
    """
    exams = list(exams)
    if not 0 <= random_weight <= 1:
        raise ValidationError("random_weight must lie in [0, 1]")
    prio = _priorities(exams, policy, seed, random_weight)
    if not exams:
        return SimulationResult({}, exams, policy)
    if not schedule.capacity:
        raise DataError("schedule is empty but there are exams to report")
    horizon = schedule.horizon
    late = [e.id for e in exams if e.acquisition_day > horizon]
    if late:
        raise DataError(f"exam {late[0]} acquired after the schedule horizon (day {horizon})")
    ids = [e.id for e in exams]
    if len(set(ids)) != len(ids):
        raise DataError("exam ids must be unique")

    arrivals = {}
    for k, exam in enumerate(exams):
        arrivals.setdefault(exam.acquisition_day, []).append(k)

    queue = []
    report_day = {}

    def enqueue(day):
        for k in arrivals.get(day, ()):
            heapq.heappush(queue, (-prio[k], exams[k].acquisition_day, exams[k].id, k))

    def drain(day, n):
        for _ in range(min(n, len(queue))):
            k = heapq.heappop(queue)[3]
            report_day[exams[k].id] = day

    start = min(schedule.first_day, min(arrivals))
    for day in range(start, horizon + 1):
        cap = schedule.capacity.get(day, 0)
        if drain_before_enqueue:
            drain(day, cap)
            enqueue(day)
        else:
            enqueue(day)
            drain(day, cap)

    residual = bool(queue)
    if residual:
        rate = max(1, math.ceil(schedule.mean_daily_capacity()))
        day = horizon
        while queue:
            day += 1
            drain(day, rate)
    return SimulationResult(report_day, exams, policy, residual)


@dataclass(frozen=True)
class DelayStats:
    mean: float
    sd: float
    n: int

    def to_dict(self):
        return {"mean": self.mean, "sd": self.sd, "n": self.n}


def delay_stats(delays):
    """Mean and population SD (divide by n); NaN for an empty group."""
    arr = np.asarray(delays, dtype=float)
    if arr.size == 0:
        return DelayStats(math.nan, math.nan, 0)
    return DelayStats(float(arr.mean()), float(arr.std()), int(arr.size))


def historical_delays(exams, source="noisy"):
    """Historical delay statistics stratified by ``source`` label."""
    groups = {0: [], 1: []}
    for exam in exams:
        if exam.historical_report_day is None:
            raise DataError(f"exam {exam.id} has no historical report day")
        cls = exam.label(source)
        if cls is None:
            raise DataError(f"exam {exam.id} has no {source} label")
        groups[cls].append(exam.historical_delay)
    return {cls: delay_stats(d) for cls, d in groups.items()}


def simulated_delays(result, source="noisy"):
    return {cls: delay_stats(d) for cls, d in result.delays_by_class(source).items()}


@dataclass
class NullDistribution:
    """Per-run class mean delays, columns ``(abnormal, normal)``."""

    runs: np.ndarray
    seed: int

    def __len__(self):
        return len(self.runs)

    def column(self, cls):
        if cls in ("abnormal", 1):
            return self.runs[:, 0]
        if cls in ("normal", 0):
            return self.runs[:, 1]
        raise ValidationError(f"unknown class {cls!r}")


def _null_run(args):
    exams, schedule, seed, r, weight, source, drain_first = args
    rng = derive_rng(seed, "triage_sim", "null", r)
    res = run_priority_sim(exams, schedule, "random", rng, weight, drain_first)
    by = res.delays_by_class(source)
    mean = lambda d: float(np.mean(d)) if d else math.nan  # noqa: E731
    return mean(by[1]), mean(by[0])


def permutation_null(exams, schedule, repeats=1000, seed=0, random_weight=0.5,
                     source="noisy", jobs=1, drain_before_enqueue=False):
    """Repeat the replay with random priorities; one row per run.

    Run ``r`` draws from the sub-stream ``(seed, r)``, so the output does not
    depend on ``jobs`` or completion order.
    """
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    exams = list(exams)
    tasks = [(exams, schedule, seed, r, random_weight, source, drain_before_enqueue)
             for r in range(repeats)]
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_null_run, tasks, chunksize=max(1, repeats // (4 * jobs))))
    else:
        rows = [_null_run(t) for t in tasks]
    return NullDistribution(np.array(rows, dtype=float).reshape(repeats, 2), seed)


def prevalence_weight(exams):
    """Fraction of exams the classifier calls abnormal, for a prevalence-matched null."""
    calls = [e.predicted_class for e in exams if e.predicted_class is not None]
    if not calls:
        raise DataError("no predicted_class values to estimate prevalence from")
    return float(np.mean(calls))


def p_value(observed_mean, null, tail="lower", cls="abnormal"):
    """Add-one permutation p-value, ``(1 + #as-extreme) / (1 + runs)``."""
    values = null.column(cls)
    if values.size == 0:
        raise DataError("null distribution is empty")
    if tail == "lower":
        extreme = np.sum(values <= observed_mean)
    elif tail == "upper":
        extreme = np.sum(values >= observed_mean)
    else:
        raise ValidationError(f"tail must be 'lower' or 'upper', got {tail!r}")
    return float((1 + extreme) / (1 + values.size))


@dataclass
class PolicyComparison:
    historical: dict
    prioritized: dict
    null_quantiles: dict
    p_values: dict
    policy: str
    repeats: int
    residual_drained: bool
    null: NullDistribution = field(default=None, repr=False, compare=False)
    result: SimulationResult = field(default=None, repr=False, compare=False)

    def to_dict(self):
        name = {0: "normal", 1: "abnormal"}
        return {
            "sd_convention": "population (divide by n)",
            "policy": self.policy,
            "repeats": self.repeats,
            "residual_drained": self.residual_drained,
            "historical": {name[c]: s.to_dict() for c, s in self.historical.items()},
            "prioritized": {name[c]: s.to_dict() for c, s in self.prioritized.items()},
            "null_quantiles": self.null_quantiles,
            "p_values": self.p_values,
        }

    def format_table(self):
        rows = [("", "Normal", "Abnormal")]
        for label, stats in (("Historical", self.historical), (self.policy, self.prioritized)):
            rows.append((label, *(f"{stats[c].mean:.1f} +/- {stats[c].sd:.1f} days" for c in (0, 1))))
        q = self.null_quantiles
        rows.append(("Null median", f"{q['normal']['0.5']:.1f} days", f"{q['abnormal']['0.5']:.1f} days"))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows)


QUANTILES = (0.025, 0.5, 0.975)


def compare_policies(exams, schedule=None, policy="two_class_priority", repeats=1000, seed=0,
                     source="noisy", random_weight=0.5, jobs=1, drain_before_enqueue=False,
                     null=None):
    """Historical vs simulated vs random-priority null, per class.

    p-values test the abnormal mean (lower tail) and the normal mean (upper
    tail) of the simulated run against the null.
    """
    exams = list(exams)
    if schedule is None:
        schedule = derive_daily_capacity(exams)
    result = run_priority_sim(exams, schedule, policy, seed if policy == "random" else None,
                              random_weight, drain_before_enqueue)
    hist = historical_delays(exams, source)
    prio = simulated_delays(result, source)
    if null is None:
        null = permutation_null(exams, schedule, repeats, seed, random_weight, source, jobs,
                                drain_before_enqueue)
    quantiles = {}
    for cls in ("abnormal", "normal"):
        col = null.column(cls)
        quantiles[cls] = {str(q): float(np.quantile(col, q)) for q in QUANTILES}
    p = {
        "abnormal_lower": p_value(prio[1].mean, null, "lower", "abnormal"),
        "normal_upper": p_value(prio[0].mean, null, "upper", "normal"),
    }
    return PolicyComparison(hist, prio, quantiles, p, policy, len(null), result.residual_drained, null, result)


def _opt_int(text):
    text = text.strip()
    return None if text == "" else int(text)


def read_cohort_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ("id", "site", "acquisition_day", "historical_report_day", "noisy_label"):
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        exams = []
        for lineno, row in enumerate(reader, start=2):
            try:
                age = (row.get("age") or "").strip()
                exams.append(Exam(
                    id=row["id"],
                    site=row["site"],
                    acquisition_day=int(row["acquisition_day"]),
                    historical_report_day=_opt_int(row["historical_report_day"]),
                    noisy_label=int(row["noisy_label"]),
                    predicted_class=_opt_int(row.get("predicted_class") or ""),
                    true_label=_opt_int(row.get("true_label") or ""),
                    age_years=float(age) if age else None,
                ))
            except (ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return exams


def write_cohort_csv(path, exams):
    def cell(v):
        return "" if v is None else v

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COHORT_COLUMNS)
        for e in exams:
            age = "" if e.age_years is None else f"{e.age_years:.1f}"
            writer.writerow([e.id, e.site, e.acquisition_day, cell(e.historical_report_day),
                             cell(e.true_label), e.noisy_label, cell(e.predicted_class), age])
