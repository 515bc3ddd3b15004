import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mritriage.errors import DataError, ValidationError
from mritriage.triage_sim import (
    DailySchedule,
    Exam,
    NullDistribution,
    compare_policies,
    delay_stats,
    derive_daily_capacity,
    historical_delays,
    p_value,
    permutation_null,
    prevalence_weight,
    read_cohort_csv,
    run_priority_sim,
    simulated_delays,
    write_cohort_csv,
)


def hand_instance():
    # id, acquisition day, historical report day, predicted class, noisy label
    rows = [("A", 0, 0, 0, 0), ("B", 0, 1, 1, 1), ("C", 0, 2, 0, 0),
            ("D", 1, 1, 1, 1), ("E", 1, 2, 1, 1), ("F", 2, 2, 0, 1)]
    return [Exam(i, "X", a, h, noisy_label=n, predicted_class=p, true_label=n) for i, a, h, p, n in rows]


HAND_PRIORITY = {"A": 2, "B": 0, "C": 2, "D": 1, "E": 1, "F": 2}
HAND_FIFO = {"A": 0, "B": 1, "C": 1, "D": 2, "E": 2, "F": 2}


@st.composite
def feasible_cohorts(draw, max_exams=50, max_days=20):
    n = draw(st.integers(1, max_exams))
    days = draw(st.integers(1, max_days))
    exams = []
    for k in range(n):
        acq = draw(st.integers(0, days - 1))
        rep = draw(st.integers(acq, days - 1))
        true = draw(st.integers(0, 1))
        exams.append(Exam(f"e{k:03d}", "S", acq, rep, noisy_label=draw(st.integers(0, 1)),
                          predicted_class=draw(st.integers(0, 1)), true_label=true))
    return exams


class TestCapacity:
    def test_counts(self):
        exams = [Exam(str(i), "S", 0, 5, 0) for i in range(3)]
        assert derive_daily_capacity(exams).capacity == {5: 3}

    def test_empty(self):
        assert derive_daily_capacity([]).capacity == {}

    @given(feasible_cohorts())
    def test_total_equals_cohort(self, exams):
        assert derive_daily_capacity(exams).total == len(exams)

    def test_negative_rejected(self):
        with pytest.raises(DataError):
            DailySchedule({0: -1})


class TestRunPrioritySim:
    def test_hand_instance_priority(self):
        exams = hand_instance()
        res = run_priority_sim(exams, derive_daily_capacity(exams))
        assert res.report_day == HAND_PRIORITY
        assert not res.residual_drained

    def test_hand_instance_fifo(self):
        exams = hand_instance()
        res = run_priority_sim(exams, derive_daily_capacity(exams), "fifo")
        assert res.report_day == HAND_FIFO
        assert res.total_delay() == 4

    def test_ample_capacity_gives_zero_delay(self):
        exams = hand_instance()
        sched = DailySchedule({0: 10, 1: 10, 2: 10})
        for policy, seed in (("fifo", None), ("two_class_priority", None), ("random", 3)):
            res = run_priority_sim(exams, sched, policy, seed)
            assert all(res.delay(e) == 0 for e in exams)

    def test_single_class_degenerates_to_fifo(self):
        exams = [Exam(e.id, e.site, e.acquisition_day, e.historical_report_day, e.noisy_label, 1)
                 for e in hand_instance()]
        sched = derive_daily_capacity(exams)
        assert run_priority_sim(exams, sched).report_day == run_priority_sim(exams, sched, "fifo").report_day

    def test_arrival_after_horizon(self):
        exams = [Exam("a", "S", 4, 4, 0, 0)]
        with pytest.raises(DataError, match="horizon"):
            run_priority_sim(exams, DailySchedule({0: 1, 1: 1}))

    def test_needs_predicted_class(self):
        exams = [Exam("a", "S", 0, 0, 0)]
        with pytest.raises(DataError, match="predicted_class"):
            run_priority_sim(exams, derive_daily_capacity(exams))
        assert run_priority_sim(exams, derive_daily_capacity(exams), "fifo").report_day == {"a": 0}

    def test_unknown_policy(self):
        with pytest.raises(ValidationError):
            run_priority_sim(hand_instance(), DailySchedule({0: 6}), "lifo")

    def test_forfeit_and_residual_drain(self):
        exams = [Exam(f"x{k}", "S", 0, 0, 0, 0) for k in range(3)] + [Exam("y", "S", 3, 3, 0, 0)]
        sched = DailySchedule({0: 1, 1: 0, 2: 5, 3: 0})
        res = run_priority_sim(exams, sched, "fifo")
        # Day 2 drains two and forfeits three; "y" waits for the residual phase.
        assert res.report_day == {"x0": 0, "x1": 2, "x2": 2, "y": 4}
        assert res.residual_drained

    def test_residual_rate_is_ceil_mean(self):
        exams = [Exam(f"x{k}", "S", 0, 0, 0, 0) for k in range(6)]
        sched = DailySchedule({0: 1, 1: 2})  # mean 1.5 -> drains 2 per day
        res = run_priority_sim(exams, sched, "fifo")
        assert sorted(res.report_day.values()) == [0, 1, 1, 2, 2, 3]

    def test_drain_before_enqueue(self):
        exams = hand_instance()
        res = run_priority_sim(exams, derive_daily_capacity(exams), "fifo", drain_before_enqueue=True)
        assert all(res.delay(e) >= 1 for e in exams)
        assert res.residual_drained

    def test_random_policy_deterministic(self):
        exams = hand_instance()
        sched = derive_daily_capacity(exams)
        a = run_priority_sim(exams, sched, "random", seed=11)
        b = run_priority_sim(exams, sched, "random", seed=11)
        assert a.report_day == b.report_day
        with pytest.raises(ValidationError):
            run_priority_sim(exams, sched, "random")

    @settings(max_examples=150, deadline=None)
    @given(feasible_cohorts(), st.integers(0, 2**32 - 1))
    def test_slot_conservation(self, exams, seed):
        sched = derive_daily_capacity(exams)
        results = [run_priority_sim(exams, sched, p, seed if p == "random" else None)
                   for p in ("fifo", "two_class_priority", "random")]
        multisets = [Counter(r.report_day.values()) for r in results]
        assert multisets[0] == multisets[1] == multisets[2] == Counter(sched.capacity)
        assert len({r.total_delay() for r in results}) == 1
        assert not any(r.residual_drained for r in results)

    @settings(max_examples=150, deadline=None)
    @given(feasible_cohorts(), st.integers(0, 2**32 - 1), st.sampled_from(["fifo", "two_class_priority", "random"]))
    def test_never_before_acquisition(self, exams, seed, policy):
        rng = np.random.default_rng(seed)
        sched = DailySchedule({d: int(rng.integers(0, 4)) for d in range(21)})
        res = run_priority_sim(exams, sched, policy, seed)
        assert set(res.report_day) == {e.id for e in exams}
        assert all(res.report_day[e.id] >= e.acquisition_day for e in exams)

    @settings(max_examples=100, deadline=None)
    @given(feasible_cohorts())
    def test_fifo_within_class(self, exams):
        res = run_priority_sim(exams, derive_daily_capacity(exams))
        for cls in (0, 1):
            members = sorted((e for e in exams if e.predicted_class == cls),
                             key=lambda e: (e.acquisition_day, e.id))
            days = [res.report_day[e.id] for e in members]
            assert days == sorted(days)

    @settings(max_examples=150, deadline=None)
    @given(feasible_cohorts())
    def test_perfect_classifier_never_delays_abnormal(self, exams):
        exams = [Exam(e.id, e.site, e.acquisition_day, e.historical_report_day, e.noisy_label,
                      predicted_class=e.true_label, true_label=e.true_label) for e in exams]
        sched = derive_daily_capacity(exams)
        prio = run_priority_sim(exams, sched)
        fifo = run_priority_sim(exams, sched, "fifo")
        for e in exams:
            if e.true_label == 1:
                assert prio.report_day[e.id] <= fifo.report_day[e.id]


class TestStatistics:
    def test_single_exam(self):
        stats = historical_delays([Exam("a", "S", 0, 9, 1)])
        assert (stats[1].mean, stats[1].sd, stats[1].n) == (9.0, 0.0, 1)
        assert stats[0].n == 0 and math.isnan(stats[0].mean)

    def test_population_sd(self):
        s = delay_stats([8, 12])
        assert (s.mean, s.sd) == (10.0, 2.0)

    def test_hand_instance_tables(self):
        exams = hand_instance()
        hist = historical_delays(exams)
        assert (hist[0].mean, hist[0].sd) == (1.0, 1.0)
        assert (hist[1].mean, hist[1].sd) == (0.5, 0.5)
        prio = simulated_delays(run_priority_sim(exams, derive_daily_capacity(exams)))
        assert (prio[0].mean, prio[0].sd) == (2.0, 0.0)
        assert (prio[1].mean, prio[1].sd) == (0.0, 0.0)


class TestPermutationNull:
    def test_length_and_determinism(self):
        exams = hand_instance()
        sched = derive_daily_capacity(exams)
        a = permutation_null(exams, sched, repeats=25, seed=4)
        b = permutation_null(exams, sched, repeats=25, seed=4)
        assert len(a) == 25 and a.runs.tobytes() == b.runs.tobytes()

    def test_jobs_do_not_change_output(self):
        exams = hand_instance()
        sched = derive_daily_capacity(exams)
        a = permutation_null(exams, sched, repeats=12, seed=9, jobs=1)
        b = permutation_null(exams, sched, repeats=12, seed=9, jobs=2)
        assert a.runs.tobytes() == b.runs.tobytes()

    def test_single_class_equals_fifo(self):
        exams = [Exam(e.id, e.site, e.acquisition_day, e.historical_report_day, 1, e.predicted_class)
                 for e in hand_instance()]
        sched = derive_daily_capacity(exams)
        null = permutation_null(exams, sched, repeats=1, seed=0)
        fifo = run_priority_sim(exams, sched, "fifo")
        assert null.column("abnormal")[0] == np.mean(fifo.delays_by_class()[1])
        assert math.isnan(null.column("normal")[0])

    def test_runs_within_enumerated_support(self):
        exams = hand_instance()
        sched = derive_daily_capacity(exams)
        support = set()
        for bits in itertools.product((0, 1), repeat=len(exams)):
            relabeled = [Exam(e.id, e.site, e.acquisition_day, e.historical_report_day, e.noisy_label, b)
                         for e, b in zip(exams, bits)]
            res = run_priority_sim(relabeled, sched)
            support.add(float(np.mean(res.delays_by_class()[1])))
        null = permutation_null(exams, sched, repeats=200, seed=1)
        assert set(null.column("abnormal").tolist()) <= support

    def test_rejects_zero_repeats(self):
        with pytest.raises(ValidationError):
            permutation_null(hand_instance(), DailySchedule({0: 6}), repeats=0)

    def test_prevalence_weight(self):
        assert prevalence_weight(hand_instance()) == 0.5


class TestPValue:
    def null(self, values):
        v = np.asarray(values, dtype=float)
        return NullDistribution(np.c_[v, v], seed=0)

    def test_below_all(self):
        null = self.null(np.linspace(5, 10, 1000))
        assert p_value(1.0, null, "lower") == 1 / 1001
        assert p_value(1.0, null, "lower") < 0.001

    def test_equal_to_all(self):
        assert p_value(3.0, self.null([3.0] * 50), "lower") == 1.0
        assert p_value(3.0, self.null([3.0] * 50), "upper", "normal") == 1.0

    def test_above_all_lower_tail(self):
        assert p_value(99.0, self.null(range(10)), "lower") == 1.0

    def test_bad_tail(self):
        with pytest.raises(ValidationError):
            p_value(1.0, self.null([1.0]), "both")


class TestComparePolicies:
    def test_hand_instance(self):
        exams = hand_instance()
        cmp = compare_policies(exams, repeats=50, seed=0)
        d = cmp.to_dict()
        assert d["historical"]["normal"] == {"mean": 1.0, "sd": 1.0, "n": 2}
        assert d["historical"]["abnormal"] == {"mean": 0.5, "sd": 0.5, "n": 4}
        assert d["prioritized"]["normal"] == {"mean": 2.0, "sd": 0.0, "n": 2}
        assert d["prioritized"]["abnormal"] == {"mean": 0.0, "sd": 0.0, "n": 4}
        assert d["repeats"] == 50
        assert 0 < d["p_values"]["abnormal_lower"] <= 1
        assert "Historical" in cmp.format_table()

    def test_single_class_prioritized_equals_fifo(self):
        exams = [Exam(e.id, e.site, e.acquisition_day, e.historical_report_day, e.noisy_label, 0)
                 for e in hand_instance()]
        sched = derive_daily_capacity(exams)
        a = compare_policies(exams, sched, repeats=5).prioritized
        b = compare_policies(exams, sched, policy="fifo", repeats=5).prioritized
        assert a == b


def test_cohort_csv_round_trip(tmp_path):
    exams = hand_instance() + [Exam("G", "Y", 1, None, 0, None, None, 44.5)]
    path = tmp_path / "cohort.csv"
    write_cohort_csv(path, exams)
    assert read_cohort_csv(path) == exams
    assert path.read_text().splitlines()[0] == (
        "id,site,acquisition_day,historical_report_day,true_label,noisy_label,predicted_class,age")


def test_cohort_csv_missing_column(tmp_path):
    path = tmp_path / "cohort.csv"
    path.write_text("id,site,acquisition_day,noisy_label\na,S,0,1\n")
    with pytest.raises(DataError, match="historical_report_day"):
        read_cohort_csv(path)
