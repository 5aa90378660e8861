from __future__ import annotations

import random
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from autoloop.drift import (
    FindingKind,
    InsufficientHistory,
    MergeEntry,
    Trend,
    classify_oracle_failure,
    cross_pr_detector,
    detect_drift,
    evaluate_gates,
)
from autoloop.model import ChangeKind, Decision, FailureClass, FileChange, Gate, MetricSnapshot, OracleOutcome, OracleValue
from autoloop.orchestrator import LoopConfig, LoopState

FAIL = OracleOutcome(OracleValue.FAIL, "broken")
PASS = OracleOutcome(OracleValue.PASS)


def snaps(values, **fixed):
    return [MetricSnapshot(i + 1, test_count=v, **fixed) for i, v in enumerate(values)]


def test_needs_two_genuine_snapshots():
    with pytest.raises(InsufficientHistory):
        detect_drift(snaps([1]))
    with pytest.raises(InsufficientHistory):
        detect_drift(snaps([1]) + [MetricSnapshot(2, backfilled=True)])


def test_small_history_uses_last_n_minus_1_as_recent():
    # n = 3: recent = last two values, baseline = the first one
    r = detect_drift(snaps([10, 4, 4]))
    assert r.window_means["test_count"] == (4.0, 10.0)
    assert r.trends["test_count"] is Trend.DECLINING


def test_full_windows_are_five_and_twenty():
    values = list(range(100, 130))
    r = detect_drift(snaps(values))
    recent, base = r.window_means["test_count"]
    assert recent == sum(values[-5:]) / 5
    assert base == sum(values[-25:-5]) / 20
    assert r.trends["test_count"] is Trend.IMPROVING


def test_decline_streak_counts_consecutive_declining_prefixes():
    r = detect_drift(snaps([10, 10, 10, 9, 8, 7]))
    assert r.trends["test_count"] is Trend.DECLINING
    assert r.decline_streaks["test_count"] == 3


def test_rate_tolerance_keeps_small_wobble_stable():
    hist = [MetricSnapshot(i, layer_pass_rates={"l1": 0.9 + (0.005 if i % 2 else 0)}) for i in range(1, 12)]
    assert detect_drift(hist).trends["l1_pass_rate"] is Trend.STABLE


def test_factual_drop_alert_at_five_points():
    hist = [MetricSnapshot(i, layer_pass_rates={"l2": 0.95}) for i in range(1, 11)]
    hist += [MetricSnapshot(i, layer_pass_rates={"l2": 0.90}) for i in range(11, 16)]
    assert any("factual" in a for a in detect_drift(hist).alerts)
    hist[-1] = MetricSnapshot(15, layer_pass_rates={"l2": 0.95})
    assert not any("factual" in a for a in detect_drift(hist).alerts)


def test_bug_discovery_spike_alert():
    hist = [MetricSnapshot(i, bug_discovery_count=1) for i in range(1, 21)]
    hist += [MetricSnapshot(i, bug_discovery_count=5) for i in range(21, 26)]
    assert any("spike" in a for a in detect_drift(hist).alerts)


def test_blocked_growth_only_declines_when_something_lacks_a_fix():
    grow = [MetricSnapshot(i, blocked_combo_count=i) for i in range(1, 8)]
    assert detect_drift(grow).trends["blocked_combo_count"] is Trend.STABLE
    grow[-1] = replace(grow[-1], blocked_without_fix_count=1)
    assert detect_drift(grow).trends["blocked_combo_count"] is Trend.DECLINING


@settings(max_examples=60)
@given(st.lists(st.integers(0, 50), min_size=2, max_size=40), st.sets(st.integers(0, 60), max_size=10))
def test_backfilled_rows_never_change_the_report(values, gaps):
    genuine = snaps(values)
    mixed = list(genuine)
    for g in sorted(gaps):
        mixed.insert(min(g, len(mixed)), MetricSnapshot(1000 + g, backfilled=True))
    assert detect_drift(mixed) == detect_drift(genuine)


# --- gates --------------------------------------------------------------


def gate(state=None, snap=None, report=None, cls=None, **cfg):
    return evaluate_gates(state or LoopState(), snap or MetricSnapshot(1), report, LoopConfig(**cfg), classification=cls)


def test_regression_streak_counts_only_regressions():
    st_ = LoopState(regression_failure_streak=2)
    ev = gate(st_, MetricSnapshot(1, oracle_outcome=FAIL), cls=FailureClass.REGRESSION)
    assert ev.regression_streak == 3 and ev.has(Decision.PAUSE)
    ev = gate(st_, MetricSnapshot(1, oracle_outcome=FAIL), cls=FailureClass.ENVIRONMENTAL)
    assert ev.regression_streak == 2 and not ev.has(Decision.PAUSE)
    ev = gate(st_, MetricSnapshot(1, oracle_outcome=PASS))
    assert ev.regression_streak == 0
    ev = gate(st_, MetricSnapshot(1))
    assert ev.regression_streak == 2


def test_only_t1_escapes_are_critical():
    ev = gate(snap=MetricSnapshot(1, canary_escapes={"t1": 1, "t2": 3}))
    crit = [d for d in ev.decisions if d.severity == "critical"]
    assert len(crit) == 1 and crit[0].gate is Gate.CANARY_ESCAPE
    assert not gate(snap=MetricSnapshot(1, canary_escapes={"t2": 3, "t4": 1})).decisions


def test_backpressure_thresholds_are_strict():
    assert not gate(snap=MetricSnapshot(1, open_pr_count=10)).has(Decision.DRAIN)
    assert gate(snap=MetricSnapshot(1, open_pr_count=11)).has(Decision.DRAIN)
    draining = LoopState(in_drain=True, saved_phase_config=())
    assert not gate(draining, MetricSnapshot(1, open_pr_count=5)).decisions
    assert gate(draining, MetricSnapshot(1, open_pr_count=4)).has(Decision.CONTINUE)


def test_starvation_and_precedence_order():
    st_ = LoopState(regression_failure_streak=2, starvation_counter=10)
    snap = MetricSnapshot(1, oracle_outcome=FAIL, canary_escapes={"t1": 1}, open_pr_count=11)
    ev = gate(st_, snap, cls=FailureClass.REGRESSION)
    assert [d.gate for d in ev.decisions] == [Gate.REGRESSION_FAILURE, Gate.CANARY_ESCAPE, Gate.BACKPRESSURE, Gate.STARVATION]


def test_drift_warn_from_streak_or_alert():
    r = detect_drift(snaps([10, 10, 10, 9, 8, 7]))
    assert gate(report=r).has(Decision.WARN)
    assert not gate(report=r, drift_decline_streak=4).has(Decision.WARN)


@pytest.mark.parametrize(
    "rerun, expected",
    [(None, FailureClass.DEFERRED), (FAIL, FailureClass.ENVIRONMENTAL), (PASS, FailureClass.REGRESSION)],
)
def test_classification_table(rerun, expected):
    assert classify_oracle_failure(FAIL, rerun) is expected


def test_only_failures_are_classified():
    with pytest.raises(ValueError):
        classify_oracle_failure(PASS, PASS)


# --- cross-PR ------------------------------------------------------------


def fc(path, kind):
    return FileChange(path, kind)


def test_add_then_delete_needs_distinct_earlier_pr():
    merges = [
        MergeEntry("P1", (fc("a.py", ChangeKind.ADDED), fc("a.py", ChangeKind.DELETED))),
        MergeEntry("P2", (fc("b.py", ChangeKind.DELETED),)),
        MergeEntry("P3", (fc("b.py", ChangeKind.ADDED),)),
        MergeEntry("P4", (fc("a.py", ChangeKind.DELETED),)),
    ]
    found = cross_pr_detector(merges)
    assert [(f.kind, f.path, f.prs) for f in found] == [(FindingKind.ADDED_THEN_DELETED, "a.py", ("P1", "P4"))]


def test_churn_threshold_and_revert():
    merges = [MergeEntry(f"P{i}", (fc("hot.py", ChangeKind.MODIFIED),)) for i in range(2)]
    assert cross_pr_detector(merges) == []
    merges.append(MergeEntry("P2", (fc("hot.py", ChangeKind.MODIFIED),), revert=True))
    kinds = sorted(f.kind.value for f in cross_pr_detector(merges))
    assert kinds == ["high_churn", "revert_detected"]


def test_detector_is_deterministic():
    rng = random.Random(3)
    merges = [MergeEntry(f"P{i}", (fc(f"f{rng.randrange(4)}", rng.choice(list(ChangeKind))),)) for i in range(50)]
    assert cross_pr_detector(merges) == cross_pr_detector(list(merges))
