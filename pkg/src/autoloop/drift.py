"""Sliding-window drift detection and the pause gates."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from statistics import fmean
from typing import TYPE_CHECKING, Callable, Sequence

from .model import (
    ChangeKind,
    Decision,
    FailureClass,
    FileChange,
    Gate,
    GateDecision,
    MetricSnapshot,
    OracleOutcome,
)

if TYPE_CHECKING:
    from .orchestrator import LoopConfig, LoopState

RECENT_WINDOW = 5
BASELINE_WINDOW = 20
FACTUAL_PRIOR_WINDOW = 10
FACTUAL_DROP = 0.05
RATE_TOLERANCE = 0.01
SPIKE_FACTOR = 2.0
_EPS = 1e-9


class InsufficientHistory(ValueError):
    pass


class RerunUnavailable(Exception):
    pass


class Trend(str, Enum):
    IMPROVING = "improving"
    STABLE = "stable"
    DECLINING = "declining"


@dataclass(frozen=True)
class _Metric:
    name: str
    extract: Callable[[MetricSnapshot], float | None]
    tolerance: float
    higher_is_better: bool


TRACKED_METRICS: tuple[_Metric, ...] = (
    _Metric("test_count", lambda s: float(s.test_count), 0.0, True),
    _Metric("l1_pass_rate", lambda s: s.layer_pass_rates.get("l1"), RATE_TOLERANCE, True),
    _Metric("l2_pass_rate", lambda s: s.layer_pass_rates.get("l2"), RATE_TOLERANCE, True),
    _Metric("l3_pass_rate", lambda s: s.layer_pass_rates.get("l3"), RATE_TOLERANCE, True),
    _Metric("unverifiable_rate", lambda s: s.unverifiable_rate, RATE_TOLERANCE, False),
    _Metric("oracle_pass_rate", lambda s: s.oracle_pass_rate, RATE_TOLERANCE, True),
    _Metric("bug_discovery_count", lambda s: float(s.bug_discovery_count), 0.0, False),
    _Metric("blocked_combo_count", lambda s: float(s.blocked_combo_count), 0.0, False),
)


@dataclass(frozen=True)
class DriftReport:
    iteration: int
    trends: dict[str, Trend] = field(default_factory=dict)
    decline_streaks: dict[str, int] = field(default_factory=dict)
    window_means: dict[str, tuple[float, float]] = field(default_factory=dict)
    alerts: tuple[str, ...] = ()


def _windows(values: Sequence[float]) -> tuple[list[float], list[float]]:
    n = len(values)
    k = min(RECENT_WINDOW, n - 1)
    recent = list(values[n - k :])
    baseline = list(values[max(0, n - k - BASELINE_WINDOW) : n - k])
    return recent, baseline


def _trend(metric: _Metric, snaps: Sequence[MetricSnapshot]) -> tuple[Trend, float, float] | None:
    values = [metric.extract(s) for s in snaps]
    if len(values) < 2 or any(v is None for v in values):
        return None
    recent, baseline = _windows(values)  # type: ignore[arg-type]
    r, b = fmean(recent), fmean(baseline)
    delta = (r - b) if metric.higher_is_better else (b - r)
    if delta < -metric.tolerance - _EPS:
        trend = Trend.DECLINING
        if metric.name == "blocked_combo_count" and snaps[-1].blocked_without_fix_count == 0:
            # growth is only a warning sign when some new entry lacks a fix ticket
            trend = Trend.STABLE
    elif delta > metric.tolerance + _EPS:
        trend = Trend.IMPROVING
    else:
        trend = Trend.STABLE
    return trend, r, b


def genuine(history: Sequence[MetricSnapshot]) -> list[MetricSnapshot]:
    return [s for s in history if not s.backfilled]


def detect_drift(history: Sequence[MetricSnapshot]) -> DriftReport:
    snaps = genuine(history)
    if len(snaps) < 2:
        raise InsufficientHistory(f"need at least 2 genuine snapshots, have {len(snaps)}")
    trends: dict[str, Trend] = {}
    streaks: dict[str, int] = {}
    means: dict[str, tuple[float, float]] = {}
    for metric in TRACKED_METRICS:
        res = _trend(metric, snaps)
        if res is None:
            continue
        trends[metric.name], r, b = res
        means[metric.name] = (r, b)
        streak = 0
        for end in range(len(snaps), 1, -1):
            prefix = _trend(metric, snaps[:end])
            if prefix is None or prefix[0] is not Trend.DECLINING:
                break
            streak += 1
        streaks[metric.name] = streak

    alerts: list[str] = []
    l2 = [s.layer_pass_rates.get("l2") for s in snaps]
    if len(l2) > RECENT_WINDOW and all(v is not None for v in l2):
        recent = l2[-RECENT_WINDOW:]
        prior = l2[-RECENT_WINDOW - FACTUAL_PRIOR_WINDOW : -RECENT_WINDOW]
        drop = fmean(prior) - fmean(recent)  # type: ignore[arg-type]
        if drop >= FACTUAL_DROP - _EPS:
            alerts.append(f"factual pass rate dropped {drop * 100:.1f}pp below the prior {len(prior)}-iteration mean")
    if "bug_discovery_count" in means:
        r, b = means["bug_discovery_count"]
        if b >= 1 and r > SPIKE_FACTOR * b:
            alerts.append(f"bug discovery spike: recent mean {r:.2f} vs baseline {b:.2f}")
    return DriftReport(snaps[-1].iteration, trends, streaks, means, tuple(alerts))


# --- gates --------------------------------------------------------------


@dataclass(frozen=True)
class GateEvaluation:
    decisions: tuple[GateDecision, ...]
    regression_streak: int

    def has(self, value: Decision) -> bool:
        return any(d.value is value for d in self.decisions)


def evaluate_gates(
    state: LoopState,
    snapshot: MetricSnapshot,
    report: DriftReport | None,
    config: LoopConfig,
    *,
    classification: FailureClass | None = None,
) -> GateEvaluation:
    """Evaluate the five gates in fixed precedence order."""
    decisions: list[GateDecision] = []

    streak = state.regression_failure_streak
    outcome = snapshot.oracle_outcome
    if outcome is not None:
        if not outcome.failed:
            streak = 0
        elif classification is FailureClass.REGRESSION:
            streak += 1
    if streak >= config.regression_pause_threshold:
        decisions.append(
            GateDecision(
                Decision.PAUSE,
                Gate.REGRESSION_FAILURE,
                f"{streak} consecutive regression-classified oracle failures",
            )
        )

    t1 = snapshot.canary_escapes.get("t1", 0)
    if t1 > 0:
        decisions.append(
            GateDecision(Decision.WARN, Gate.CANARY_ESCAPE, f"{t1} tier-1 canary escape(s)", severity="critical")
        )

    if report is not None:
        declining = sorted(m for m, s in report.decline_streaks.items() if s >= config.drift_decline_streak)
        if declining or report.alerts:
            evidence = "; ".join(
                [f"{m} declining for {report.decline_streaks[m]} iterations" for m in declining] + list(report.alerts)
            )
            decisions.append(GateDecision(Decision.WARN, Gate.DRIFT_THRESHOLD, evidence))

    open_prs = snapshot.open_pr_count
    if not state.in_drain and open_prs > config.drain_enter_threshold:
        decisions.append(
            GateDecision(Decision.DRAIN, Gate.BACKPRESSURE, f"{open_prs} open PRs > {config.drain_enter_threshold}")
        )
    elif state.in_drain and open_prs < config.drain_exit_threshold:
        decisions.append(
            GateDecision(
                Decision.CONTINUE, Gate.BACKPRESSURE, f"exit drain: {open_prs} open PRs < {config.drain_exit_threshold}"
            )
        )

    if state.starvation_counter >= config.starvation_threshold:
        decisions.append(
            GateDecision(
                Decision.MONITOR_ONLY,
                Gate.STARVATION,
                f"execute produced nothing for {state.starvation_counter} consecutive iterations",
            )
        )
    return GateEvaluation(tuple(decisions), streak)


def classify_oracle_failure(failure: OracleOutcome, rerun: OracleOutcome | None) -> FailureClass:
    """A failure that reproduces on the last known-good revision is environmental."""
    if not failure.failed:
        raise ValueError("only failing outcomes are classified")
    if rerun is None:
        return FailureClass.DEFERRED
    return FailureClass.ENVIRONMENTAL if rerun.failed else FailureClass.REGRESSION


# --- cross-PR structural patterns ---------------------------------------


@dataclass(frozen=True)
class MergeEntry:
    pr_id: str
    changed_files: tuple[FileChange, ...] = ()
    revert: bool = False
    iteration: int = 0


class FindingKind(str, Enum):
    ADDED_THEN_DELETED = "added_then_deleted"
    REVERT_DETECTED = "revert_detected"
    HIGH_CHURN = "high_churn"


@dataclass(frozen=True, order=True)
class StructuralFinding:
    kind: FindingKind
    path: str
    prs: tuple[str, ...]


HIGH_CHURN_MIN = 3


def cross_pr_detector(merges: Sequence[MergeEntry]) -> list[StructuralFinding]:
    findings: list[StructuralFinding] = []
    adders: dict[str, list[str]] = {}
    modifiers: dict[str, list[str]] = {}
    for m in merges:
        if m.revert:
            findings.append(StructuralFinding(FindingKind.REVERT_DETECTED, "", (m.pr_id,)))
        # deletions pair only with adds from strictly earlier merges
        for fc in m.changed_files:
            if fc.kind is ChangeKind.DELETED:
                for adder in adders.get(fc.path, []):
                    if adder != m.pr_id:
                        findings.append(StructuralFinding(FindingKind.ADDED_THEN_DELETED, fc.path, (adder, m.pr_id)))
        for fc in m.changed_files:
            if fc.kind is ChangeKind.ADDED:
                adders.setdefault(fc.path, []).append(m.pr_id)
            elif fc.kind is ChangeKind.MODIFIED:
                mods = modifiers.setdefault(fc.path, [])
                if m.pr_id not in mods:
                    mods.append(m.pr_id)
    for path, prs in modifiers.items():
        if len(prs) >= HIGH_CHURN_MIN:
            findings.append(StructuralFinding(FindingKind.HIGH_CHURN, path, tuple(prs)))
    return sorted(findings)
