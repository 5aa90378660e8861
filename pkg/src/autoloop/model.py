"""Shared domain types for the improvement loop.

Every value here is immutable; stores hold these values and replace them
wholesale on mutation. Serialization goes through :mod:`autoloop.serde`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path


class Priority(str, Enum):
    P0 = "p0"
    P1 = "p1"
    P2 = "p2"
    P3 = "p3"


class CellStatus(str, Enum):
    UNTESTED = "untested"
    PASSING = "passing"
    FAILING = "failing"
    BLOCKED = "blocked"


class Tier(str, Enum):
    FOUNDATION = "foundation"
    COMPOSITION = "composition"
    FRONTIER = "frontier"


class Deliverable(str, Enum):
    WORKING_SCENARIO = "working_scenario"
    GAP_ANALYSIS = "gap_analysis"


class Label(str, Enum):
    BUG = "bug"
    FEATURE = "feature"
    IMPROVEMENT = "improvement"
    EXPLORATION = "exploration"


class TicketPriority(str, Enum):
    CRITICAL = "critical"
    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"


class TicketState(str, Enum):
    BACKLOG = "backlog"
    TODO = "todo"
    IN_PROGRESS = "in_progress"
    IN_REVIEW = "in_review"
    DONE = "done"


class Source(str, Enum):
    HUMAN = "human"
    LOOP = "loop"


class PRState(str, Enum):
    OPEN = "open"
    NEEDS_ATTENTION = "needs_attention"
    MERGED = "merged"
    RETIRED = "retired"


class ChangeKind(str, Enum):
    ADDED = "added"
    MODIFIED = "modified"
    DELETED = "deleted"


class Phase(str, Enum):
    BACKLOG = "backlog"
    IDEATE = "ideate"
    TRIAGE = "triage"
    EXECUTE = "execute"
    POLISH = "polish"
    REGRESS = "regress"


class Mode(str, Enum):
    STRATEGY = "strategy"
    USER_ONLY = "user_only"
    DEV_ONLY = "dev_only"
    DRAIN = "drain"
    REGRESS_QUICK = "regress_quick"
    UI = "ui"


class PhaseOutcome(str, Enum):
    COMPLETED = "completed"
    TIMED_OUT = "timed_out"
    SKIPPED = "skipped"
    FAILED = "failed"


class OracleValue(str, Enum):
    PASS = "pass"
    PASS_HOLD = "pass_hold"
    PASS_CAVEAT = "pass_caveat"
    FAIL = "fail"


class FailureClass(str, Enum):
    ENVIRONMENTAL = "environmental"
    REGRESSION = "regression"
    DEFERRED = "deferred"


class Decision(str, Enum):
    CONTINUE = "continue"
    WARN = "warn"
    DRAIN = "drain"
    MONITOR_ONLY = "monitor_only"
    PAUSE = "pause"


class Gate(str, Enum):
    REGRESSION_FAILURE = "regression_failure"
    CANARY_ESCAPE = "canary_escape"
    DRIFT_THRESHOLD = "drift_threshold"
    BACKPRESSURE = "backpressure"
    STARVATION = "starvation"


PRIORITY_RANK = {TicketPriority.CRITICAL: 0, TicketPriority.HIGH: 1, TicketPriority.MEDIUM: 2, TicketPriority.LOW: 3}
OPEN_PR_STATES = frozenset({PRState.OPEN, PRState.NEEDS_ATTENTION})


@dataclass(frozen=True, order=True)
class FeatureCombo:
    feature: str
    platform: str
    action: str

    def __str__(self) -> str:
        return f"{self.feature}/{self.platform}/{self.action}"


@dataclass(frozen=True)
class CoverageCell:
    combo: FeatureCombo
    priority: Priority
    status: CellStatus = CellStatus.UNTESTED
    last_exercised: int | None = None
    supported: bool = True


@dataclass(frozen=True)
class SpecSurface:
    features: tuple[str, ...] = ()
    platforms: tuple[str, ...] = ()
    actions: tuple[str, ...] = ()
    cells: dict[FeatureCombo, CoverageCell] = field(default_factory=dict)

    def cell(self, combo: FeatureCombo) -> CoverageCell | None:
        return self.cells.get(combo)

    def with_cells(self, *updated: CoverageCell) -> SpecSurface:
        cells = dict(self.cells)
        for c in updated:
            cells[c.combo] = c
        return replace(self, cells=cells)

    def supported_cells(self) -> list[CoverageCell]:
        return sorted((c for c in self.cells.values() if c.supported), key=lambda c: c.combo)


@dataclass(frozen=True)
class Scenario:
    id: str
    tier: Tier
    combos: tuple[FeatureCombo, ...]
    deliverable: Deliverable
    description: str = ""
    # Frontier only: the capability that is missing from the surface.
    gap_target: str | None = None

    def __post_init__(self) -> None:
        if self.tier is Tier.FOUNDATION and (len(self.combos) != 1 or self.deliverable is not Deliverable.WORKING_SCENARIO):
            raise ValueError("foundation scenarios exercise exactly one combo")
        if self.tier is Tier.COMPOSITION and (len(self.combos) < 2 or self.deliverable is not Deliverable.WORKING_SCENARIO):
            raise ValueError("composition scenarios need at least two combos")
        if self.tier is Tier.FRONTIER and self.deliverable is not Deliverable.GAP_ANALYSIS:
            raise ValueError("frontier scenarios deliver a gap analysis")


@dataclass(frozen=True)
class Ticket:
    id: str
    title: str
    body: str
    label: Label
    priority: TicketPriority
    state: TicketState = TicketState.BACKLOG
    blocks: frozenset[str] = frozenset()
    blocked_by: frozenset[str] = frozenset()
    source: Source = Source.LOOP
    dedup_key: str = ""
    linked_prs: frozenset[str] = frozenset()
    confirmations: int = 1
    created_at_iteration: int = 0
    combo: FeatureCombo | None = None


@dataclass(frozen=True)
class FileChange:
    path: str
    kind: ChangeKind


@dataclass(frozen=True)
class PullRequest:
    id: str
    ticket_id: str | None
    head_revision: str
    state: PRState = PRState.OPEN
    attempt_count: int = 0
    last_rejected_revision: str | None = None
    needs_attention_since: int | None = None
    changed_files: tuple[FileChange, ...] = ()
    includes_tests: bool = True
    expected_deletions: frozenset[str] = frozenset()
    labels: frozenset[str] = frozenset()
    created_at_iteration: int = 0

    @property
    def terminal(self) -> bool:
        return self.state in (PRState.MERGED, PRState.RETIRED)


@dataclass(frozen=True)
class OracleOutcome:
    value: OracleValue
    detail: str = ""

    def __post_init__(self) -> None:
        if self.value is OracleValue.FAIL and not self.detail:
            raise ValueError("a failing oracle outcome needs a detail")

    @property
    def failed(self) -> bool:
        return self.value is OracleValue.FAIL


@dataclass(frozen=True)
class GateDecision:
    value: Decision
    gate: Gate
    evidence: str = ""
    severity: str = "normal"


@dataclass(frozen=True)
class MetricSnapshot:
    iteration: int
    test_count: int = 0
    layer_pass_rates: dict[str, float] = field(default_factory=dict)
    unverifiable_rate: float = 0.0
    oracle_outcome: OracleOutcome | None = None
    oracle_pass_rate: float | None = None
    bug_discovery_count: int = 0
    blocked_combo_count: int = 0
    blocked_without_fix_count: int = 0
    canary_escapes: dict[str, int] = field(default_factory=dict)
    open_pr_count: int = 0
    execute_output_count: int = 0
    backfilled: bool = False


@dataclass(frozen=True)
class IterationRecord:
    index: int
    mode: Mode
    phase_outcomes: dict[Phase, PhaseOutcome] = field(default_factory=dict)
    metrics: MetricSnapshot | None = None
    prs_created: int = 0
    prs_merged: int = 0
    tickets_created: int = 0
    oracle_outcome: OracleOutcome | None = None
    failure_class: FailureClass | None = None
    decisions: tuple[GateDecision, ...] = ()
    notes: str = ""

    @property
    def backfilled(self) -> bool:
        return self.metrics is not None and self.metrics.backfilled


# --- surface operations -------------------------------------------------


def validate_surface(surface: SpecSurface) -> list[str]:
    """Return every invariant violation; an empty list means the surface is valid."""
    violations: list[str] = []
    dims = {"features": surface.features, "platforms": surface.platforms, "actions": surface.actions}
    for name, values in dims.items():
        seen: set[str] = set()
        for v in values:
            if not v:
                violations.append(f"{name}: empty identifier")
            elif v in seen:
                violations.append(f"{name}: duplicate entry {v!r}")
            seen.add(v)
    feats, plats, acts = set(surface.features), set(surface.platforms), set(surface.actions)
    for key, cell in surface.cells.items():
        if key != cell.combo:
            violations.append(f"cell {key}: stored under a different combo {cell.combo}")
        c = cell.combo
        missing = [
            f"{dim} {val!r}"
            for dim, val, pool in (("feature", c.feature, feats), ("platform", c.platform, plats), ("action", c.action, acts))
            if val not in pool
        ]
        if missing:
            violations.append(f"cell {c}: {', '.join(missing)} not in surface dimensions")
    return violations


def combo_universe(surface: SpecSurface) -> int:
    return len(surface.features) * len(surface.platforms) * len(surface.actions)


def build_surface(
    features: list[str],
    platforms: list[str],
    actions: list[str],
    priority: Priority = Priority.P1,
) -> SpecSurface:
    """Fully populated surface with every cell supported at ``priority``."""
    cells = {}
    for f in features:
        for p in platforms:
            for a in actions:
                combo = FeatureCombo(f, p, a)
                cells[combo] = CoverageCell(combo, priority)
    return SpecSurface(tuple(features), tuple(platforms), tuple(actions), cells)


_UNSUPPORTED_MARKS = {"", "-", "\u2013", "\u2014", "n/a"}


def parse_surface_table(text: str) -> SpecSurface:
    """Parse a coverage table: ``feature, platform, <action>...`` with P0-P3 or '-' cells.

    Accepts CSV or a markdown pipe table.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines and lines[0].lstrip().startswith("|"):
        rows = []
        for ln in lines:
            cells = [c.strip() for c in ln.strip().strip("|").split("|")]
            if all(re.fullmatch(r":?-{2,}:?", c) for c in cells if c):
                continue
            rows.append(cells)
    else:
        rows = [[c.strip() for c in r] for r in csv.reader(io.StringIO("\n".join(lines)))]
    if not rows or len(rows[0]) < 3:
        raise ValueError("coverage table needs a header: feature, platform, action...")
    actions = rows[0][2:]
    features: list[str] = []
    platforms: list[str] = []
    cells: dict[FeatureCombo, CoverageCell] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(rows[0]):
            raise ValueError(f"row {lineno}: expected {len(rows[0])} columns, got {len(row)}")
        feat, plat = row[0], row[1]
        if feat not in features:
            features.append(feat)
        if plat not in platforms:
            platforms.append(plat)
        for action, mark in zip(actions, row[2:]):
            combo = FeatureCombo(feat, plat, action)
            if mark.lower() in _UNSUPPORTED_MARKS:
                cells[combo] = CoverageCell(combo, Priority.P3, supported=False)
            else:
                try:
                    prio = Priority(mark.lower())
                except ValueError:
                    raise ValueError(f"row {lineno}: bad priority {mark!r}") from None
                cells[combo] = CoverageCell(combo, prio)
    return SpecSurface(tuple(features), tuple(platforms), tuple(actions), cells)


def load_surface_table(path: str | Path) -> SpecSurface:
    return parse_surface_table(Path(path).read_text(encoding="utf-8"))


# --- ticket keys --------------------------------------------------------

_PUNCT = re.compile(r"[^\w\s]", re.UNICODE)
_WS = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    return _WS.sub(" ", _PUNCT.sub("", text.lower())).strip()


def dedup_key(title: str, body: str) -> str:
    digest = hashlib.sha256(normalize_text(body)[:200].encode("utf-8")).hexdigest()[:16]
    return f"{normalize_text(title)}#{digest}"
