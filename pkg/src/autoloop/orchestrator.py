"""The six-phase iteration engine and crash-safe loop state."""

from __future__ import annotations

import copy
import fcntl
import json
import logging
import os
import random
import subprocess
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

from . import serde
from .drift import (
    DriftReport,
    InsufficientHistory,
    MergeEntry,
    classify_oracle_failure,
    cross_pr_detector,
    detect_drift,
    evaluate_gates,
)
from .model import (
    OPEN_PR_STATES,
    CellStatus,
    Decision,
    FailureClass,
    FeatureCombo,
    FileChange,
    GateDecision,
    IterationRecord,
    Label,
    MetricSnapshot,
    Mode,
    OracleOutcome,
    OracleValue,
    Phase,
    PhaseOutcome,
    PRState,
    PullRequest,
    Scenario,
    Source,
    SpecSurface,
    TicketPriority,
    TicketState,
)
from .polish import (
    ActionKind,
    FailureKind,
    PolishLimits,
    Review,
    ReviewKind,
    polish_pass,
)
from .scheduler import (
    BlockedCombosRegistry,
    ExerciseHistory,
    TierWeights,
    block_combo,
    choose_tier,
    next_scenario_with_fallback,
)
from .tickets import IllegalTransition, TicketDraft, TicketStore
from .verification import OracleMode, OracleReport, aggregate_oracle

log = logging.getLogger(__name__)

STRATEGY_PHASES = (Phase.BACKLOG, Phase.IDEATE, Phase.TRIAGE, Phase.EXECUTE, Phase.POLISH, Phase.REGRESS)
_SEQUENCES = {
    Mode.STRATEGY: STRATEGY_PHASES,
    Mode.USER_ONLY: (Phase.BACKLOG, Phase.IDEATE, Phase.TRIAGE),
    Mode.DEV_ONLY: (Phase.BACKLOG, Phase.EXECUTE, Phase.POLISH, Phase.REGRESS),
    Mode.DRAIN: (Phase.POLISH,),
    Mode.REGRESS_QUICK: STRATEGY_PHASES,
    Mode.UI: STRATEGY_PHASES,
}


def phase_sequence(mode: Mode) -> tuple[Phase, ...]:
    return _SEQUENCES[mode]


def mode_flags(mode: Mode) -> dict[str, bool]:
    return {"quick_oracle": mode is Mode.REGRESS_QUICK, "browser_hint": mode is Mode.UI}


# --- configuration and state ----------------------------------------------


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LoopConfig:
    mode: Mode = Mode.STRATEGY
    phase_budgets: dict[Phase, float] = field(default_factory=lambda: {p: 60.0 for p in Phase})
    drain_enter_threshold: int = 10
    drain_exit_threshold: int = 5
    starvation_threshold: int = 10
    regression_pause_threshold: int = 3
    needs_attention_threshold: int = 1
    drift_decline_streak: int = 3
    polish_pr_limit: int = 3
    drain_pr_limit: int = 6
    tier_weights: TierWeights = TierWeights()
    quality_bar_path: str | None = None
    execute_ticket_limit: int = 3
    ttl: int = 10
    deferred_retry_limit: int = 3
    seed: int = 0
    frontier_candidates: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        counts = {
            "drain_enter_threshold": self.drain_enter_threshold,
            "drain_exit_threshold": self.drain_exit_threshold,
            "starvation_threshold": self.starvation_threshold,
            "regression_pause_threshold": self.regression_pause_threshold,
            "needs_attention_threshold": self.needs_attention_threshold,
            "drift_decline_streak": self.drift_decline_streak,
            "polish_pr_limit": self.polish_pr_limit,
            "drain_pr_limit": self.drain_pr_limit,
            "ttl": self.ttl,
            "deferred_retry_limit": self.deferred_retry_limit,
        }
        low = [k for k, v in counts.items() if v < 1]
        if low:
            raise ConfigError(f"thresholds must be >= 1: {', '.join(low)}")
        if self.execute_ticket_limit < 0:
            raise ConfigError("execute_ticket_limit must be >= 0")
        if self.drain_exit_threshold >= self.drain_enter_threshold:
            raise ConfigError("drain_exit_threshold must be below drain_enter_threshold")
        if any(b <= 0 for b in self.phase_budgets.values()):
            raise ConfigError("phase budgets must be positive")

    def budget(self, phase: Phase) -> float:
        return self.phase_budgets.get(phase, 60.0)

    def polish_limits(self) -> PolishLimits:
        return PolishLimits(self.polish_pr_limit, self.drain_pr_limit, self.needs_attention_threshold, self.ttl)


SECTION_KEYS = frozenset({"sim", "adapters"})


def config_from_doc(doc: dict[str, Any], **overrides: Any) -> LoopConfig:
    """Build a config from a parsed document; ``sim`` and ``adapters`` sections are ignored here."""
    if "loop" in doc:
        doc = doc["loop"]
    else:
        doc = {k: v for k, v in doc.items() if k not in SECTION_KEYS}
    unknown = sorted(set(doc) - set(LoopConfig.__dataclass_fields__))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        cfg = serde.from_doc(LoopConfig, doc)
    except (serde.DecodeError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def read_config_doc(path: str | os.PathLike) -> dict[str, Any]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return doc


def load_config(path: str | os.PathLike | None, **overrides: Any) -> LoopConfig:
    return config_from_doc(read_config_doc(path) if path is not None else {}, **overrides)


@dataclass(frozen=True)
class PendingFailure:
    revision: str
    attempts: int = 0


@dataclass
class LoopState:
    iteration: int = 0
    starvation_counter: int = 0
    drain_entries: int = 0
    no_work_loops: int = 0
    in_drain: bool = False
    saved_phase_config: tuple[Phase, ...] | None = None
    phases: tuple[Phase, ...] | None = None
    regression_failure_streak: int = 0
    history: list[IterationRecord] = field(default_factory=list)
    state_revision: int = 0
    last_good_revision: str | None = None
    pending_classification: PendingFailure | None = None
    last_gate_decisions: tuple[GateDecision, ...] = ()
    halted: Decision | None = None

    def check(self) -> list[str]:
        problems = []
        if self.in_drain != (self.saved_phase_config is not None):
            problems.append("in_drain and saved_phase_config disagree")
        for name in ("iteration", "starvation_counter", "drain_entries", "no_work_loops", "regression_failure_streak"):
            if getattr(self, name) < 0:
                problems.append(f"{name} is negative")
        idx = [r.index for r in self.history]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            problems.append("history indices not strictly increasing")
        return problems


class AlreadyInDrain(Exception):
    pass


class NotInDrain(Exception):
    pass


def effective_sequence(state: LoopState, config: LoopConfig) -> tuple[Phase, ...]:
    if state.in_drain:
        return (Phase.POLISH,)
    return state.phases if state.phases is not None else phase_sequence(config.mode)


def enter_drain(state: LoopState, config: LoopConfig) -> LoopState:
    if state.in_drain:
        raise AlreadyInDrain()
    s = copy.deepcopy(state)
    s.saved_phase_config = effective_sequence(state, config)
    s.in_drain = True
    s.drain_entries += 1
    return s


def exit_drain(state: LoopState, config: LoopConfig) -> LoopState:
    if not state.in_drain:
        raise NotInDrain()
    s = copy.deepcopy(state)
    saved = s.saved_phase_config
    # a saved list equal to the mode default is stored back as "derived from mode"
    s.phases = None if saved == phase_sequence(config.mode) else saved
    s.saved_phase_config = None
    s.in_drain = False
    return s


# --- skills -------------------------------------------------------------


class SkillStatus(str, Enum):
    OK = "ok"
    TIMEOUT = "timeout"
    ERROR = "error"


@dataclass(frozen=True)
class SkillRequest:
    phase: Phase
    payload: dict[str, Any] = field(default_factory=dict)
    workspace: str | None = None
    deadline: float = 60.0


@dataclass(frozen=True)
class SkillResponse:
    status: SkillStatus
    payload: dict[str, Any] | None = None
    error: str = ""

    def __post_init__(self) -> None:
        if self.status is SkillStatus.TIMEOUT and self.payload is not None:
            raise ValueError("a timed-out response carries no payload")


class Skill(Protocol):
    def __call__(self, request: SkillRequest) -> SkillResponse: ...


class AdapterMissing(Exception):
    def __init__(self, phase: Phase):
        super().__init__(f"no adapter registered for phase {phase.value}")
        self.phase = phase


def invoke_skill(skill: Skill, request: SkillRequest) -> SkillResponse:
    """Call ``skill`` with both documents passed through JSON, under ``request.deadline``."""
    wire = serde.loads(SkillRequest, serde.dumps(request))
    pool = ThreadPoolExecutor(max_workers=1)
    try:
        fut = pool.submit(skill, wire)
        try:
            resp = fut.result(timeout=request.deadline)
        except FutureTimeout:
            return SkillResponse(SkillStatus.TIMEOUT)
        except Exception as exc:
            return SkillResponse(SkillStatus.ERROR, error=f"{type(exc).__name__}: {exc}")
    finally:
        pool.shutdown(wait=False)
    try:
        return serde.loads(SkillResponse, serde.dumps(resp))
    except (TypeError, ValueError) as exc:
        return SkillResponse(SkillStatus.ERROR, error=f"malformed response: {exc}")


class ProcessSkill:
    """External-process adapter: request document on stdin, response on stdout, exit 0 means Ok."""

    def __init__(self, argv: Sequence[str], env: dict[str, str] | None = None):
        self.argv = list(argv)
        self.env = env

    def __call__(self, request: SkillRequest) -> SkillResponse:
        try:
            proc = subprocess.run(
                self.argv,
                input=serde.dumps(request),
                capture_output=True,
                text=True,
                timeout=request.deadline,
                env=self.env,
            )
        except subprocess.TimeoutExpired:
            return SkillResponse(SkillStatus.TIMEOUT)
        except OSError as exc:
            return SkillResponse(SkillStatus.ERROR, error=str(exc))
        if proc.returncode != 0:
            return SkillResponse(SkillStatus.ERROR, error=proc.stderr.strip() or f"exit {proc.returncode}")
        try:
            payload = json.loads(proc.stdout) if proc.stdout.strip() else {}
        except json.JSONDecodeError as exc:
            return SkillResponse(SkillStatus.ERROR, error=f"bad response document: {exc}")
        return SkillResponse(SkillStatus.OK, payload)


class Forge(Protocol):
    def base_revision(self) -> str: ...

    def head(self, pr_id: str) -> str: ...

    def changes(self, pr_id: str) -> list[FileChange]: ...

    def merge(self, pr_id: str) -> str: ...

    def close(self, pr_id: str, comment: str) -> None: ...

    def open(self, pr: PullRequest) -> None: ...


@dataclass
class Adapters:
    skills: dict[Phase, Skill] = field(default_factory=dict)
    reviewer: Skill | None = None
    forge: Forge | None = None
    workspaces: Any = None  # WorkspaceProvider for Execute isolation
    uat: Callable[[PullRequest], Any] | None = None

    def skill(self, phase: Phase) -> Skill:
        s = self.reviewer if phase is Phase.POLISH else self.skills.get(phase)
        if s is None:
            raise AdapterMissing(phase)
        return s


# --- world --------------------------------------------------------------


@dataclass
class World:
    """The stores one loop instance owns besides its LoopState."""

    tickets: TicketStore
    surface: SpecSurface
    prs: dict[str, PullRequest] = field(default_factory=dict)
    registry: BlockedCombosRegistry = field(default_factory=BlockedCombosRegistry)
    exercise: ExerciseHistory = field(default_factory=ExerciseHistory)
    merges: list[MergeEntry] = field(default_factory=list)
    next_pr: int = 1
    gap_reports: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class _WorldDoc:
    surface: SpecSurface
    prs: tuple[PullRequest, ...]
    blocked: dict[FeatureCombo, str]
    exercised_combos: dict[FeatureCombo, int]
    exercised_pairs: dict[str, int]
    merges: tuple[MergeEntry, ...]
    next_pr: int
    gap_reports: tuple[str, ...] = ()


def dump_world(world: World) -> str:
    return serde.dumps(
        _WorldDoc(
            world.surface,
            tuple(world.prs[k] for k in sorted(world.prs)),
            dict(world.registry.entries),
            dict(world.exercise.combos),
            dict(world.exercise.pairs),
            tuple(world.merges),
            world.next_pr,
            tuple(world.gap_reports),
        )
    )


def load_world(world_text: str, tickets: TicketStore) -> World:
    doc = serde.loads(_WorldDoc, world_text)
    return World(
        tickets,
        doc.surface,
        {p.id: p for p in doc.prs},
        BlockedCombosRegistry(dict(doc.blocked)),
        ExerciseHistory(dict(doc.exercised_combos), dict(doc.exercised_pairs)),
        list(doc.merges),
        doc.next_pr,
        list(doc.gap_reports),
    )


class Reporter(Protocol):
    def drift(self, iteration: int, report: DriftReport | None) -> None: ...

    def gates(self, iteration: int, decisions: Sequence[GateDecision]) -> None: ...


# --- one iteration ------------------------------------------------------


def iteration_rng(seed: int, iteration: int) -> random.Random:
    return random.Random(seed * 1_000_003 + iteration)


def _blocked_without_fix(world: World) -> int:
    return sum(1 for tid in world.registry.entries.values() if not world.tickets.tickets[tid].linked_prs)


def _safe_transition(store: TicketStore, tid: str, target: TicketState) -> bool:
    try:
        store.transition(tid, target)
        return True
    except IllegalTransition:
        return False


def _draft(doc: dict[str, Any], iteration: int) -> TicketDraft:
    return TicketDraft(
        title=doc["title"],
        body=doc.get("body", ""),
        label=Label(doc.get("label", "bug")),
        priority=TicketPriority(doc.get("priority", "medium")),
        source=Source(doc.get("source", "loop")),
        created_at_iteration=iteration,
        combo=serde.from_doc(FeatureCombo, doc["combo"]) if doc.get("combo") else None,
    )


def run_iteration(
    state: LoopState,
    config: LoopConfig,
    adapters: Adapters,
    world: World,
    *,
    reporter: Reporter | None = None,
) -> tuple[LoopState, IterationRecord]:
    """Run one iteration. ``world`` is mutated in place; the returned state is a new object."""
    sequence = effective_sequence(state, config)
    for phase in sequence:
        adapters.skill(phase)  # fail before doing anything when an adapter is missing

    s = copy.deepcopy(state)
    s.iteration += 1
    i = s.iteration
    flags = mode_flags(config.mode)
    rng = iteration_rng(config.seed, i)
    outcomes: dict[Phase, PhaseOutcome] = {}
    notes: list[str] = []
    promoted = found = 0
    prs_created = prs_merged = 0
    tickets_created = bugs_created = 0
    findings: list[dict[str, Any]] = []
    oracle: OracleOutcome | None = None
    oracle_rate: float | None = None
    failure_class: FailureClass | None = None
    regress_metrics: dict[str, Any] | None = None
    pre_merge = adapters.forge.base_revision() if adapters.forge is not None else None

    def call(phase: Phase, payload: dict[str, Any], workspace: str | None = None, deadline: float | None = None) -> SkillResponse:
        req = SkillRequest(phase, payload, workspace, deadline if deadline is not None else config.budget(phase))
        return invoke_skill(adapters.skill(phase), req)

    def settle(phase: Phase, resp: SkillResponse) -> bool:
        if resp.status is SkillStatus.OK:
            outcomes[phase] = PhaseOutcome.COMPLETED
            return True
        outcomes[phase] = PhaseOutcome.TIMED_OUT if resp.status is SkillStatus.TIMEOUT else PhaseOutcome.FAILED
        notes.append(f"{phase.value}: {resp.status.value} {resp.error}".strip())
        return False

    def open_tickets_doc() -> list[Any]:
        return [serde.to_doc(t) for t in sorted(world.tickets.open_tickets(), key=lambda t: t.id)]

    for phase in sequence:
        try:
            if phase is Phase.BACKLOG:
                resp = call(phase, {"iteration": i, "tickets": open_tickets_doc()})
                if settle(phase, resp):
                    for d in resp.payload.get("tickets", []):
                        _, how = world.tickets.create_or_dedup(_draft(d, i))
                        tickets_created += how == "created"
                    for tid in resp.payload.get("promote", []):
                        t = world.tickets.tickets.get(tid)
                        if t is not None and t.state is TicketState.BACKLOG and _safe_transition(world.tickets, tid, TicketState.TODO):
                            promoted += 1

            elif phase is Phase.IDEATE:
                tier = choose_tier(config.tier_weights, rng)
                scenario = next_scenario_with_fallback(
                    world.surface,
                    world.registry,
                    tier,
                    world.exercise,
                    rng,
                    frontier_candidates=(*config.frontier_candidates, *world.gap_reports),
                    scenario_id=f"S{i:04d}",
                )
                if scenario is None:
                    outcomes[phase] = PhaseOutcome.SKIPPED
                    notes.append("ideate: every tier exhausted")
                    continue
                resp = call(phase, {"iteration": i, "scenario": serde.to_doc(scenario), "browser_hint": flags["browser_hint"]})
                world.exercise.record(scenario, i)
                if settle(phase, resp):
                    findings = list(resp.payload.get("findings", []))
                    found = len(findings)
                    _apply_exercised(world, scenario, resp.payload.get("exercised", []), i)
                    for gap in resp.payload.get("gaps", []):
                        if gap not in world.gap_reports:
                            world.gap_reports.append(gap)

            elif phase is Phase.TRIAGE:
                resp = call(phase, {"iteration": i, "findings": findings, "tickets": open_tickets_doc()})
                if settle(phase, resp):
                    for d in resp.payload.get("tickets", []):
                        draft = _draft(d, i)
                        tid, how = world.tickets.create_or_dedup(draft)
                        if how == "created":
                            tickets_created += 1
                            bugs_created += draft.label is Label.BUG
                        if draft.label is Label.BUG and draft.combo is not None:
                            block_combo(world.registry, draft.combo, tid, world.tickets)
                    for pr in world.prs.values():
                        world.tickets.reopen_if_unmerged(pr)
                world.registry.purge(lambda tid: world.tickets.tickets[tid].state if tid in world.tickets.tickets else None)

            elif phase is Phase.EXECUTE:
                outcomes[phase] = PhaseOutcome.COMPLETED
                budget = config.budget(phase)
                for ticket in world.tickets.top_urgent_unblocked(config.execute_ticket_limit, i):
                    if ticket.state is TicketState.BACKLOG:
                        world.tickets.transition(ticket.id, TicketState.TODO)
                    world.tickets.transition(ticket.id, TicketState.IN_PROGRESS)
                    ws = None
                    if adapters.workspaces is not None and adapters.forge is not None:
                        ws = adapters.workspaces.create(adapters.forge.base_revision())
                    try:
                        resp = call(
                            phase,
                            {"iteration": i, "ticket": serde.to_doc(world.tickets.get(ticket.id))},
                            str(ws.path) if ws is not None else None,
                            budget,
                        )
                    finally:
                        if ws is not None:
                            ws.discard()
                    desc = resp.payload.get("pr") if resp.status is SkillStatus.OK else None
                    if resp.status is not SkillStatus.OK:
                        settle(phase, resp)
                    if not desc:
                        world.tickets.transition(ticket.id, TicketState.BACKLOG)
                        continue
                    if not desc.get("includes_tests", False):
                        notes.append(f"execute: PR for {ticket.id} has no tests, rejected")
                        world.tickets.transition(ticket.id, TicketState.BACKLOG)
                        continue
                    pr_id = f"PR{world.next_pr:04d}"
                    world.next_pr += 1
                    world.prs[pr_id] = PullRequest(
                        id=pr_id,
                        ticket_id=ticket.id,
                        head_revision=desc["head_revision"],
                        changed_files=tuple(serde.from_doc(FileChange, c) for c in desc.get("changed_files", [])),
                        includes_tests=True,
                        expected_deletions=frozenset(desc.get("expected_deletions", [])),
                        created_at_iteration=i,
                    )
                    if adapters.forge is not None:
                        adapters.forge.open(world.prs[pr_id])
                    world.tickets.link_pr(ticket.id, pr_id)
                    world.tickets.transition(ticket.id, TicketState.IN_REVIEW)
                    prs_created += 1
                s.starvation_counter = 0 if prs_created else s.starvation_counter + 1

            elif phase is Phase.POLISH:
                merged, polish_notes = _polish(world, adapters, config, s, i, call)
                prs_merged += merged
                notes += polish_notes
                outcomes[phase] = PhaseOutcome.COMPLETED

            elif phase is Phase.REGRESS:
                oracle, oracle_rate, failure_class, regress_metrics = _regress(s, config, adapters, call, outcomes, notes, flags, pre_merge)
        except (KeyError, ValueError, TypeError, serde.DecodeError) as exc:
            # a malformed adapter payload fails the phase, never the iteration
            outcomes[phase] = PhaseOutcome.FAILED
            notes.append(f"{phase.value}: bad payload ({type(exc).__name__}: {exc})")

    if not promoted and not found and not prs_created:
        s.no_work_loops += 1

    prev = next((r.metrics for r in reversed(s.history) if r.metrics is not None and not r.metrics.backfilled), None)
    snapshot = _snapshot(i, world, prev, regress_metrics, oracle, oracle_rate, bugs_created, prs_created)

    snaps = [r.metrics for r in s.history if r.metrics is not None] + [snapshot]
    try:
        drift = detect_drift(snaps)
    except InsufficientHistory:
        drift = None
    gates = evaluate_gates(s, snapshot, drift, config, classification=failure_class)
    s.regression_failure_streak = gates.regression_streak
    for d in gates.decisions:
        if d.value is Decision.DRAIN and not s.in_drain:
            s = enter_drain(s, config)
        elif d.value is Decision.CONTINUE and d.gate.value == "backpressure" and s.in_drain:
            s = exit_drain(s, config)
        elif d.value is Decision.PAUSE:
            s.halted = Decision.PAUSE
        elif d.value is Decision.MONITOR_ONLY and s.halted is None:
            s.halted = Decision.MONITOR_ONLY
    s.last_gate_decisions = gates.decisions

    findings_x = cross_pr_detector(world.merges)
    if findings_x:
        notes.append(f"structural findings: {len(findings_x)}")

    record = IterationRecord(
        index=i,
        mode=Mode.DRAIN if state.in_drain else config.mode,
        phase_outcomes=outcomes,
        metrics=snapshot,
        prs_created=prs_created,
        prs_merged=prs_merged,
        tickets_created=tickets_created,
        oracle_outcome=oracle,
        failure_class=failure_class,
        decisions=gates.decisions,
        notes="; ".join(notes),
    )
    s.history.append(record)
    if reporter is not None:
        reporter.drift(i, drift)
        reporter.gates(i, gates.decisions)
    return s, record


def _apply_exercised(world: World, scenario: Scenario, exercised: list[dict[str, Any]], i: int) -> None:
    for e in exercised:
        combo = serde.from_doc(FeatureCombo, e["combo"])
        cell = world.surface.cell(combo)
        if cell is None:
            continue
        status = CellStatus(e.get("status", "passing"))
        world.surface = world.surface.with_cells(replace(cell, status=status, last_exercised=i))


def _snapshot(
    i: int,
    world: World,
    prev: MetricSnapshot | None,
    regress: dict[str, Any] | None,
    oracle: OracleOutcome | None,
    oracle_rate: float | None,
    bugs: int,
    prs_created: int,
) -> MetricSnapshot:
    base = dict(
        iteration=i,
        bug_discovery_count=bugs,
        blocked_combo_count=len(world.registry.entries),
        blocked_without_fix_count=_blocked_without_fix(world),
        open_pr_count=sum(1 for p in world.prs.values() if p.state in OPEN_PR_STATES),
        execute_output_count=prs_created,
        oracle_outcome=oracle,
    )
    if regress is not None:
        return MetricSnapshot(
            test_count=int(regress.get("test_count", 0)),
            layer_pass_rates=dict(regress.get("layer_pass_rates", {})),
            unverifiable_rate=float(regress.get("unverifiable_rate", 0.0)),
            oracle_pass_rate=oracle_rate,
            canary_escapes={k: int(v) for k, v in regress.get("canary_escapes", {}).items()},
            **base,
        )
    if prev is not None:
        # no Regress this iteration: quality metrics carry forward, escapes do not
        return MetricSnapshot(
            test_count=prev.test_count,
            layer_pass_rates=dict(prev.layer_pass_rates),
            unverifiable_rate=prev.unverifiable_rate,
            oracle_pass_rate=prev.oracle_pass_rate,
            **base,
        )
    return MetricSnapshot(**base)


def _review_from(resp: SkillResponse) -> Review | None:
    if resp.status is not SkillStatus.OK:
        return None
    p = resp.payload
    return Review(
        ReviewKind(p.get("verdict", "reject")),
        p.get("blocker_kind"),
        p.get("notes", ""),
        FailureKind(p["failure"]) if p.get("failure") else None,
    )


def _polish(world: World, adapters: Adapters, config: LoopConfig, s: LoopState, i: int, call) -> tuple[int, list[str]]:
    forge = adapters.forge
    notes: list[str] = []
    prs = [p for p in world.prs.values() if not p.terminal]
    if forge is not None:
        # the forge is the source of truth for heads; new commits clear rejection memory naturally
        prs = [replace(p, head_revision=forge.head(p.id)) for p in prs]
        for p in prs:
            world.prs[p.id] = p

    def review(pr: PullRequest) -> Review | None:
        return _review_from(call(Phase.POLISH, {"iteration": i, "pr": serde.to_doc(pr)}))

    actions, updated = polish_pass(
        prs,
        review,
        config.polish_limits(),
        iteration=i,
        in_drain=s.in_drain,
        current_changes=(lambda pr: forge.changes(pr.id)) if forge is not None else None,
        uat=adapters.uat,
    )
    world.prs.update(updated)
    merged = 0
    for a in actions:
        pr = world.prs[a.pr_id]
        if a.action is ActionKind.MERGE:
            if forge is not None:
                head = forge.head(pr.id)
                if head != pr.head_revision:
                    world.prs[pr.id] = replace(pr, head_revision=head)
                    notes.append(f"polish: {pr.id} head moved before merge, deferred")
                    continue
                forge.merge(pr.id)
            world.prs[pr.id] = replace(pr, state=PRState.MERGED)
            if pr.ticket_id and pr.ticket_id in world.tickets.tickets:
                _safe_transition(world.tickets, pr.ticket_id, TicketState.DONE)
                world.registry.unblock_on_resolution(pr.ticket_id)
            world.merges.append(MergeEntry(pr.id, pr.changed_files, "revert" in pr.labels, i))
            merged += 1
        elif a.action is ActionKind.RETIRE:
            if forge is not None:
                forge.close(pr.id, a.reason)
            if pr.ticket_id and pr.ticket_id in world.tickets.tickets:
                t = world.tickets.tickets[pr.ticket_id]
                if t.state in (TicketState.TODO, TicketState.IN_PROGRESS, TicketState.IN_REVIEW):
                    world.tickets.transition(t.id, TicketState.BACKLOG)
        elif a.action is ActionKind.ESCALATE_FOLLOW_UP:
            world.tickets.create_or_dedup(
                TicketDraft(
                    title=f"Follow up {pr.id}: {a.failure_class.value if a.failure_class else 'failure'}",
                    body=a.reason,
                    label=Label.IMPROVEMENT,
                    priority=TicketPriority.HIGH,
                    created_at_iteration=i,
                )
            )
    return merged, notes


def _regress(s: LoopState, config: LoopConfig, adapters: Adapters, call, outcomes, notes, flags, pre_merge):
    phase = Phase.REGRESS
    revision = adapters.forge.base_revision() if adapters.forge is not None else "HEAD"
    mode = OracleMode.QUICK if flags["quick_oracle"] else OracleMode.FULL
    resp = call(phase, {"mode": mode.value, "revision": revision, "iteration": s.iteration})
    if resp.status is SkillStatus.TIMEOUT:
        outcomes[phase] = PhaseOutcome.TIMED_OUT
        notes.append("regress: timed out, outcome pending classification")
        return OracleOutcome(OracleValue.FAIL, "environmental-pending"), None, None, None
    if resp.status is not SkillStatus.OK:
        outcomes[phase] = PhaseOutcome.FAILED
        notes.append(f"regress: {resp.error}")
        return None, None, None, None
    outcomes[phase] = PhaseOutcome.COMPLETED
    report = serde.from_doc(OracleReport, resp.payload["report"])
    oracle, rate = aggregate_oracle(report)
    metrics = dict(resp.payload.get("metrics", {}))
    if not oracle.failed:
        s.last_good_revision = revision
        s.pending_classification = None
        return oracle, rate, None, metrics

    # rerun at the last known-good revision; before one exists, at this iteration's pre-merge revision
    rerun = None
    target = s.last_good_revision or (pre_merge if pre_merge != revision else None)
    if target is not None:
        r2 = call(phase, {"mode": mode.value, "revision": target, "iteration": s.iteration})
        if r2.status is SkillStatus.OK:
            rerun, _ = aggregate_oracle(serde.from_doc(OracleReport, r2.payload["report"]))
            if not rerun.failed:
                s.last_good_revision = target
    klass = classify_oracle_failure(oracle, rerun)
    if klass is FailureClass.DEFERRED:
        pending = s.pending_classification
        attempts = (pending.attempts if pending is not None and pending.revision == revision else 0) + 1
        if attempts >= config.deferred_retry_limit:
            klass = FailureClass.ENVIRONMENTAL
            s.pending_classification = None
            notes.append(f"regress: no rerun after {attempts} tries, treated as environmental")
        else:
            s.pending_classification = PendingFailure(revision, attempts)
    else:
        s.pending_classification = None
    return oracle, rate, klass, metrics


# --- persistence --------------------------------------------------------


class CorruptState(Exception):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(f"{message} (byte offset {offset})" if offset is not None else message)
        self.offset = offset


class PersistenceConflict(Exception):
    pass


def dumps_state(state: LoopState) -> str:
    return serde.dumps(state)


def loads_state(text: str) -> LoopState:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptState(f"malformed state: {exc.msg}", len(text[: exc.pos].encode("utf-8"))) from None
    try:
        return serde.from_doc(LoopState, raw)
    except (serde.DecodeError, TypeError, ValueError, KeyError) as exc:
        raise CorruptState(f"invalid state document: {exc}", 0) from None


def load_state(path: str | os.PathLike) -> LoopState:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorruptState(f"cannot read {p}: {exc}") from exc
    return loads_state(text)


_COUNTERS = ("iteration", "starvation_counter", "drain_entries", "no_work_loops", "regression_failure_streak")


def merge_states(ours: LoopState, theirs: LoopState) -> LoopState:
    """Union of history rows (ours wins on a shared index) and the max of each counter."""
    merged = copy.deepcopy(ours)
    rows = {r.index: r for r in theirs.history}
    rows.update({r.index: r for r in ours.history})
    merged.history = [rows[k] for k in sorted(rows)]
    for name in _COUNTERS:
        setattr(merged, name, max(getattr(ours, name), getattr(theirs, name)))
    return merged


def persist_state(state: LoopState, path: str | os.PathLike) -> int:
    """Write ``state`` with re-read-and-merge protection. Returns the committed revision.

    ``state.state_revision`` is the revision this state was loaded at; it is
    advanced in place to the committed revision.
    """
    path = Path(path)
    lock_path = path.with_name(path.name + ".lock")
    with open(lock_path, "a+") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        try:
            to_write = state
            on_disk_rev = 0
            if path.exists():
                disk = load_state(path)
                on_disk_rev = disk.state_revision
                if on_disk_rev != state.state_revision:
                    to_write = merge_states(state, disk)
            rev = max(on_disk_rev, state.state_revision) + 1
            to_write = copy.copy(to_write)
            to_write.state_revision = rev
            tmp = path.with_name(path.name + f".tmp{os.getpid()}")
            tmp.write_text(dumps_state(to_write), encoding="utf-8")
            os.replace(tmp, path)
        finally:
            fcntl.flock(lock, fcntl.LOCK_UN)
    if to_write is not state:
        state.history = list(to_write.history)
        for name in _COUNTERS:
            setattr(state, name, getattr(to_write, name))
    state.state_revision = rev
    return rev


def verify_history(state: LoopState) -> list[int]:
    present = {r.index for r in state.history}
    return [k for k in range(1, state.iteration + 1) if k not in present]


def backfill(state: LoopState, indices: Sequence[int]) -> LoopState:
    s = copy.deepcopy(state)
    present = {r.index for r in s.history}
    for k in indices:
        if k in present:
            continue
        s.history.append(
            IterationRecord(k, Mode.STRATEGY, metrics=MetricSnapshot(iteration=k, backfilled=True), notes="backfilled")
        )
    s.history.sort(key=lambda r: r.index)
    return s


def history_table(state: LoopState) -> str:
    lines = [
        "| iter | mode | phases | prs created | prs merged | oracle | open prs | decisions |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for r in state.history:
        phases = " ".join(f"{p.value}:{o.value}" for p, o in r.phase_outcomes.items()) or "-"
        oracle = r.oracle_outcome.value.value if r.oracle_outcome else "-"
        open_prs = r.metrics.open_pr_count if r.metrics else "-"
        decisions = ", ".join(f"{d.gate.value}:{d.value.value}" for d in r.decisions) or "-"
        mode = "backfilled" if r.backfilled else r.mode.value
        lines.append(f"| {r.index} | {mode} | {phases} | {r.prs_created} | {r.prs_merged} | {oracle} | {open_prs} | {decisions} |")
    return "\n".join(lines) + "\n"


# --- the runner ---------------------------------------------------------


class LoopBusy(Exception):
    pass


class FileReporter:
    def __init__(self, state_dir: Path):
        self.reports = Path(state_dir) / "reports"
        self.alerts = Path(state_dir) / "alerts"

    def drift(self, iteration: int, report: DriftReport | None) -> None:
        self.reports.mkdir(parents=True, exist_ok=True)
        text = serde.dumps(report) if report is not None else "null\n"
        (self.reports / f"drift-{iteration:04d}.json").write_text(text, encoding="utf-8")

    def gates(self, iteration: int, decisions: Sequence[GateDecision]) -> None:
        self.reports.mkdir(parents=True, exist_ok=True)
        (self.reports / f"gates-{iteration:04d}.json").write_text(serde.dumps(tuple(decisions)), encoding="utf-8")
        for d in decisions:
            self.alerts.mkdir(parents=True, exist_ok=True)
            (self.alerts / f"iter-{iteration:04d}-{d.gate.value}.json").write_text(serde.dumps(d), encoding="utf-8")


@dataclass(frozen=True)
class LoopResult:
    state: LoopState
    records: tuple[IterationRecord, ...]
    stop: str  # "max_iterations" | "pause" | "monitor_only"


class Loop:
    """Drives iterations against a state directory, persisting at every boundary."""

    STATE = "state.json"
    TICKETS = "tickets.json"
    WORLD = "world.json"

    def __init__(
        self,
        state_dir: str | os.PathLike,
        config: LoopConfig,
        adapters: Adapters,
        *,
        surface: SpecSurface | None = None,
        after_iteration: Callable[[LoopState, IterationRecord, World], None] | None = None,
    ):
        self.dir = Path(state_dir)
        self.config = config
        self.adapters = adapters
        self.after_iteration = after_iteration
        self.dir.mkdir(parents=True, exist_ok=True)
        if (self.dir / self.STATE).exists():
            self.state = load_state(self.dir / self.STATE)
        else:
            self.state = LoopState()
        tickets_path = self.dir / self.TICKETS
        tickets = TicketStore.load(tickets_path) if tickets_path.exists() else TicketStore()
        world_path = self.dir / self.WORLD
        if world_path.exists():
            self.world = load_world(world_path.read_text(encoding="utf-8"), tickets)
        else:
            self.world = World(tickets, surface if surface is not None else SpecSurface())
        self.reporter = FileReporter(self.dir)

    def save(self) -> None:
        self.world.tickets.persist(self.dir / self.TICKETS)
        tmp = self.dir / (self.WORLD + ".tmp")
        tmp.write_text(dump_world(self.world), encoding="utf-8")
        os.replace(tmp, self.dir / self.WORLD)
        persist_state(self.state, self.dir / self.STATE)
        (self.dir / "history.md").write_text(history_table(self.state), encoding="utf-8")

    def run(self, max_iterations: int, *, resume: bool = False) -> LoopResult:
        lock = open(self.dir / "run.lock", "a+")
        try:
            fcntl.flock(lock, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            lock.close()
            raise LoopBusy(f"another run holds {self.dir / 'run.lock'}") from None
        try:
            if resume:
                self.state.halted = None
            records: list[IterationRecord] = []
            if self.state.halted is not None:
                return LoopResult(self.state, (), self.state.halted.value)
            for _ in range(max_iterations):
                self.state, record = run_iteration(
                    self.state, self.config, self.adapters, self.world, reporter=self.reporter
                )
                records.append(record)
                self.save()
                if self.after_iteration is not None:
                    self.after_iteration(self.state, record, self.world)
                if self.state.halted is not None:
                    return LoopResult(self.state, tuple(records), self.state.halted.value)
            return LoopResult(self.state, tuple(records), "max_iterations")
        finally:
            fcntl.flock(lock, fcntl.LOCK_UN)
            lock.close()
