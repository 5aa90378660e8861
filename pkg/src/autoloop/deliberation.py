"""Reviewer tribunals and moderated multi-debater sessions."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

from . import serde

log = logging.getLogger(__name__)

DEFAULT_MAX_ROUNDS = 3
KEY_WORDS = 8
_STOPWORDS = frozenset(
    "a an the is are was were be been of to in on at for and or but with by from this that it its as".split()
)


class PanelSizeUnsupported(ValueError):
    pass


class DebaterCrash(Exception):
    pass


def finding_key(category: str, location: str, claim: str) -> str:
    words = [w for w in re.findall(r"[a-z0-9_]+", claim.lower()) if w not in _STOPWORDS]
    return "|".join((category.strip().lower(), location.strip().lower(), " ".join(words[:KEY_WORDS])))


@dataclass(frozen=True)
class ReviewerFinding:
    reviewer: str
    key: str
    severity: str = "medium"
    detail: str = ""

    @classmethod
    def of(cls, reviewer: str, category: str, location: str, claim: str, severity: str = "medium") -> ReviewerFinding:
        return cls(reviewer, finding_key(category, location, claim), severity, claim)


@dataclass(frozen=True)
class TribunalBuckets:
    consensus: frozenset[str] = frozenset()
    majority: frozenset[str] = frozenset()
    solo: frozenset[str] = frozenset()


def classify_findings(findings: Mapping[str, Iterable[ReviewerFinding | str]]) -> TribunalBuckets:
    """Bucket finding keys by how many of the three reviewers flagged them."""
    if len(findings) != 3:
        raise PanelSizeUnsupported(f"tribunal classification is defined for 3 reviewers, got {len(findings)}")
    votes: dict[str, set[str]] = {}
    for reviewer, items in findings.items():
        for f in items:
            key = f.key if isinstance(f, ReviewerFinding) else f
            votes.setdefault(key, set()).add(reviewer)
    by_count: dict[int, set[str]] = {1: set(), 2: set(), 3: set()}
    for key, who in votes.items():
        by_count[len(who)].add(key)
    return TribunalBuckets(frozenset(by_count[3]), frozenset(by_count[2]), frozenset(by_count[1]))


# --- sessions -----------------------------------------------------------


class IssueStatus(str, Enum):
    OPEN = "open"
    RESOLVED = "resolved"


class Conclusion(str, Enum):
    AGREED = "agreed"
    AGREED_TO_DISAGREE = "agreed_to_disagree"
    BLOCKED = "blocked"


@dataclass(frozen=True)
class TranscriptEntry:
    round: int
    speaker: str
    content: str


@dataclass(frozen=True)
class Issue:
    id: str
    raised_by: str
    statement: str
    status: IssueStatus = IssueStatus.OPEN
    resolution: str | None = None
    resolver: str | None = None

    def __post_init__(self) -> None:
        if self.status is IssueStatus.RESOLVED and not self.resolution:
            raise ValueError(f"issue {self.id} resolved without a resolution")


@dataclass(frozen=True)
class Ratification:
    issue_id: str
    ratified_by: str


@dataclass(frozen=True)
class Turn:
    content: str
    raise_issues: tuple[str, ...] = ()
    resolve: tuple[tuple[str, str], ...] = ()  # (issue id, resolution)
    ratify: tuple[str, ...] = ()
    do_not_build: str | None = None


@dataclass(frozen=True)
class DebaterRequest:
    """What a debater sees. Moderator notes have no field here by design."""

    topic: str
    grounding: tuple[str, ...]
    round: int
    transcript: tuple[TranscriptEntry, ...] = ()
    open_issues: tuple[Issue, ...] = ()


class Debater(Protocol):
    id: str

    def respond(self, request: DebaterRequest) -> Turn: ...


@dataclass(frozen=True)
class DebateSession:
    topic: str
    debaters: tuple[str, ...]
    max_rounds: int = DEFAULT_MAX_ROUNDS
    grounding: tuple[str, ...] = ()
    transcript: tuple[TranscriptEntry, ...] = ()
    issues: tuple[Issue, ...] = ()
    ratifications: tuple[Ratification, ...] = ()
    kill_gate_entry: int | None = None
    conclusion: Conclusion | None = None
    conclusion_reason: str = ""
    moderator_notes: str = ""
    rounds_completed: int = -1  # round 0 is the blind opening
    active: tuple[str, ...] = ()
    round_mutations: tuple[int, ...] = ()
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.debaters) < 2:
            raise ValueError("a debate needs at least two debaters")
        if len(set(self.debaters)) != len(self.debaters):
            raise ValueError("debater identifiers must be distinct")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if "moderator" in self.debaters:
            raise ValueError("the moderator cannot take part as a debater")


def new_session(topic: str, debaters: Sequence[str], **kw) -> DebateSession:
    return DebateSession(topic, tuple(debaters), active=tuple(debaters), **kw)


def _call(adapter: Debater, request: DebaterRequest) -> Turn | DebaterCrash:
    try:
        return adapter.respond(request)
    except Exception as exc:
        return DebaterCrash(f"{adapter.id}: {exc}")


def _drop_crashed(session: DebateSession, crashed: list[str]) -> DebateSession:
    if not crashed:
        return session
    active = tuple(d for d in session.active if d not in crashed)
    session = replace(session, active=active, warnings=session.warnings + tuple(f"debater {d} crashed" for d in crashed))
    if len(active) < 2:
        session = replace(session, conclusion=Conclusion.BLOCKED, conclusion_reason="fewer than two debaters remain")
    return session


def open_round_blind(session: DebateSession, adapters: Mapping[str, Debater]) -> DebateSession:
    if session.transcript:
        raise ValueError("blind opening requires an empty transcript")
    request = DebaterRequest(session.topic, session.grounding, 0)
    order = list(session.active)
    with ThreadPoolExecutor(max_workers=len(order)) as pool:
        results = list(pool.map(lambda d: _call(adapters[d], request), order))
    entries, crashed = [], []
    for d, r in zip(order, results):
        if isinstance(r, DebaterCrash):
            log.warning("%s", r)
            crashed.append(d)
        else:
            entries.append(TranscriptEntry(0, d, r.content))
    session = replace(session, transcript=tuple(entries), rounds_completed=0)
    return _drop_crashed(session, crashed)


def _apply_turn(session: DebateSession, speaker: str, turn: Turn, rnd: int) -> tuple[DebateSession, int]:
    issues = {i.id: i for i in session.issues}
    order = [i.id for i in session.issues]
    ratifications = list(session.ratifications)
    warnings = list(session.warnings)
    mutations = 0
    transcript = session.transcript + (TranscriptEntry(rnd, speaker, turn.content),)
    for statement in turn.raise_issues:
        iid = f"I{len(order) + 1}"
        issues[iid] = Issue(iid, speaker, statement)
        order.append(iid)
        mutations += 1
    for iid, resolution in turn.resolve:
        if iid not in issues or not resolution:
            msg = f"round {rnd}: {speaker} resolved unknown issue {iid!r}; discarded"
            log.warning(msg)
            warnings.append(msg)
            continue
        issues[iid] = replace(issues[iid], status=IssueStatus.RESOLVED, resolution=resolution, resolver=speaker)
        # a new resolution needs fresh ratification
        ratifications = [r for r in ratifications if r.issue_id != iid]
        mutations += 1
    for iid in turn.ratify:
        issue = issues.get(iid)
        if issue is None or issue.status is not IssueStatus.RESOLVED or issue.raised_by != speaker:
            warnings.append(f"round {rnd}: ratification of {iid!r} by {speaker} ignored")
            continue
        if not any(r.issue_id == iid for r in ratifications):
            ratifications.append(Ratification(iid, speaker))
            mutations += 1
    kill = session.kill_gate_entry
    if turn.do_not_build and kill is None:
        kill = len(transcript) - 1
    session = replace(
        session,
        transcript=transcript,
        issues=tuple(issues[i] for i in order),
        ratifications=tuple(ratifications),
        kill_gate_entry=kill,
        warnings=tuple(warnings),
    )
    return session, mutations


def run_round(session: DebateSession, adapters: Mapping[str, Debater]) -> DebateSession:
    if session.rounds_completed < 0:
        raise ValueError("run the blind opening first")
    if session.rounds_completed >= session.max_rounds:
        raise ValueError("round cap reached")
    rnd = session.rounds_completed + 1
    crashed = []
    mutations = 0
    for d in session.active:
        request = DebaterRequest(
            session.topic,
            session.grounding,
            rnd,
            session.transcript,
            tuple(i for i in session.issues if i.status is IssueStatus.OPEN),
        )
        turn = _call(adapters[d], request)
        if isinstance(turn, DebaterCrash):
            log.warning("%s", turn)
            crashed.append(d)
            continue
        session, n = _apply_turn(session, d, turn, rnd)
        mutations += n
    session = replace(session, rounds_completed=rnd, round_mutations=session.round_mutations + (mutations,))
    return _drop_crashed(session, crashed)


@dataclass(frozen=True)
class Convergence:
    converged: bool
    open_issues: tuple[str, ...] = ()
    unratified: tuple[str, ...] = ()


def convergence_check(session: DebateSession) -> Convergence:
    ratified = {(r.issue_id, r.ratified_by) for r in session.ratifications}
    open_ids = tuple(i.id for i in session.issues if i.status is IssueStatus.OPEN)
    unratified = tuple(
        i.id for i in session.issues if i.status is IssueStatus.RESOLVED and (i.id, i.raised_by) not in ratified
    )
    return Convergence(not open_ids and not unratified, open_ids, unratified)


@dataclass(frozen=True)
class IssueLineage:
    issue_id: str
    raised_by: str
    resolved_by: str | None
    ratified_by: str | None
    status: IssueStatus


@dataclass(frozen=True)
class SynthesisReport:
    topic: str
    conclusion: Conclusion
    reason: str
    lineage: tuple[IssueLineage, ...]
    transcript_entries: int
    rounds: int


def conclude(session: DebateSession) -> tuple[DebateSession, SynthesisReport]:
    conv = convergence_check(session)
    if session.conclusion is Conclusion.BLOCKED:
        conclusion, reason = Conclusion.BLOCKED, session.conclusion_reason
    elif conv.converged and session.kill_gate_entry is not None:
        conclusion, reason = Conclusion.AGREED, "all issues resolved and ratified; kill gate argued"
    elif conv.converged:
        conclusion, reason = Conclusion.BLOCKED, "KillGateUnsatisfied"
    else:
        conclusion, reason = (
            Conclusion.AGREED_TO_DISAGREE,
            f"open: {list(conv.open_issues)}; unratified: {list(conv.unratified)}",
        )
    session = replace(session, conclusion=conclusion, conclusion_reason=reason)
    ratifier = {r.issue_id: r.ratified_by for r in session.ratifications}
    lineage = tuple(
        IssueLineage(i.id, i.raised_by, i.resolver, ratifier.get(i.id), i.status) for i in session.issues
    )
    report = SynthesisReport(
        session.topic, conclusion, reason, lineage, len(session.transcript), max(session.rounds_completed, 0)
    )
    return session, report


def run_session(session: DebateSession, adapters: Mapping[str, Debater]) -> tuple[DebateSession, SynthesisReport]:
    """Blind opening, then moderated rounds until convergence or the cap."""
    session = open_round_blind(session, adapters)
    while session.conclusion is None and session.rounds_completed < session.max_rounds:
        session = run_round(session, adapters)
        if session.conclusion is None and session.issues and convergence_check(session).converged:
            break
    return conclude(session)


# --- scripted debaters --------------------------------------------------


@dataclass
class ScriptedDebater:
    id: str
    turns: dict[int, Turn] = field(default_factory=dict)
    opening: str | None = None
    crash_on: frozenset[int] = frozenset()
    seen: list[DebaterRequest] = field(default_factory=list)

    def respond(self, request: DebaterRequest) -> Turn:
        self.seen.append(request)
        if request.round in self.crash_on:
            raise RuntimeError(f"scripted crash in round {request.round}")
        if request.round == 0:
            return Turn(self.opening or f"{self.id} opening position on {request.topic}")
        return self.turns.get(request.round, Turn(f"{self.id} has nothing to add"))


# --- corpus -------------------------------------------------------------


@dataclass(frozen=True)
class CorpusMetrics:
    sessions: int
    dcr: float
    round_efficiency: float
    ratification_rate: float
    flags: tuple[str, ...] = ()


def corpus_metrics(sessions: Sequence[DebateSession]) -> CorpusMetrics:
    """Register-derived proxies. Rates with an empty denominator are reported as 0."""
    if not sessions:
        raise ValueError("corpus_metrics needs at least one session")
    agreed = sum(1 for s in sessions if s.conclusion is Conclusion.AGREED)
    rounds = [m for s in sessions for m in s.round_mutations]
    resolutions = sum(1 for s in sessions for i in s.issues if i.status is IssueStatus.RESOLVED)
    ratified = sum(len(s.ratifications) for s in sessions)
    dcr = agreed / len(sessions)
    flags = ("universal convergence implausible",) if dcr == 1.0 else ()
    return CorpusMetrics(
        len(sessions),
        dcr,
        sum(1 for m in rounds if m > 0) / len(rounds) if rounds else 0.0,
        ratified / resolutions if resolutions else 0.0,
        flags,
    )


def save_session(session: DebateSession, path: Path) -> None:
    Path(path).write_text(serde.dumps(session), encoding="utf-8")


def load_corpus(directory: Path) -> list[DebateSession]:
    return [serde.loads(DebateSession, p.read_text(encoding="utf-8")) for p in sorted(Path(directory).glob("*.json"))]
