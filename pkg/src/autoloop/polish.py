"""Polish phase: graduated PR handling, rejection memory, TTL recovery, deletion check."""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Mapping, Sequence

from .model import ChangeKind, FileChange, PRState, PullRequest, TicketState

DEFAULT_TTL = 10


class ActionKind(str, Enum):
    MERGE = "merge"
    LABEL_NEEDS_ATTENTION = "label_needs_attention"
    RETIRE = "retire"
    SKIP_NOT_MERGEABLE = "skip_not_mergeable"
    SKIP_EXCLUDED = "skip_excluded"
    ESCALATE_FOLLOW_UP = "escalate_follow_up"


class FailureKind(str, Enum):
    REVIEW_REJECTION = "review_rejection"
    CI_FAILURE = "ci_failure"
    MERGE_CONFLICT = "merge_conflict"
    DELETION_BLOCKED = "deletion_blocked"


class ReviewKind(str, Enum):
    APPROVE = "approve"
    REJECT = "reject"
    BLOCK = "block"


@dataclass(frozen=True)
class Review:
    verdict: ReviewKind
    blocker_kind: str | None = None  # security | architectural
    notes: str = ""
    failure: FailureKind | None = None  # CI results and conflicts arrive inside reviews


@dataclass(frozen=True)
class PolishAction:
    pr_id: str
    action: ActionKind
    reason: str = ""
    failure_class: FailureKind | None = None


class RetireTerminal(Exception):
    pass


@dataclass(frozen=True)
class DeletionCheck:
    clear: bool
    unexpected: tuple[str, ...] = ()


def gate_rejection_memory_check(pr: PullRequest) -> bool:
    return pr.last_rejected_revision is not None and pr.last_rejected_revision == pr.head_revision


def pre_merge_deletion_check(changes: Sequence[FileChange], expected: frozenset[str] | set[str]) -> DeletionCheck:
    """``changes`` must be recomputed at merge time, not carried over from review."""
    unexpected = tuple(sorted(c.path for c in changes if c.kind is ChangeKind.DELETED and c.path not in expected))
    return DeletionCheck(not unexpected, unexpected)


def retire(pr: PullRequest, reason: str, tickets=None) -> PullRequest:
    """Close ``pr`` and route its ticket back to the backlog."""
    if pr.terminal:
        raise RetireTerminal(f"{pr.id} is already {pr.state.value}")
    if tickets is not None and pr.ticket_id and pr.ticket_id in tickets.tickets:
        t = tickets.tickets[pr.ticket_id]
        if t.state in (TicketState.TODO, TicketState.IN_PROGRESS, TicketState.IN_REVIEW):
            tickets.transition(t.id, TicketState.BACKLOG)
    return replace(pr, state=PRState.RETIRED, labels=pr.labels | {f"retired: {reason}"})


def ttl_recovery(prs: Sequence[PullRequest], now: int, ttl: int = DEFAULT_TTL) -> list[PullRequest]:
    """Return expired needs-attention PRs to Open with a clean slate."""
    if ttl < 1:
        raise ValueError("ttl must be at least 1")
    return [
        replace(
            pr,
            state=PRState.OPEN,
            attempt_count=0,
            needs_attention_since=None,
            last_rejected_revision=None,
            labels=pr.labels - {"needs-attention"},
        )
        for pr in prs
        if pr.state is PRState.NEEDS_ATTENTION
        and pr.needs_attention_since is not None
        and now - pr.needs_attention_since >= ttl
    ]


@dataclass(frozen=True)
class PolishLimits:
    polish_pr_limit: int = 3
    drain_pr_limit: int = 6
    needs_attention_threshold: int = 1
    ttl: int = DEFAULT_TTL


ReviewSource = Callable[[PullRequest], Review] | Mapping[str, Review]
UatCheck = Callable[[PullRequest], "object"]


def _review(source: ReviewSource, pr: PullRequest) -> Review | None:
    if callable(source):
        return source(pr)
    return source.get(pr.id)


def polish_pass(
    prs: Sequence[PullRequest],
    reviews: ReviewSource,
    config: PolishLimits,
    *,
    iteration: int,
    in_drain: bool = False,
    current_changes: Callable[[PullRequest], Sequence[FileChange]] | None = None,
    uat: UatCheck | None = None,
) -> tuple[list[PolishAction], dict[str, PullRequest]]:
    """Plan actions for open PRs, oldest first.

    Returns the actions and the updated PR records keyed by id. Only PRs that
    consume a review count toward the per-pass limit. ``uat`` returns an
    object with a ``value`` attribute; ``product_fail`` or ``eval_cheat_fail``
    stops the merge.
    """
    limit = config.drain_pr_limit if in_drain else config.polish_pr_limit
    recovered = {p.id: p for p in ttl_recovery(prs, iteration, config.ttl)}
    pool = sorted(
        (recovered.get(p.id, p) for p in prs if not p.terminal),
        key=lambda p: (p.created_at_iteration, p.id),
    )
    actions: list[PolishAction] = []
    updated: dict[str, PullRequest] = dict(recovered)
    reviewed = 0

    def reject(pr: PullRequest, kind: FailureKind, reason: str, action_if_retry: ActionKind) -> None:
        attempts = pr.attempt_count + 1
        pr = replace(pr, attempt_count=attempts, last_rejected_revision=pr.head_revision)
        if attempts >= config.needs_attention_threshold:
            pr = replace(
                pr, state=PRState.NEEDS_ATTENTION, needs_attention_since=iteration, labels=pr.labels | {"needs-attention"}
            )
            if config.needs_attention_threshold > 1:
                actions.append(PolishAction(pr.id, ActionKind.ESCALATE_FOLLOW_UP, reason, kind))
            else:
                actions.append(PolishAction(pr.id, ActionKind.LABEL_NEEDS_ATTENTION, reason, kind))
        else:
            actions.append(PolishAction(pr.id, action_if_retry, f"{reason}; retry after new commits", kind))
        updated[pr.id] = pr

    for pr in pool:
        if pr.state is PRState.NEEDS_ATTENTION:
            actions.append(PolishAction(pr.id, ActionKind.SKIP_EXCLUDED, "needs attention, TTL not expired"))
            continue
        if gate_rejection_memory_check(pr):
            actions.append(PolishAction(pr.id, ActionKind.SKIP_NOT_MERGEABLE, f"rejected at {pr.head_revision}, no new commits"))
            continue
        if reviewed >= limit:
            continue
        review = _review(reviews, pr)
        if review is None:
            continue
        reviewed += 1
        if review.verdict is ReviewKind.BLOCK:
            updated[pr.id] = replace(pr, state=PRState.RETIRED, labels=pr.labels | {f"retired: {review.blocker_kind or 'blocked'}"})
            actions.append(PolishAction(pr.id, ActionKind.RETIRE, f"{review.blocker_kind or 'blocking'} concern: {review.notes}".strip()))
            continue
        if review.verdict is ReviewKind.REJECT:
            reject(pr, review.failure or FailureKind.REVIEW_REJECTION, review.notes or "review rejected", ActionKind.SKIP_NOT_MERGEABLE)
            continue
        changes = current_changes(pr) if current_changes is not None else pr.changed_files
        check = pre_merge_deletion_check(changes, pr.expected_deletions)
        if not check.clear:
            reject(pr, FailureKind.DELETION_BLOCKED, f"unexpected deletions: {', '.join(check.unexpected)}", ActionKind.SKIP_NOT_MERGEABLE)
            continue
        if uat is not None:
            verdict = uat(pr)
            value = getattr(getattr(verdict, "value", None), "value", getattr(verdict, "value", None))
            if value in ("product_fail", "eval_cheat_fail"):
                reject(pr, FailureKind.REVIEW_REJECTION, f"uat {value}", ActionKind.SKIP_NOT_MERGEABLE)
                continue
        actions.append(PolishAction(pr.id, ActionKind.MERGE, "approved, deletion check clear"))
    return actions, updated
