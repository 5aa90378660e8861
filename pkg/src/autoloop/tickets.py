"""Durable ticket backlog shared by the loop and humans."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

from . import serde
from .model import (
    PRIORITY_RANK,
    FeatureCombo,
    Label,
    PRState,
    PullRequest,
    Source,
    Ticket,
    TicketPriority,
    TicketState,
    dedup_key,
)

_S = TicketState
LEGAL_TRANSITIONS: frozenset[tuple[TicketState, TicketState]] = frozenset(
    {
        (_S.BACKLOG, _S.TODO),
        (_S.TODO, _S.IN_PROGRESS),
        (_S.IN_PROGRESS, _S.IN_REVIEW),
        (_S.IN_REVIEW, _S.DONE),
        (_S.IN_REVIEW, _S.IN_PROGRESS),
        (_S.TODO, _S.BACKLOG),
        (_S.IN_PROGRESS, _S.BACKLOG),
        (_S.IN_REVIEW, _S.BACKLOG),
        (_S.DONE, _S.TODO),
    }
)


class IllegalTransition(Exception):
    def __init__(self, current: TicketState, target: TicketState):
        super().__init__(f"illegal ticket transition {current.value} -> {target.value}")
        self.current = current
        self.target = target


class UnknownTicket(KeyError):
    pass


class CorruptStore(Exception):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(f"{message} (byte offset {offset})" if offset is not None else message)
        self.offset = offset


@dataclass(frozen=True)
class TicketDraft:
    title: str
    body: str
    label: Label
    priority: TicketPriority
    source: Source = Source.LOOP
    created_at_iteration: int = 0
    combo: FeatureCombo | None = None


@dataclass(frozen=True)
class _StoreDoc:
    revision: int
    next_id: int
    tickets: tuple[Ticket, ...]


class TicketStore:
    """Single-writer ticket store. Every committed mutation bumps ``revision`` by one."""

    def __init__(self, journal_path: str | Path | None = None) -> None:
        self.tickets: dict[str, Ticket] = {}
        self.dedup_index: dict[str, str] = {}
        self.revision = 0
        self._next_id = 1
        self.journal_path = Path(journal_path) if journal_path else None

    # -- mutations -------------------------------------------------------

    def _commit(self, ticket: Ticket, op: str) -> Ticket:
        self.tickets[ticket.id] = ticket
        self.revision += 1
        if self.journal_path is not None:
            with self.journal_path.open("a", encoding="utf-8") as fh:
                entry = {"revision": self.revision, "op": op, "ticket": serde.to_doc(ticket)}
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return ticket

    def create_or_dedup(self, draft: TicketDraft) -> tuple[str, str]:
        """Store ``draft`` or fold it into an open duplicate. Returns ``(id, "created"|"deduplicated")``."""
        if not draft.title.strip():
            raise ValueError("ticket title must be non-empty")
        key = dedup_key(draft.title, draft.body)
        existing = self.dedup_index.get(key)
        if existing is not None and self.tickets[existing].state is not TicketState.DONE:
            t = self.tickets[existing]
            self._commit(replace(t, confirmations=t.confirmations + 1), "confirm")
            return existing, "deduplicated"
        tid = f"T{self._next_id:04d}"
        self._next_id += 1
        ticket = Ticket(
            id=tid,
            title=draft.title,
            body=draft.body,
            label=draft.label,
            priority=draft.priority,
            source=draft.source,
            dedup_key=key,
            created_at_iteration=draft.created_at_iteration,
            combo=draft.combo,
        )
        self.dedup_index[key] = tid
        self._commit(ticket, "create")
        return tid, "created"

    def get(self, tid: str) -> Ticket:
        try:
            return self.tickets[tid]
        except KeyError:
            raise UnknownTicket(tid) from None

    def transition(self, tid: str, target: TicketState) -> Ticket:
        t = self.get(tid)
        if (t.state, target) not in LEGAL_TRANSITIONS:
            raise IllegalTransition(t.state, target)
        return self._commit(replace(t, state=target), f"transition:{target.value}")

    def add_dependency(self, blocker: str, blocked: str) -> None:
        """Record ``blocker`` blocks ``blocked`` on both tickets."""
        a, b = self.get(blocker), self.get(blocked)
        if blocker == blocked:
            raise ValueError("a ticket cannot block itself")
        self._commit(replace(a, blocks=a.blocks | {blocked}), "blocks")
        self._commit(replace(b, blocked_by=b.blocked_by | {blocker}), "blocked_by")

    def remove_dependency(self, blocker: str, blocked: str) -> None:
        a, b = self.get(blocker), self.get(blocked)
        self._commit(replace(a, blocks=a.blocks - {blocked}), "unblocks")
        self._commit(replace(b, blocked_by=b.blocked_by - {blocker}), "unblocked_by")

    def link_pr(self, tid: str, pr_id: str) -> None:
        t = self.get(tid)
        self._commit(replace(t, linked_prs=t.linked_prs | {pr_id}), "link_pr")

    def reopen_if_unmerged(self, pr: PullRequest) -> str | None:
        """Send the ticket of a retired (closed, unmerged) PR back to Todo."""
        if pr.state is not PRState.RETIRED or pr.ticket_id is None or pr.ticket_id not in self.tickets:
            return None
        t = self.tickets[pr.ticket_id]
        if t.state is TicketState.DONE:
            self.transition(t.id, TicketState.TODO)
        elif t.state is TicketState.IN_REVIEW:
            # No direct InReview -> Todo edge: demote then promote.
            self.transition(t.id, TicketState.BACKLOG)
            self.transition(t.id, TicketState.TODO)
        else:
            return None
        return t.id

    # -- queries ---------------------------------------------------------

    def is_blocked(self, ticket: Ticket) -> bool:
        return any(
            dep in self.tickets and self.tickets[dep].state is not TicketState.DONE
            for dep in ticket.blocked_by
        )

    def top_urgent_unblocked(self, n: int, iteration: int = 0) -> list[Ticket]:
        """Bugs first, then priority, then oldest. Ticket source plays no part."""
        if n <= 0:
            return []
        pool = [
            t
            for t in self.tickets.values()
            if t.state in (TicketState.TODO, TicketState.BACKLOG) and not self.is_blocked(t)
        ]
        pool.sort(key=lambda t: (t.label is not Label.BUG, PRIORITY_RANK[t.priority], t.created_at_iteration))
        return pool[:n]

    def open_tickets(self) -> list[Ticket]:
        return [t for t in self.tickets.values() if t.state is not TicketState.DONE]

    def check_symmetry(self) -> list[str]:
        problems = []
        for t in self.tickets.values():
            for other in t.blocks:
                if other in self.tickets and t.id not in self.tickets[other].blocked_by:
                    problems.append(f"{t.id} blocks {other} but not mirrored")
            for other in t.blocked_by:
                if other in self.tickets and t.id not in self.tickets[other].blocks:
                    problems.append(f"{t.id} blocked_by {other} but not mirrored")
        return problems

    # -- persistence -----------------------------------------------------

    def dumps(self) -> str:
        return serde.dumps(_StoreDoc(self.revision, self._next_id, tuple(self.tickets.values())))

    def persist(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.dumps(), encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def loads(cls, text: str) -> TicketStore:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CorruptStore(f"malformed ticket store: {exc.msg}", len(text[: exc.pos].encode("utf-8"))) from None
        try:
            doc = serde.from_doc(_StoreDoc, raw)
        except (serde.DecodeError, TypeError, ValueError) as exc:
            raise CorruptStore(f"invalid ticket store: {exc}", 0) from None
        store = cls()
        store.revision = doc.revision
        store._next_id = doc.next_id
        for t in doc.tickets:
            store.tickets[t.id] = t
            if t.state is not TicketState.DONE or t.dedup_key not in store.dedup_index:
                store.dedup_index[t.dedup_key] = t.id
        return store

    @classmethod
    def load(cls, path: str | Path) -> TicketStore:
        return cls.loads(Path(path).read_text(encoding="utf-8"))
