from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings, strategies as st

from autoloop.model import Label, PRState, PullRequest, TicketPriority, TicketState
from autoloop.tickets import (
    LEGAL_TRANSITIONS,
    CorruptStore,
    IllegalTransition,
    TicketDraft,
    TicketStore,
    UnknownTicket,
)


def draft(title="Crash on save", body="saving a note crashes", label=Label.BUG, prio=TicketPriority.HIGH, it=0):
    return TicketDraft(title, body, label, prio, created_at_iteration=it)


def test_create_then_dedup_counts_confirmations():
    store = TicketStore()
    tid, how = store.create_or_dedup(draft())
    assert how == "created"
    tid2, how2 = store.create_or_dedup(draft(title="crash on SAVE!"))
    assert (tid2, how2) == (tid, "deduplicated")
    assert store.get(tid).confirmations == 2
    assert store.revision == 2


def test_done_ticket_does_not_absorb_duplicates():
    store = TicketStore()
    tid, _ = store.create_or_dedup(draft())
    for s in (TicketState.TODO, TicketState.IN_PROGRESS, TicketState.IN_REVIEW, TicketState.DONE):
        store.transition(tid, s)
    new, how = store.create_or_dedup(draft())
    assert how == "created" and new != tid


def test_empty_title_rejected():
    with pytest.raises(ValueError):
        TicketStore().create_or_dedup(draft(title="  "))


@pytest.mark.parametrize("src, dst", list(itertools.product(TicketState, TicketState)))
def test_transition_table_is_exhaustive(src, dst):
    store = TicketStore()
    tid, _ = store.create_or_dedup(draft())
    store.tickets[tid] = store.tickets[tid].__class__(**{**store.tickets[tid].__dict__, "state": src})
    if (src, dst) in LEGAL_TRANSITIONS:
        assert store.transition(tid, dst).state is dst
    else:
        with pytest.raises(IllegalTransition):
            store.transition(tid, dst)


def test_unknown_ticket():
    with pytest.raises(UnknownTicket):
        TicketStore().transition("T9999", TicketState.TODO)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.booleans()), max_size=25))
def test_dependency_symmetry_holds_under_any_edit_sequence(ops):
    store = TicketStore()
    ids = [store.create_or_dedup(draft(title=f"t{i}", body=str(i)))[0] for i in range(6)]
    for a, b, add in ops:
        if a == b:
            continue
        if add:
            store.add_dependency(ids[a], ids[b])
        else:
            store.remove_dependency(ids[a], ids[b])
        assert store.check_symmetry() == []


def test_top_urgent_orders_bugs_priority_age_and_skips_blocked():
    store = TicketStore()
    feat, _ = store.create_or_dedup(draft("feat", "f", Label.FEATURE, TicketPriority.CRITICAL, 0))
    old_bug, _ = store.create_or_dedup(draft("old", "o", Label.BUG, TicketPriority.HIGH, 1))
    new_bug, _ = store.create_or_dedup(draft("new", "n", Label.BUG, TicketPriority.HIGH, 5))
    crit_bug, _ = store.create_or_dedup(draft("crit", "c", Label.BUG, TicketPriority.CRITICAL, 9))
    blocked, _ = store.create_or_dedup(draft("blocked", "b", Label.BUG, TicketPriority.CRITICAL, 0))
    store.add_dependency(feat, blocked)
    assert [t.id for t in store.top_urgent_unblocked(10)] == [crit_bug, old_bug, new_bug, feat]
    assert store.top_urgent_unblocked(0) == []


def test_reopen_if_unmerged_routes_ticket_back():
    store = TicketStore()
    tid, _ = store.create_or_dedup(draft())
    for s in (TicketState.TODO, TicketState.IN_PROGRESS, TicketState.IN_REVIEW):
        store.transition(tid, s)
    pr = PullRequest("PR-1", tid, "h1", state=PRState.RETIRED)
    assert store.reopen_if_unmerged(pr) == tid
    assert store.get(tid).state is TicketState.TODO
    assert store.reopen_if_unmerged(PullRequest("PR-2", tid, "h2")) is None


def test_persist_round_trip_and_journal(tmp_path):
    store = TicketStore(tmp_path / "journal.log")
    tid, _ = store.create_or_dedup(draft())
    store.transition(tid, TicketState.TODO)
    store.persist(tmp_path / "t.json")
    back = TicketStore.load(tmp_path / "t.json")
    assert back.tickets == store.tickets and back.revision == store.revision
    assert back.create_or_dedup(draft())[1] == "deduplicated"
    assert len((tmp_path / "journal.log").read_text().splitlines()) == 2


def test_corrupt_store_reports_offset():
    with pytest.raises(CorruptStore) as exc:
        TicketStore.loads('{"revision": 1,,}')
    assert exc.value.offset == 15
