from __future__ import annotations

import pytest

from autoloop import serde
from autoloop.deliberation import (
    Conclusion,
    IssueStatus,
    PanelSizeUnsupported,
    ReviewerFinding,
    ScriptedDebater,
    Turn,
    classify_findings,
    convergence_check,
    corpus_metrics,
    load_corpus,
    new_session,
    open_round_blind,
    run_round,
    run_session,
    save_session,
)


def test_finding_key_normalizes_wording():
    a = ReviewerFinding.of("r1", "Security", "api.py:10", "The token is logged in plain text")
    b = ReviewerFinding.of("r2", "security ", "API.py:10", "token is LOGGED in plain text!")
    assert a.key == b.key
    buckets = classify_findings({"r1": [a], "r2": [b], "r3": []})
    assert buckets.majority == {a.key}


@pytest.mark.parametrize("n", [0, 1, 2, 4])
def test_panel_must_have_three(n):
    with pytest.raises(PanelSizeUnsupported):
        classify_findings({f"r{i}": [] for i in range(n)})


def test_duplicate_flags_from_one_reviewer_count_once():
    b = classify_findings({"r1": ["k", "k", "k"], "r2": [], "r3": []})
    assert b.solo == {"k"}


def test_session_validation():
    with pytest.raises(ValueError):
        new_session("t", ["solo"])
    with pytest.raises(ValueError):
        new_session("t", ["a", "a"])
    with pytest.raises(ValueError):
        new_session("t", ["a", "moderator"])


def test_blind_opening_sees_no_other_position():
    a = ScriptedDebater("a", opening="SENTINEL-A position")
    b = ScriptedDebater("b", opening="SENTINEL-B position")
    s = open_round_blind(new_session("t", ["a", "b"]), {"a": a, "b": b})
    for d in (a, b):
        assert len(d.seen) == 1 and d.seen[0].transcript == ()
        assert "SENTINEL" not in serde.dumps(d.seen[0])
    assert {e.content for e in s.transcript} == {"SENTINEL-A position", "SENTINEL-B position"}
    with pytest.raises(ValueError):
        open_round_blind(s, {"a": a, "b": b})


def test_moderator_notes_never_reach_debaters():
    a, b = ScriptedDebater("a"), ScriptedDebater("b")
    s = new_session("t", ["a", "b"], moderator_notes="MODERATOR-SECRET steer towards yes")
    run_session(s, {"a": a, "b": b})
    assert all("MODERATOR-SECRET" not in serde.dumps(r) for r in a.seen + b.seen)


def test_later_rounds_see_prior_transcript_and_open_issues():
    a = ScriptedDebater("a", {1: Turn("raise", raise_issues=("cost",))})
    b = ScriptedDebater("b")
    s = open_round_blind(new_session("t", ["a", "b"]), {"a": a, "b": b})
    s = run_round(s, {"a": a, "b": b})
    req = b.seen[-1]
    assert req.round == 1 and [i.id for i in req.open_issues] == ["I1"]
    assert any(e.speaker == "a" and e.round == 1 for e in req.transcript)


def test_issue_lifecycle_rules():
    a = ScriptedDebater(
        "a",
        {1: Turn("x", raise_issues=("one", "two")), 2: Turn("y", resolve=(("I9", "nope"),)), 3: Turn("z", ratify=("I1",))},
    )
    b = ScriptedDebater("b", {2: Turn("fix", resolve=(("I1", "done"), ("I2", "done")), ratify=("I1",))})
    s = open_round_blind(new_session("t", ["a", "b"]), {"a": a, "b": b})
    for _ in range(3):
        s = run_round(s, {"a": a, "b": b})
    assert [i.id for i in s.issues] == ["I1", "I2"]
    assert all(i.status is IssueStatus.RESOLVED for i in s.issues)
    # only the raiser may ratify; b's ratification was ignored
    assert [(r.issue_id, r.ratified_by) for r in s.ratifications] == [("I1", "a")]
    assert any("I9" in w for w in s.warnings)
    assert convergence_check(s).unratified == ("I2",)


def test_re_resolution_clears_ratification():
    a = ScriptedDebater("a", {1: Turn("x", raise_issues=("one",)), 2: Turn("ok", ratify=("I1",))})
    b = ScriptedDebater("b", {1: Turn("fix", resolve=(("I1", "v1"),)), 2: Turn("again", resolve=(("I1", "v2"),))})
    s = open_round_blind(new_session("t", ["a", "b"]), {"a": a, "b": b})
    s = run_round(run_round(s, {"a": a, "b": b}), {"a": a, "b": b})
    assert s.ratifications == ()


def test_crash_down_to_one_debater_blocks():
    a = ScriptedDebater("a")
    b = ScriptedDebater("b", crash_on=frozenset({1}))
    s, report = run_session(new_session("t", ["a", "b"]), {"a": a, "b": b})
    assert report.conclusion is Conclusion.BLOCKED and "fewer than two" in report.reason
    assert s.active == ("a",) and any("crashed" in w for w in s.warnings)


def test_crash_with_three_debaters_continues():
    ds = {"a": ScriptedDebater("a"), "b": ScriptedDebater("b"), "c": ScriptedDebater("c", crash_on=frozenset({0}))}
    s, report = run_session(new_session("t", list(ds)), ds)
    assert s.active == ("a", "b") and report.rounds == 3
    # no issues and no kill gate: the session itself is fine, the kill gate is not
    assert report.reason == "KillGateUnsatisfied"


def test_round_cap_enforced():
    s = new_session("t", ["a", "b"], max_rounds=1)
    ds = {"a": ScriptedDebater("a"), "b": ScriptedDebater("b")}
    s = run_round(open_round_blind(s, ds), ds)
    with pytest.raises(ValueError):
        run_round(s, ds)


def test_corpus_metrics_zero_denominators_and_round_trip(tmp_path):
    ds = {"a": ScriptedDebater("a"), "b": ScriptedDebater("b")}
    s, _ = run_session(new_session("quiet", ["a", "b"], max_rounds=2), ds)
    save_session(s, tmp_path / "s1.json")
    corpus = load_corpus(tmp_path)
    assert corpus == [s]
    m = corpus_metrics(corpus)
    assert (m.dcr, m.round_efficiency, m.ratification_rate, m.flags) == (0.0, 0.0, 0.0, ())
    with pytest.raises(ValueError):
        corpus_metrics([])
