from __future__ import annotations

import itertools
from dataclasses import replace

import pytest

from autoloop.model import OracleOutcome, OracleValue
from autoloop.verification import (
    LAYER_ORDER,
    CanaryTier,
    Completeness,
    GateItem,
    GateMisconfigured,
    Layer,
    LayerOutcome,
    LayerResult,
    OracleMode,
    OracleReport,
    Overall,
    ScenarioResult,
    TestVerificationRecord,
    VerificationLayer,
    aggregate_oracle,
    check_oracle_report,
    default_catalog,
    inject_and_score,
    load_verifier_manifest,
    overall_from,
    reference_verifiers,
    run_gate,
    validate_test_completeness,
)

CAT = default_catalog()
ALL = reference_verifiers(CAT.reference)


def fixed(layer, outcome):
    return lambda item: LayerResult(layer, outcome, outcome.value)


def test_catalog_shape():
    tiers = [c.tier for c in CAT.canaries]
    counts = {t: tiers.count(t) for t in CanaryTier}
    assert counts == {CanaryTier.T1: 6, CanaryTier.T2: 5, CanaryTier.T3: 5, CanaryTier.T4: 5, CanaryTier.API_DEGRADATION: 3}
    assert len({c.id for c in CAT.canaries}) == 24


def test_first_fail_short_circuits():
    calls = []
    spy = lambda item: calls.append(item.id) or LayerResult(Layer.FACTUAL, LayerOutcome.PASS)
    res = run_gate(GateItem("x", {}), {Layer.STRUCTURAL: [fixed(Layer.STRUCTURAL, LayerOutcome.FAIL)], Layer.FACTUAL: [spy]})
    assert res.overall is Overall.REJECTED and len(res.layers) == 1 and calls == []


def test_unverifiable_is_neutral_and_later_fail_still_rejects():
    v = {
        Layer.STRUCTURAL: [fixed(Layer.STRUCTURAL, LayerOutcome.PASS)],
        Layer.FACTUAL: [fixed(Layer.FACTUAL, LayerOutcome.UNVERIFIABLE)],
        Layer.TEMPORAL: [fixed(Layer.TEMPORAL, LayerOutcome.PASS)],
    }
    assert run_gate(GateItem("x", {}), v).overall is Overall.UNVERIFIABLE
    v[Layer.COGNITIVE] = [fixed(Layer.COGNITIVE, LayerOutcome.FAIL)]
    res = run_gate(GateItem("x", {}), v)
    assert res.overall is Overall.REJECTED and len(res.layers) == 4


def test_verifier_crash_is_unverifiable():
    def boom(item):
        raise RuntimeError("lookup exploded")

    v = {Layer.STRUCTURAL: [fixed(Layer.STRUCTURAL, LayerOutcome.PASS)], Layer.FACTUAL: [boom]}
    res = run_gate(GateItem("x", {}), v)
    assert res.overall is Overall.UNVERIFIABLE and "crash" in res.layers[1].detail


def test_structural_layer_required_by_default():
    with pytest.raises(GateMisconfigured):
        run_gate(GateItem("x", {}), {Layer.FACTUAL: [fixed(Layer.FACTUAL, LayerOutcome.PASS)]})
    assert run_gate(GateItem("x", {}), {}, require_structural=False).overall is Overall.ACCEPTED


def test_unknown_manifest_entry():
    with pytest.raises(GateMisconfigured):
        load_verifier_manifest({"factual": {"crystal_ball": {}}}, CAT.reference)


@pytest.mark.parametrize("outcomes", list(itertools.product(list(LayerOutcome), repeat=4)))
def test_run_gate_agrees_with_overall_from(outcomes):
    per_layer = dict(zip(LAYER_ORDER, outcomes))
    v = {layer: [fixed(layer, out)] for layer, out in per_layer.items()}
    assert run_gate(GateItem("x", {}), v).overall is overall_from(per_layer, LAYER_ORDER)


def test_every_rejection_canary_is_rejected_with_all_layers():
    for c in CAT.canaries:
        if c.expects_rejection:
            assert run_gate(c.item, ALL).overall is Overall.REJECTED, c.id


def test_temporal_canaries_fail_only_on_temporal():
    for cid in ("t2-concluded-event", "t2-stale-trend"):
        item = next(c.item for c in CAT.canaries if c.id == cid)
        per_layer = {
            layer: run_gate(item, reference_verifiers(CAT.reference, [layer]), require_structural=False).layers[0].outcome
            for layer in LAYER_ORDER
        }
        assert [l for l, o in per_layer.items() if o is LayerOutcome.FAIL] == [Layer.TEMPORAL], cid


@pytest.mark.parametrize("mode", ["timeout", "error", "partial"])
def test_api_degradation_is_unverifiable_not_rejected(mode):
    c = next(c for c in CAT.canaries if c.degradation == mode)
    res = run_gate(c.item, reference_verifiers(CAT.reference, LAYER_ORDER, mode))
    assert res.overall is Overall.UNVERIFIABLE
    assert [r.outcome for r in res.layers if r.layer is Layer.FACTUAL] == [LayerOutcome.UNVERIFIABLE]


def test_real_items_are_accepted():
    assert {run_gate(i, ALL).overall for i in CAT.real_items} == {Overall.ACCEPTED}


def test_canary_identity_does_not_leak_into_the_verdict():
    # same content under an innocuous id and no description gets the same verdict
    for c in CAT.canaries:
        disguised = replace(c.item, id="r-ordinary-item")
        assert run_gate(disguised, ALL).overall is run_gate(c.item, ALL).overall, c.id


@pytest.mark.parametrize("seed", range(4))
def test_real_item_results_independent_of_canaries(seed):
    alone = {i.id: run_gate(i, ALL).overall for i in CAT.real_items}
    mixed = inject_and_score(CAT.real_items, CAT.canaries, ALL, seed=seed)
    assert mixed.real_results == alone
    assert set(mixed.order) == {i.id for i in CAT.real_items} | {c.id for c in CAT.canaries}


def test_injection_order_is_seeded():
    a = inject_and_score(CAT.real_items, CAT.canaries, ALL, seed=1).order
    assert a == inject_and_score(CAT.real_items, CAT.canaries, ALL, seed=1).order
    assert a != inject_and_score(CAT.real_items, CAT.canaries, ALL, seed=2).order


def test_id_clash_rejected():
    with pytest.raises(ValueError):
        inject_and_score([CAT.canaries[0].item], CAT.canaries, ALL)


# --- test completeness -------------------------------------------------------

V = VerificationLayer


@pytest.mark.parametrize(
    "layers, failure_mode, conservation, expected",
    [
        (set(V), False, False, Completeness.COMPLETE),
        ({V.COMPILATION, V.EXECUTION}, False, False, Completeness.DANGEROUSLY_INCOMPLETE),
        ({V.COMPILATION, V.EXECUTION, V.OUTPUT_PARSING}, False, False, Completeness.DANGEROUSLY_INCOMPLETE),
        ({V.COMPILATION, V.EXECUTION, V.STATE_DELTAS}, False, False, Completeness.INCOMPLETE),
        ({V.COMPILATION}, False, False, Completeness.INCOMPLETE),
        ({V.COMPILATION, V.EXECUTION, V.STATE_DELTAS}, True, True, Completeness.COMPLETE),
        ({V.COMPILATION, V.EXECUTION, V.STATE_DELTAS}, True, False, Completeness.INCOMPLETE),
    ],
)
def test_completeness_table(layers, failure_mode, conservation, expected):
    rec = TestVerificationRecord("t", frozenset(layers), failure_mode, conservation)
    assert validate_test_completeness(rec) is expected


# --- oracle contract -----------------------------------------------------------


def report(*results):
    return OracleReport(OracleMode.FULL, "r1", tuple(results))


def test_pass_without_evidence_counts_as_failure():
    r = report(ScenarioResult("s:1", OracleOutcome(OracleValue.PASS)), ScenarioResult("s2", OracleOutcome(OracleValue.PASS), ("delta",)))
    assert check_oracle_report(r) == ["s:1: pass without state-delta evidence"]
    outcome, rate = aggregate_oracle(r)
    assert outcome.failed and rate == 0.5


def test_aggregate_values():
    assert aggregate_oracle(report())[0].value is OracleValue.PASS_HOLD
    ok = ScenarioResult("a", OracleOutcome(OracleValue.PASS), ("d",))
    cav = ScenarioResult("b", OracleOutcome(OracleValue.PASS_CAVEAT, "slow"), ("d",))
    assert aggregate_oracle(report(ok)) == (OracleOutcome(OracleValue.PASS, "1 scenarios passed"), 1.0)
    out, rate = aggregate_oracle(report(ok, cav))
    assert out.value is OracleValue.PASS_CAVEAT and rate == 1.0
