"""Layered quality gate, anti-signal canaries, and the oracle contract.

The gate runs Structural -> Factual -> Temporal -> Cognitive and stops at the
first failing layer. ``Unverifiable`` is never a failure: an item whose
claims cannot be checked is held, not rejected.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from .model import OracleOutcome, OracleValue

log = logging.getLogger(__name__)


class Layer(str, Enum):
    STRUCTURAL = "structural"
    FACTUAL = "factual"
    TEMPORAL = "temporal"
    COGNITIVE = "cognitive"


LAYER_ORDER = (Layer.STRUCTURAL, Layer.FACTUAL, Layer.TEMPORAL, Layer.COGNITIVE)
LAYER_KEYS = {Layer.STRUCTURAL: "l1", Layer.FACTUAL: "l2", Layer.TEMPORAL: "l3", Layer.COGNITIVE: "l4"}


class LayerOutcome(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    UNVERIFIABLE = "unverifiable"


class Overall(str, Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    UNVERIFIABLE = "unverifiable"


class GateMisconfigured(ValueError):
    pass


@dataclass(frozen=True)
class Claim:
    path: str
    value: Any


@dataclass(frozen=True)
class GateItem:
    id: str
    payload: dict[str, Any]
    claims: tuple[Claim, ...] = ()
    timestamp: int = 0
    source: str = ""


@dataclass(frozen=True)
class LayerResult:
    layer: Layer
    outcome: LayerOutcome
    detail: str = ""


@dataclass(frozen=True)
class GateResult:
    item_id: str
    layers: tuple[LayerResult, ...]
    overall: Overall


Verifier = Callable[[GateItem], LayerResult]
VerifierMap = Mapping[Layer, Sequence[Verifier]]


def combine_layer(layer: Layer, results: Sequence[LayerResult]) -> LayerResult:
    """Fail beats Unverifiable beats Pass; details are joined in registration order."""
    for wanted in (LayerOutcome.FAIL, LayerOutcome.UNVERIFIABLE):
        hits = [r for r in results if r.outcome is wanted]
        if hits:
            return LayerResult(layer, wanted, "; ".join(r.detail for r in hits if r.detail))
    return LayerResult(layer, LayerOutcome.PASS, "")


def run_gate(item: GateItem, verifiers: VerifierMap, *, require_structural: bool = True) -> GateResult:
    """Run enabled layers in order. Layers absent from ``verifiers`` are disabled."""
    if require_structural and not verifiers.get(Layer.STRUCTURAL):
        raise GateMisconfigured("the structural layer needs at least one verifier")
    results: list[LayerResult] = []
    for layer in LAYER_ORDER:
        fns = verifiers.get(layer)
        if not fns:
            continue
        per_verifier = []
        for fn in fns:
            try:
                r = fn(item)
            except Exception as exc:  # a broken verifier must not decide the outcome
                log.warning("verifier crash on layer %s for %s: %s", layer.value, item.id, exc)
                r = LayerResult(layer, LayerOutcome.UNVERIFIABLE, f"verifier crash: {exc}")
            per_verifier.append(r)
        combined = combine_layer(layer, per_verifier)
        results.append(combined)
        if combined.outcome is LayerOutcome.FAIL:
            return GateResult(item.id, tuple(results), Overall.REJECTED)
    if any(r.outcome is LayerOutcome.UNVERIFIABLE for r in results):
        return GateResult(item.id, tuple(results), Overall.UNVERIFIABLE)
    return GateResult(item.id, tuple(results), Overall.ACCEPTED)


def overall_from(per_layer: Mapping[Layer, LayerOutcome], enabled: Iterable[Layer]) -> Overall:
    enabled = set(enabled)
    seen_unverifiable = False
    for layer in LAYER_ORDER:
        if layer not in enabled:
            continue
        out = per_layer[layer]
        if out is LayerOutcome.FAIL:
            return Overall.REJECTED
        seen_unverifiable |= out is LayerOutcome.UNVERIFIABLE
    return Overall.UNVERIFIABLE if seen_unverifiable else Overall.ACCEPTED


# --- reference rule engine ----------------------------------------------


class SourceUnavailable(Exception):
    pass


class ReferenceSource:
    """Ground-truth lookups for the factual layer. ``degradation`` simulates a failing dependency."""

    def __init__(self, reference: Mapping[str, Any], degradation: str | None = None):
        self.reference = reference
        self.degradation = degradation

    def entity(self, name: str) -> dict[str, Any] | None:
        if self.degradation == "timeout":
            raise SourceUnavailable("primary data source timed out")
        if self.degradation == "error":
            raise SourceUnavailable("price oracle returned an error response")
        record = self.reference["entities"].get(name)
        if record is None:
            return None
        record = {"status": record.get("status", "active"), "facts": dict(record.get("facts", {}))}
        if self.degradation == "partial":
            keys = sorted(record["facts"])
            record["facts"] = {k: record["facts"][k] for k in keys[: len(keys) // 2]}
            record["partial"] = True
        return record

    def event(self, event_id: str) -> dict[str, Any] | None:
        if self.degradation in ("timeout", "error"):
            raise SourceUnavailable(f"event lookup failed ({self.degradation})")
        return self.reference.get("events", {}).get(event_id)


def _get_path(payload: Mapping[str, Any], path: str) -> Any:
    cur: Any = payload
    for part in path.split("."):
        if not isinstance(cur, Mapping) or part not in cur:
            raise KeyError(path)
        cur = cur[part]
    return cur


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= 1e-6 * max(1.0, abs(a), abs(b))


def fingerprint(payload: Mapping[str, Any]) -> str:
    return f"{payload.get('entity', '')}:{payload.get('metric', '')}:{str(payload.get('title', '')).strip().lower()}"


def structural_verifier(reference: Mapping[str, Any]) -> Verifier:
    bounds = reference.get("metric_bounds", {})

    def check(item: GateItem) -> LayerResult:
        p = item.payload
        problems = []
        if not isinstance(p.get("entity"), str) or not p["entity"].strip():
            problems.append("missing entity identifier")
        if not str(p.get("title", "")).strip() and not str(p.get("description", "")).strip():
            problems.append("empty title and description")
        metric = p.get("metric")
        if metric not in bounds:
            problems.append(f"unknown metric {metric!r}")
        elif not _is_number(p.get("value")):
            problems.append("metric value is not a number")
        else:
            lo, hi = bounds[metric]
            if not lo <= p["value"] <= hi:
                problems.append(f"{metric} value {p['value']} outside [{lo}, {hi}]")
        conf = p.get("confidence")
        if not _is_number(conf) or not 0.0 <= conf <= 1.0:
            problems.append(f"confidence {conf!r} outside [0, 1]")
        if not isinstance(p.get("source"), str) or not p["source"].strip():
            problems.append("missing source")
        for key in ("event_time", "observed_at"):
            if not isinstance(p.get(key), int) or isinstance(p.get(key), bool):
                problems.append(f"{key} must be an integer timestamp")
        for claim in item.claims:
            try:
                _get_path(p, claim.path)
            except KeyError:
                problems.append(f"claim references missing field {claim.path!r}")
        if problems:
            return LayerResult(Layer.STRUCTURAL, LayerOutcome.FAIL, "; ".join(problems))
        return LayerResult(Layer.STRUCTURAL, LayerOutcome.PASS)

    return check


def factual_verifier(reference: Mapping[str, Any], source: ReferenceSource | None = None) -> Verifier:
    src = source or ReferenceSource(reference)
    authoritative = set(reference.get("authoritative_sources", []))
    thresholds = reference.get("thresholds", {})

    def check(item: GateItem) -> LayerResult:
        p = item.payload
        L = Layer.FACTUAL
        if p.get("source") not in authoritative:
            return LayerResult(L, LayerOutcome.FAIL, f"non-authoritative source {p.get('source')!r}")
        try:
            record = src.entity(p["entity"])
            event = src.event(p["event"]) if p.get("event") else None
        except SourceUnavailable as exc:
            return LayerResult(L, LayerOutcome.UNVERIFIABLE, str(exc))
        if record is None:
            return LayerResult(L, LayerOutcome.FAIL, f"entity {p['entity']!r} does not exist")
        if record["status"] != "active":
            return LayerResult(L, LayerOutcome.FAIL, f"entity {p['entity']!r} is {record['status']}")
        if p.get("event"):
            if event is None:
                return LayerResult(L, LayerOutcome.FAIL, f"event {p['event']!r} does not exist")
            if event["entity"] != p["entity"]:
                return LayerResult(L, LayerOutcome.FAIL, f"event {p['event']!r} concerns {event['entity']!r}, not {p['entity']!r}")
        facts = record["facts"]
        unverifiable = []
        for claim in item.claims:
            fact_name = p["metric"] if claim.path == "value" else claim.path.removeprefix("facts.")
            if fact_name not in facts:
                unverifiable.append(f"no reference fact for {claim.path!r}")
                continue
            if not _is_number(claim.value) or not _close(float(claim.value), float(facts[fact_name])):
                return LayerResult(L, LayerOutcome.FAIL, f"claim {claim.path}={claim.value!r} contradicts reference {facts[fact_name]!r}")
        if p.get("opportunity"):
            metric = p["metric"]
            if metric not in facts:
                unverifiable.append(f"no reference value for {metric!r}")
            elif metric in thresholds and facts[metric] < thresholds[metric]:
                return LayerResult(L, LayerOutcome.FAIL, f"{metric} now {facts[metric]} below threshold {thresholds[metric]}")
        if unverifiable:
            return LayerResult(L, LayerOutcome.UNVERIFIABLE, "; ".join(unverifiable))
        return LayerResult(L, LayerOutcome.PASS)

    return check


def temporal_verifier(reference: Mapping[str, Any], max_age: int | None = None) -> Verifier:
    now = reference["now"]
    age_limit = reference.get("max_age", 72) if max_age is None else max_age
    reported = set(reference.get("reported", []))
    events = reference.get("events", {})

    def check(item: GateItem) -> LayerResult:
        p = item.payload
        L = Layer.TEMPORAL
        if now - p["event_time"] > age_limit:
            return LayerResult(L, LayerOutcome.FAIL, f"stale: event is {now - p['event_time']} old (limit {age_limit})")
        end = p.get("event_end")
        if end is None and p.get("event") in events:
            end = events[p["event"]].get("end")
        if end is not None and end <= now:
            return LayerResult(L, LayerOutcome.FAIL, f"event already concluded at {end}")
        if fingerprint(p) in reported:
            return LayerResult(L, LayerOutcome.FAIL, "duplicate of an item already reported")
        window = p.get("window")
        if window is not None and window[1] < now - age_limit:
            return LayerResult(L, LayerOutcome.FAIL, f"analysis window {window} does not cover the current period")
        as_of = p.get("as_of")
        if as_of is not None and now - as_of > age_limit:
            return LayerResult(L, LayerOutcome.FAIL, f"data as of {as_of} presented as current")
        return LayerResult(L, LayerOutcome.PASS)

    return check


_OPS = {
    "diff": lambda before, after: after - before,
    "ratio": lambda before, after: after / before,
    "pct_change": lambda before, after: (after - before) / before * 100.0,
}


def cognitive_verifier(reference: Mapping[str, Any]) -> Verifier:
    strong = reference.get("strong_change", 10.0)

    def check(item: GateItem) -> LayerResult:
        p = item.payload
        L = Layer.COGNITIVE
        inputs = p.get("inputs")
        if not inputs:
            return LayerResult(L, LayerOutcome.PASS, "no reasoning to check")
        before, after = inputs.get("before"), inputs.get("after")
        if not (_is_number(before) and _is_number(after)) or before == 0:
            return LayerResult(L, LayerOutcome.UNVERIFIABLE, "inputs are incomplete")
        direction = "increase" if after > before else "decrease" if after < before else "flat"
        if "conclusion" in p and p["conclusion"] != direction:
            return LayerResult(L, LayerOutcome.FAIL, f"conclusion {p['conclusion']!r} but data shows {direction}")
        derived = p.get("derived")
        if derived:
            op = _OPS.get(derived.get("op"))
            if op is None:
                return LayerResult(L, LayerOutcome.UNVERIFIABLE, f"unknown derivation {derived.get('op')!r}")
            expected = op(before, after)
            if not _close(expected, float(derived["value"])):
                return LayerResult(L, LayerOutcome.FAIL, f"{derived['op']} should be {expected:.4g}, item says {derived['value']}")
        assessment = p.get("assessment")
        if assessment is not None:
            magnitude = abs(after - before) / abs(before) * 100.0
            fitting = "strong" if magnitude >= strong else "weak"
            if assessment in ("strong", "weak") and assessment != fitting:
                return LayerResult(L, LayerOutcome.FAIL, f"{assessment!r} assessment for a {magnitude:.1f}% change")
        return LayerResult(L, LayerOutcome.PASS)

    return check


_FACTORIES: dict[str, Callable[..., Verifier]] = {
    "schema": structural_verifier,
    "reference_crosscheck": factual_verifier,
    "freshness": temporal_verifier,
    "rules": cognitive_verifier,
}


def load_verifier_manifest(
    manifest: Mapping[str, Mapping[str, Mapping[str, Any]]],
    reference: Mapping[str, Any],
    degradation: str | None = None,
) -> dict[Layer, list[Verifier]]:
    """Build a verifier map from ``{layer: {verifier name: params}}``."""
    out: dict[Layer, list[Verifier]] = {}
    for layer_name, entries in manifest.items():
        layer = Layer(layer_name)
        for name, params in entries.items():
            if name not in _FACTORIES:
                raise GateMisconfigured(f"unknown verifier {name!r}")
            kwargs = dict(params or {})
            if name == "reference_crosscheck":
                kwargs["source"] = ReferenceSource(reference, degradation)
            out.setdefault(layer, []).append(_FACTORIES[name](reference, **kwargs))
    return out


DEFAULT_MANIFEST = {
    "structural": {"schema": {}},
    "factual": {"reference_crosscheck": {}},
    "temporal": {"freshness": {}},
    "cognitive": {"rules": {}},
}


def reference_verifiers(
    reference: Mapping[str, Any],
    layers: Iterable[Layer] = LAYER_ORDER,
    degradation: str | None = None,
) -> dict[Layer, list[Verifier]]:
    wanted = {Layer(x).value for x in layers}
    manifest = {k: v for k, v in DEFAULT_MANIFEST.items() if k in wanted}
    return load_verifier_manifest(manifest, reference, degradation)


# --- canaries -----------------------------------------------------------


class CanaryTier(str, Enum):
    T1 = "t1"
    T2 = "t2"
    T3 = "t3"
    T4 = "t4"
    API_DEGRADATION = "api_degradation"


@dataclass(frozen=True)
class CanaryDefinition:
    id: str
    tier: CanaryTier
    item: GateItem
    description: str = ""
    degradation: str | None = None

    @property
    def expects_rejection(self) -> bool:
        return self.tier is not CanaryTier.API_DEGRADATION


@dataclass(frozen=True)
class Catalog:
    reference: dict[str, Any]
    canaries: tuple[CanaryDefinition, ...]
    real_items: tuple[GateItem, ...] = ()


def _item_from_doc(doc: Mapping[str, Any]) -> GateItem:
    return GateItem(
        id=doc["id"],
        payload=dict(doc["payload"]),
        claims=tuple(Claim(c["path"], c["value"]) for c in doc.get("claims", [])),
        timestamp=doc.get("timestamp", doc["payload"].get("observed_at", 0)),
        source=doc.get("source", doc["payload"].get("source", "")),
    )


def parse_catalog(doc: Mapping[str, Any]) -> Catalog:
    canaries = tuple(
        CanaryDefinition(
            id=c["id"],
            tier=CanaryTier(c["tier"]),
            item=_item_from_doc({"id": c["id"], **c["item"]}),
            description=c.get("description", ""),
            degradation=c.get("degradation"),
        )
        for c in doc["canaries"]
    )
    real = tuple(_item_from_doc(d) for d in doc.get("real_items", []))
    return Catalog(doc["reference"], canaries, real)


def default_catalog() -> Catalog:
    text = resources.files("autoloop").joinpath("data/canaries.json").read_text(encoding="utf-8")
    return parse_catalog(json.loads(text))


@dataclass(frozen=True)
class TierScore:
    total: int = 0
    caught: int = 0
    escaped: int = 0

    @property
    def catch_rate(self) -> float:
        return self.caught / self.total if self.total else 1.0


@dataclass(frozen=True)
class CanaryRunReport:
    per_tier: dict[str, TierScore] = field(default_factory=dict)
    escapes: tuple[str, ...] = ()
    api_resilience: TierScore = TierScore()
    order: tuple[str, ...] = ()
    real_results: dict[str, Overall] = field(default_factory=dict)
    accepted: tuple[str, ...] = ()
    held: tuple[str, ...] = ()

    def escapes_by_tier(self) -> dict[str, int]:
        return {t: s.escaped for t, s in self.per_tier.items()}


@dataclass(frozen=True)
class _Slot:
    item: GateItem
    canary: CanaryDefinition | None = None


def inject_and_score(
    batch: Sequence[GateItem],
    canaries: Sequence[CanaryDefinition],
    verifiers: VerifierMap,
    *,
    degraded: Callable[[str], VerifierMap] | None = None,
    seed: int = 0,
    require_structural: bool = True,
) -> CanaryRunReport:
    """Shuffle canaries into ``batch``, gate everything, and score the canaries.

    ``degraded(mode)`` returns the verifier map to use while a dependency is
    failing; API-degradation canaries are gated with it.
    """
    batch_ids = {i.id for i in batch}
    clash = batch_ids & {c.id for c in canaries}
    if clash:
        raise ValueError(f"canary ids collide with batch ids: {sorted(clash)}")
    slots = [_Slot(i) for i in batch] + [_Slot(c.item, c) for c in canaries]
    random.Random(seed).shuffle(slots)

    scores: dict[str, list[int]] = {t.value: [0, 0, 0] for t in CanaryTier if t is not CanaryTier.API_DEGRADATION}
    api = [0, 0, 0]
    escapes: list[str] = []
    real_results: dict[str, Overall] = {}
    accepted: list[str] = []
    held: list[str] = []
    for slot in slots:
        canary = slot.canary
        vmap = verifiers
        if canary is not None and canary.degradation and degraded is not None:
            vmap = degraded(canary.degradation)
        result = run_gate(slot.item, vmap, require_structural=require_structural)
        if canary is None:
            real_results[slot.item.id] = result.overall
            if result.overall is Overall.ACCEPTED:
                accepted.append(slot.item.id)
            elif result.overall is Overall.UNVERIFIABLE:
                held.append(slot.item.id)
            continue
        if canary.tier is CanaryTier.API_DEGRADATION:
            factual = [r for r in result.layers if r.layer is Layer.FACTUAL]
            graceful = (
                result.overall is not Overall.ACCEPTED
                and bool(factual)
                and all(r.outcome is LayerOutcome.UNVERIFIABLE for r in factual)
            )
            api[0] += 1
            api[1 if graceful else 2] += 1
            if not graceful:
                escapes.append(canary.id)
            continue
        s = scores[canary.tier.value]
        s[0] += 1
        if result.overall is Overall.ACCEPTED:
            s[2] += 1
            escapes.append(canary.id)
        else:
            s[1] += 1
    return CanaryRunReport(
        per_tier={t: TierScore(*v) for t, v in scores.items()},
        escapes=tuple(escapes),
        api_resilience=TierScore(*api),
        order=tuple(s.item.id for s in slots),
        real_results=real_results,
        accepted=tuple(accepted),
        held=tuple(held),
    )


# --- test completeness --------------------------------------------------


class VerificationLayer(str, Enum):
    COMPILATION = "compilation"
    EXECUTION = "execution"
    OUTPUT_PARSING = "output_parsing"
    STATE_DELTAS = "state_deltas"


class Completeness(str, Enum):
    COMPLETE = "complete"
    INCOMPLETE = "incomplete"
    DANGEROUSLY_INCOMPLETE = "dangerously_incomplete"


@dataclass(frozen=True)
class TestVerificationRecord:
    __test__ = False

    test_id: str
    layers_present: frozenset[VerificationLayer]
    failure_mode_test: bool = False
    conservation_asserted: bool = False


def validate_test_completeness(record: TestVerificationRecord) -> Completeness:
    V = VerificationLayer
    present = record.layers_present
    if record.failure_mode_test:
        needed = {V.COMPILATION, V.EXECUTION, V.STATE_DELTAS}
        if needed <= present and record.conservation_asserted:
            return Completeness.COMPLETE
        return Completeness.INCOMPLETE
    if present >= set(V):
        return Completeness.COMPLETE
    if {V.COMPILATION, V.EXECUTION} <= present and V.STATE_DELTAS not in present:
        return Completeness.DANGEROUSLY_INCOMPLETE
    return Completeness.INCOMPLETE


# --- regression oracle contract -----------------------------------------


class OracleMode(str, Enum):
    FULL = "full"
    QUICK = "quick"


@dataclass(frozen=True)
class ScenarioResult:
    scenario_id: str
    outcome: OracleOutcome
    evidence: tuple[str, ...] = ()


@dataclass(frozen=True)
class OracleReport:
    mode: OracleMode
    revision: str
    scenarios: tuple[ScenarioResult, ...] = ()
    duration: float = 0.0


class RegressionOracle(Protocol):
    def run(self, mode: OracleMode, revision: str) -> OracleReport: ...


def check_oracle_report(report: OracleReport) -> list[str]:
    """Contract violations: a scenario pass must carry ground-truth state-delta evidence."""
    return [
        f"{s.scenario_id}: pass without state-delta evidence"
        for s in report.scenarios
        if not s.outcome.failed and not s.evidence
    ]


def aggregate_oracle(report: OracleReport) -> tuple[OracleOutcome, float | None]:
    """Collapse per-scenario results into one outcome plus the scenario pass fraction."""
    if not report.scenarios:
        return OracleOutcome(OracleValue.PASS_HOLD, "no scenarios ran"), None
    unproven = {s.scenario_id for s in report.scenarios if not s.outcome.failed and not s.evidence}
    failed = [s for s in report.scenarios if s.outcome.failed or s.scenario_id in unproven]
    rate = 1.0 - len(failed) / len(report.scenarios)
    if failed:
        detail = "; ".join(
            f"{s.scenario_id}: {s.outcome.detail or 'pass without state-delta evidence'}" for s in failed
        )
        return OracleOutcome(OracleValue.FAIL, detail), rate
    values = {s.outcome.value for s in report.scenarios}
    if OracleValue.PASS_CAVEAT in values:
        caveats = "; ".join(s.outcome.detail for s in report.scenarios if s.outcome.value is OracleValue.PASS_CAVEAT)
        return OracleOutcome(OracleValue.PASS_CAVEAT, caveats), rate
    if OracleValue.PASS_HOLD in values:
        return OracleOutcome(OracleValue.PASS_HOLD, "some scenarios held"), rate
    return OracleOutcome(OracleValue.PASS, f"{len(report.scenarios)} scenarios passed"), rate
