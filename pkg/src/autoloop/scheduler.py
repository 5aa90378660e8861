"""Scenario selection over the coverage matrix."""

from __future__ import annotations

import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .model import (
    CellStatus,
    CoverageCell,
    Deliverable,
    FeatureCombo,
    Priority,
    Scenario,
    SpecSurface,
    Tier,
    TicketState,
)
from .tickets import UnknownTicket

TIER_ORDER = (Tier.FOUNDATION, Tier.COMPOSITION, Tier.FRONTIER)
_PRIORITY_ORDER = {Priority.P0: 0, Priority.P1: 1, Priority.P2: 2, Priority.P3: 3}
_STATUS_ORDER = {CellStatus.UNTESTED: 0, CellStatus.FAILING: 1, CellStatus.PASSING: 2}
TRIPLE_PROBABILITY = 0.2


class Exhausted(Exception):
    def __init__(self, tier: Tier):
        super().__init__(f"no eligible work for tier {tier.value}")
        self.tier = tier


@dataclass(frozen=True)
class TierWeights:
    foundation: float = 0.30
    composition: float = 0.50
    frontier: float = 0.20

    def __post_init__(self) -> None:
        ws = (self.foundation, self.composition, self.frontier)
        if any(not 0.0 <= w <= 1.0 for w in ws):
            raise ValueError(f"tier weights must lie in [0, 1]: {ws}")
        if abs(sum(ws) - 1.0) > 1e-9:
            raise ValueError(f"tier weights must sum to 1: {ws}")

    def weight(self, tier: Tier) -> float:
        return {Tier.FOUNDATION: self.foundation, Tier.COMPOSITION: self.composition, Tier.FRONTIER: self.frontier}[tier]


def choose_tier(weights: TierWeights, rng: random.Random) -> Tier:
    """Inverse-CDF draw over the three tiers using one ``rng.random()`` call."""
    u = rng.random()
    acc = 0.0
    for tier in TIER_ORDER:
        w = weights.weight(tier)
        acc += w
        if u < acc and w > 0:
            return tier
    # u landed in the rounding slack above the cumulative sum
    return next(t for t in reversed(TIER_ORDER) if weights.weight(t) > 0)


def composition_pair_count(n: int) -> int:
    if n < 0:
        raise ValueError("feature count must be non-negative")
    return n * (n - 1) // 2


# --- blocked combos -----------------------------------------------------


@dataclass
class BlockedCombosRegistry:
    entries: dict[FeatureCombo, str] = field(default_factory=dict)

    def block(self, combo: FeatureCombo, ticket_id: str, ticket_state: TicketState | None) -> None:
        if ticket_state is None:
            raise UnknownTicket(ticket_id)
        if ticket_state is TicketState.DONE:
            raise ValueError(f"ticket {ticket_id} is already done")
        self.entries[combo] = ticket_id

    def unblock_on_resolution(self, ticket_id: str) -> list[FeatureCombo]:
        gone = sorted(c for c, t in self.entries.items() if t == ticket_id)
        for c in gone:
            del self.entries[c]
        return gone

    def purge(self, ticket_state: Callable[[str], TicketState | None]) -> list[FeatureCombo]:
        """Drop entries whose blocking ticket is missing or done."""
        stale = sorted(c for c, t in self.entries.items() if ticket_state(t) in (None, TicketState.DONE))
        for c in stale:
            del self.entries[c]
        return stale

    def __contains__(self, combo: object) -> bool:
        return combo in self.entries


def block_combo(registry: BlockedCombosRegistry, combo: FeatureCombo, ticket_id: str, tickets) -> None:
    """``tickets`` is a TicketStore (or anything with a ``tickets`` mapping)."""
    t = tickets.tickets.get(ticket_id)
    registry.block(combo, ticket_id, t.state if t is not None else None)


def unblock_on_resolution(registry: BlockedCombosRegistry, ticket_id: str) -> list[FeatureCombo]:
    return registry.unblock_on_resolution(ticket_id)


# --- exercise memory ----------------------------------------------------


def pair_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass
class ExerciseHistory:
    """Last iteration each combo and each unordered feature pair was exercised."""

    combos: dict[FeatureCombo, int] = field(default_factory=dict)
    pairs: dict[str, int] = field(default_factory=dict)

    @staticmethod
    def _pair_id(a: str, b: str) -> str:
        x, y = pair_key(a, b)
        return f"{x}+{y}"

    def record(self, scenario: Scenario, iteration: int) -> None:
        for c in scenario.combos:
            self.combos[c] = iteration
        feats = sorted({c.feature for c in scenario.combos})
        for a, b in itertools.combinations(feats, 2):
            self.pairs[self._pair_id(a, b)] = iteration

    def pair_exercised(self, a: str, b: str) -> bool:
        return self._pair_id(a, b) in self.pairs

    def pair_last(self, a: str, b: str) -> int | None:
        return self.pairs.get(self._pair_id(a, b))


# --- selection ----------------------------------------------------------


def _eligible(surface: SpecSurface, registry: BlockedCombosRegistry) -> list[CoverageCell]:
    return [
        c
        for c in surface.supported_cells()
        if c.combo not in registry and c.status is not CellStatus.BLOCKED
    ]


def _foundation_key(cell: CoverageCell, history: ExerciseHistory) -> tuple:
    last = history.combos.get(cell.combo, cell.last_exercised)
    return (
        _PRIORITY_ORDER[cell.priority],
        -1 if last is None else last,
        _STATUS_ORDER.get(cell.status, 3),
        cell.combo,
    )


def _best_cell(cells: Iterable[CoverageCell], history: ExerciseHistory) -> CoverageCell:
    return min(cells, key=lambda c: _foundation_key(c, history))


def next_scenario(
    surface: SpecSurface,
    registry: BlockedCombosRegistry,
    tier: Tier,
    history: ExerciseHistory,
    rng: random.Random,
    *,
    frontier_candidates: Iterable[str] = (),
    scenario_id: str = "S",
) -> Scenario:
    eligible = _eligible(surface, registry)

    if tier is Tier.FOUNDATION:
        if not eligible:
            raise Exhausted(tier)
        cell = _best_cell(eligible, history)
        return Scenario(
            scenario_id,
            Tier.FOUNDATION,
            (cell.combo,),
            Deliverable.WORKING_SCENARIO,
            f"exercise {cell.combo} on the happy path",
        )

    if tier is Tier.COMPOSITION:
        by_feature: dict[str, list[CoverageCell]] = {}
        for c in eligible:
            by_feature.setdefault(c.combo.feature, []).append(c)
        feats = sorted(by_feature)
        pairs = list(itertools.combinations(feats, 2))
        if not pairs:
            raise Exhausted(tier)
        fresh = [p for p in pairs if not history.pair_exercised(*p)]
        if fresh:
            chosen = list(rng.choice(fresh))
        else:
            # every pair seen: revisit the stalest, ties lexicographic
            chosen = list(min(pairs, key=lambda p: (history.pair_last(*p), p)))
        want_triple = rng.random() < TRIPLE_PROBABILITY
        if want_triple and fresh:
            thirds = [
                f
                for f in feats
                if f not in chosen and all(not history.pair_exercised(f, g) for g in chosen)
            ]
            if thirds:
                chosen.append(rng.choice(thirds))
        combos = tuple(_best_cell(by_feature[f], history).combo for f in sorted(chosen))
        return Scenario(
            scenario_id,
            Tier.COMPOSITION,
            combos,
            Deliverable.WORKING_SCENARIO,
            "combine " + " + ".join(sorted(chosen)),
        )

    known = set(surface.features)
    candidates = sorted({c for c in frontier_candidates if c and c not in known})
    if not candidates:
        raise Exhausted(tier)
    target = rng.choice(candidates)
    anchor = (_best_cell(eligible, history).combo,) if eligible else ()
    return Scenario(
        scenario_id,
        Tier.FRONTIER,
        anchor,
        Deliverable.GAP_ANALYSIS,
        f"what is missing to use {target} alongside existing features",
        gap_target=target,
    )


def next_scenario_with_fallback(
    surface: SpecSurface,
    registry: BlockedCombosRegistry,
    tier: Tier,
    history: ExerciseHistory,
    rng: random.Random,
    **kwargs,
) -> Scenario | None:
    """Try ``tier`` first, then the remaining tiers in canonical order."""
    for t in (tier, *[x for x in TIER_ORDER if x is not tier]):
        try:
            return next_scenario(surface, registry, t, history, rng, **kwargs)
        except Exhausted:
            continue
    return None


def three_sigma(weight: float, k: int) -> float:
    return 3.0 * math.sqrt(weight * (1.0 - weight) / k)
