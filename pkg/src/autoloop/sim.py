"""Deterministic stand-ins for every external dependency of the loop."""

from __future__ import annotations

import random
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any

from . import serde
from .model import (
    CellStatus,
    ChangeKind,
    CoverageCell,
    Decision,
    FailureClass,
    FeatureCombo,
    FileChange,
    GateDecision,
    IterationRecord,
    OracleOutcome,
    OracleValue,
    Phase,
    Priority,
    PullRequest,
    SpecSurface,
    Ticket,
)
from .orchestrator import Adapters, Loop, LoopConfig, LoopState, SkillRequest, SkillResponse, SkillStatus, World
from .verification import (
    CanaryRunReport,
    Layer,
    LayerOutcome,
    OracleMode,
    OracleReport,
    ScenarioResult,
    default_catalog,
    inject_and_score,
    reference_verifiers,
    run_gate,
)

QUICK_SCENARIOS = 5


@dataclass(frozen=True)
class DefectSpec:
    signature: str
    fix_cost: int = 1
    regression_seed: FeatureCombo | None = None


@dataclass
class SimProduct:
    surface: SpecSurface
    defects: dict[FeatureCombo, DefectSpec] = field(default_factory=dict)
    revision: int = 0
    fixed: dict[FeatureCombo, int] = field(default_factory=dict)
    # revision -> combos broken by merged fixes at that revision
    broken_at: dict[str, tuple[FeatureCombo, ...]] = field(default_factory=lambda: {"r0": ()})
    oracle_cells: tuple[FeatureCombo, ...] = ()
    environmental_failure_iterations: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        for combo in self.defects:
            cell = self.surface.cell(combo)
            if cell is None or not cell.supported:
                raise ValueError(f"defect on {combo} outside the supported surface")
        if not self.oracle_cells:
            self.oracle_cells = tuple(c.combo for c in self.surface.supported_cells() if c.combo not in self.defects)

    @property
    def head(self) -> str:
        return f"r{self.revision}"

    def broken(self, revision: str | None = None) -> tuple[FeatureCombo, ...]:
        return self.broken_at.get(revision or self.head, ())

    def active_defect(self, combo: FeatureCombo) -> DefectSpec | None:
        if combo in self.defects and combo not in self.fixed:
            return self.defects[combo]
        return None


def build_sim(
    seed: int,
    dims: tuple[int, int, int],
    defect_rate: float,
    regression_link_rate: float,
) -> SimProduct:
    if not (0.0 <= defect_rate <= 1.0 and 0.0 <= regression_link_rate <= 1.0):
        raise ValueError("rates must lie in [0, 1]")
    rng = random.Random(seed)
    nf, np_, na = dims
    features = tuple(f"f{i}" for i in range(nf))
    platforms = tuple(f"p{i}" for i in range(np_))
    actions = tuple(f"a{i}" for i in range(na))
    cells = {}
    for f in features:
        for p in platforms:
            for a in actions:
                combo = FeatureCombo(f, p, a)
                # uniform priority so staleness rotates coverage across the whole matrix
                cells[combo] = CoverageCell(combo, Priority.P1)
    surface = SpecSurface(features, platforms, actions, cells)
    combos = sorted(cells)
    defective = [c for c in combos if rng.random() < defect_rate]
    healthy = [c for c in combos if c not in set(defective)]
    defects = {}
    for c in defective:
        seed_combo = rng.choice(healthy) if healthy and rng.random() < regression_link_rate else None
        defects[c] = DefectSpec(f"{c} returns wrong result", 1 + rng.randrange(2), seed_combo)
    return SimProduct(surface, defects)


@dataclass(frozen=True)
class ScriptConfig:
    seed: int = 0
    backlog_filler_target: int = 0
    ideate_sees_regressions: bool = False
    reject_prs: frozenset[str] = frozenset()
    gate_layers: tuple[Layer, ...] = (Layer.STRUCTURAL, Layer.FACTUAL, Layer.TEMPORAL, Layer.COGNITIVE)


@dataclass
class _OpenPR:
    head: str
    changes: tuple[FileChange, ...]
    fixes: FeatureCombo | None


@dataclass
class SimState:
    product: SimProduct
    script: ScriptConfig = ScriptConfig()
    fix_progress: dict[FeatureCombo, int] = field(default_factory=dict)
    branches: dict[str, _OpenPR] = field(default_factory=dict)  # head revision -> PR contents
    prs: dict[str, str] = field(default_factory=dict)  # PR id -> head revision
    filler_count: int = 0
    head_count: int = 0
    regression_events: list[tuple[int, str, FeatureCombo]] = field(default_factory=list)
    iteration: int = 0


@lru_cache(maxsize=16)
def _gate_metrics(layers: tuple[Layer, ...]) -> tuple[dict[str, float], float, dict[str, int], CanaryRunReport]:
    cat = default_catalog()
    verifiers = reference_verifiers(cat.reference, layers)
    report = inject_and_score(
        cat.real_items,
        cat.canaries,
        verifiers,
        degraded=lambda mode: reference_verifiers(cat.reference, layers, mode),
        seed=0,
        require_structural=False,
    )
    rates = {}
    for layer, key in ((Layer.STRUCTURAL, "l1"), (Layer.FACTUAL, "l2"), (Layer.TEMPORAL, "l3")):
        if layer not in layers:
            continue
        passed = 0
        for item in cat.real_items:
            res = run_gate(item, {layer: verifiers[layer]}, require_structural=False)
            passed += res.layers[0].outcome is LayerOutcome.PASS
        rates[key] = passed / len(cat.real_items)
    unverifiable = len(report.held) / len(cat.real_items)
    return rates, unverifiable, report.escapes_by_tier(), report


class SimForge:
    def __init__(self, sim: SimState):
        self.sim = sim

    def base_revision(self) -> str:
        return self.sim.product.head

    def open(self, pr: PullRequest) -> None:
        self.sim.prs[pr.id] = pr.head_revision

    def head(self, pr_id: str) -> str:
        return self.sim.prs[pr_id]

    def changes(self, pr_id: str) -> list[FileChange]:
        return list(self.sim.branches[self.sim.prs[pr_id]].changes)

    def force_push(self, pr_id: str, changes: tuple[FileChange, ...]) -> str:
        """Test hook: move a PR head to new contents."""
        old = self.sim.branches[self.sim.prs[pr_id]]
        self.sim.head_count += 1
        head = f"h{self.sim.head_count}"
        self.sim.branches[head] = _OpenPR(head, changes, old.fixes)
        self.sim.prs[pr_id] = head
        return head

    def merge(self, pr_id: str) -> str:
        product = self.sim.product
        branch = self.sim.branches[self.sim.prs[pr_id]]
        broken = set(product.broken())
        if branch.fixes is not None and product.active_defect(branch.fixes) is not None:
            spec = product.defects[branch.fixes]
            product.fixed[branch.fixes] = product.revision + 1
            if spec.regression_seed is not None:
                broken.add(spec.regression_seed)
                self.sim.regression_events.append((self.sim.iteration, pr_id, spec.regression_seed))
        product.revision += 1
        product.broken_at[product.head] = tuple(sorted(broken))
        return product.head

    def close(self, pr_id: str, comment: str) -> None:
        pass


class ScriptedSkills:
    """Phase behaviour driven by the sim product. All methods take and return wire documents."""

    def __init__(self, sim: SimState):
        self.sim = sim

    def _ok(self, payload: dict[str, Any]) -> SkillResponse:
        return SkillResponse(SkillStatus.OK, payload)

    def backlog(self, req: SkillRequest) -> SkillResponse:
        self.sim.iteration = req.payload["iteration"]
        tickets = [serde.from_doc(Ticket, t) for t in req.payload["tickets"]]
        waiting = [t for t in tickets if t.state.value in ("backlog", "todo")]
        new = []
        for _ in range(max(0, self.sim.script.backlog_filler_target - len(waiting))):
            self.sim.filler_count += 1
            n = self.sim.filler_count
            new.append({"title": f"Polish task {n}", "body": f"housekeeping item {n}", "label": "improvement", "priority": "low"})
        promote = sorted(t.id for t in tickets if t.state.value == "backlog")
        return self._ok({"tickets": new, "promote": promote})

    def ideate(self, req: SkillRequest) -> SkillResponse:
        scenario = req.payload["scenario"]
        product = self.sim.product
        findings, exercised = [], []
        for doc in scenario["combos"]:
            combo = serde.from_doc(FeatureCombo, doc)
            defect = product.active_defect(combo)
            regressed = self.sim.script.ideate_sees_regressions and combo in product.broken()
            if defect is not None or regressed:
                signature = defect.signature if defect is not None else f"{combo} regressed"
                findings.append(
                    {
                        "title": f"Bug: {signature}",
                        "body": f"Scenario {scenario['id']} failed on {combo}: {signature}",
                        "label": "bug",
                        "priority": "high",
                        "combo": doc,
                    }
                )
                exercised.append({"combo": doc, "status": CellStatus.FAILING.value})
            else:
                exercised.append({"combo": doc, "status": CellStatus.PASSING.value})
        return self._ok({"report": {"scenario": scenario["id"], "findings": len(findings)}, "findings": findings, "exercised": exercised})

    def triage(self, req: SkillRequest) -> SkillResponse:
        return self._ok({"tickets": list(req.payload["findings"])})

    def execute(self, req: SkillRequest) -> SkillResponse:
        ticket = serde.from_doc(Ticket, req.payload["ticket"])
        fixes = None
        if ticket.combo is not None:
            defect = self.sim.product.active_defect(ticket.combo)
            if defect is not None:
                progress = self.sim.fix_progress.get(ticket.combo, 0) + 1
                self.sim.fix_progress[ticket.combo] = progress
                if progress < defect.fix_cost:
                    return self._ok({"pr": None})
                fixes = ticket.combo
        feature = ticket.combo.feature if ticket.combo is not None else "core"
        changes = (
            FileChange(f"src/{feature}.py", ChangeKind.MODIFIED),
            FileChange(f"tests/test_{ticket.id.lower()}.py", ChangeKind.ADDED),
        )
        self.sim.head_count += 1
        head = f"h{self.sim.head_count}"
        self.sim.branches[head] = _OpenPR(head, changes, fixes)
        return self._ok(
            {
                "pr": {
                    "head_revision": head,
                    "changed_files": [serde.to_doc(c) for c in changes],
                    "includes_tests": True,
                    "expected_deletions": [],
                }
            }
        )

    def review(self, req: SkillRequest) -> SkillResponse:
        pr_id = req.payload["pr"]["id"]
        if pr_id in self.sim.script.reject_prs:
            return self._ok({"verdict": "reject", "notes": "scripted rejection"})
        return self._ok({"verdict": "approve"})

    def regress(self, req: SkillRequest) -> SkillResponse:
        product = self.sim.product
        revision = req.payload["revision"]
        iteration = req.payload.get("iteration", self.sim.iteration)
        cells = product.oracle_cells
        if req.payload.get("mode") == OracleMode.QUICK.value:
            cells = cells[:QUICK_SCENARIOS]
        env_down = iteration in product.environmental_failure_iterations
        broken = set(product.broken(revision))
        results = []
        for combo in cells:
            if env_down:
                outcome = OracleOutcome(OracleValue.FAIL, "environment unavailable")
            elif combo in broken:
                outcome = OracleOutcome(OracleValue.FAIL, f"{combo} no longer works")
            else:
                outcome = OracleOutcome(OracleValue.PASS, "")
            evidence = () if outcome.failed else (f"{combo} state delta verified at {revision}",)
            results.append(ScenarioResult(str(combo), outcome, evidence))
        report = OracleReport(OracleMode(req.payload.get("mode", "full")), revision, tuple(results), 0.0)
        rates, unverifiable, escapes, _ = _gate_metrics(tuple(self.sim.script.gate_layers))
        metrics = {
            "test_count": 100 + 2 * product.revision,
            "layer_pass_rates": rates,
            "unverifiable_rate": unverifiable,
            "canary_escapes": escapes,
        }
        return self._ok({"report": serde.to_doc(report), "metrics": metrics})

    def adapters(self) -> Adapters:
        return Adapters(
            skills={
                Phase.BACKLOG: self.backlog,
                Phase.IDEATE: self.ideate,
                Phase.TRIAGE: self.triage,
                Phase.EXECUTE: self.execute,
                Phase.REGRESS: self.regress,
            },
            reviewer=self.review,
            forge=SimForge(self.sim),
        )


# --- running ------------------------------------------------------------


@dataclass(frozen=True)
class SimulationReport:
    history: tuple[IterationRecord, ...]
    merged_prs: tuple[str, ...]
    gate_decisions: tuple[tuple[int, GateDecision], ...]
    canary_report: CanaryRunReport
    final_surface_status: dict[str, CellStatus]
    regression_events: tuple[tuple[int, str, FeatureCombo], ...]
    stop: str
    iteration: int
    starvation_counter: int
    drain_entries: int
    no_work_loops: int
    regression_failure_streak: int
    in_drain: bool


SIM_FILE = "sim.json"


def _load_sim(path: Path) -> SimState:
    return serde.loads(SimState, path.read_text(encoding="utf-8"))


def _save_sim(sim: SimState, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(serde.dumps(sim), encoding="utf-8")
    tmp.replace(path)


def make_report(state: LoopState, world: World, sim: SimState, stop: str) -> SimulationReport:
    _, _, _, canary = _gate_metrics(tuple(sim.script.gate_layers))
    return SimulationReport(
        history=tuple(state.history),
        merged_prs=tuple(m.pr_id for m in world.merges),
        gate_decisions=tuple((r.index, d) for r in state.history for d in r.decisions),
        canary_report=canary,
        final_surface_status={str(c.combo): c.status for c in world.surface.supported_cells()},
        regression_events=tuple(sim.regression_events),
        stop=stop,
        iteration=state.iteration,
        starvation_counter=state.starvation_counter,
        drain_entries=state.drain_entries,
        no_work_loops=state.no_work_loops,
        regression_failure_streak=state.regression_failure_streak,
        in_drain=state.in_drain,
    )


def open_sim_loop(
    sim: SimProduct,
    config: LoopConfig,
    state_dir: str | Path,
    *,
    script: ScriptConfig = ScriptConfig(),
) -> tuple[Loop, SimState]:
    """A Loop wired to scripted adapters. The sim is resumed from ``state_dir`` when present."""
    state_dir = Path(state_dir)
    state_dir.mkdir(parents=True, exist_ok=True)
    sim_path = state_dir / SIM_FILE
    state = _load_sim(sim_path) if sim_path.exists() else SimState(sim, script)
    if not sim_path.exists():
        _save_sim(state, sim_path)

    def checkpoint(loop_state: LoopState, record: IterationRecord, world: World) -> None:
        _save_sim(state, sim_path)

    skills = ScriptedSkills(state)
    loop = Loop(state_dir, config, skills.adapters(), surface=state.product.surface, after_iteration=checkpoint)
    return loop, state


def run_simulation(
    sim: SimProduct,
    config: LoopConfig,
    iterations: int,
    *,
    script: ScriptConfig = ScriptConfig(),
    state_dir: str | Path | None = None,
) -> SimulationReport:
    """Drive the loop until ``iterations`` have run in total, or a gate halts it."""
    if state_dir is None:
        with tempfile.TemporaryDirectory(prefix="autoloop-sim-") as tmp:
            return run_simulation(sim, config, iterations, script=script, state_dir=tmp)
    loop, state = open_sim_loop(sim, config, state_dir, script=script)
    result = loop.run(max(0, iterations - loop.state.iteration))
    return make_report(loop.state, loop.world, state, result.stop)


def report_doc(report: SimulationReport) -> str:
    return serde.dumps(report)


def summary_table(report: SimulationReport) -> str:
    lines = ["| iter | created | merged | open prs | oracle | class | decisions |", "|---|---|---|---|---|---|---|"]
    for r in report.history:
        m = r.metrics
        lines.append(
            "| {} | {} | {} | {} | {} | {} | {} |".format(
                r.index,
                r.prs_created,
                r.prs_merged,
                m.open_pr_count if m else "-",
                r.oracle_outcome.value.value if r.oracle_outcome else "-",
                r.failure_class.value if r.failure_class else "-",
                ", ".join(f"{d.gate.value}:{d.value.value}" for d in r.decisions) or "-",
            )
        )
    return "\n".join(lines) + "\n"


def first_decision(report: SimulationReport, value: Decision) -> int | None:
    return next((i for i, d in report.gate_decisions if d.value is value), None)


def regression_classified(report: SimulationReport) -> list[int]:
    return [r.index for r in report.history if r.failure_class is FailureClass.REGRESSION]
