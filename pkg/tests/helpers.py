"""Fixtures shared by several test modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from autoloop.model import FeatureCombo
from autoloop.orchestrator import LoopConfig
from autoloop.sim import DefectSpec, SimProduct, build_sim
from autoloop.uat import CardStep, EvaluatorRequest, StepEvidence, TestCard


def tiny_regression_sim(env_iterations=()) -> SimProduct:
    """One feature, three actions: fixing a0 breaks a1, which the oracle covers."""
    surface = build_sim(0, (1, 1, 3), 0.0, 0.0).surface
    a0, a1 = FeatureCombo("f0", "p0", "a0"), FeatureCombo("f0", "p0", "a1")
    product = SimProduct(surface, {a0: DefectSpec("a0 returns wrong result", 1, a1)})
    product.environmental_failure_iterations = frozenset(env_iterations)
    return product


def defect_free_sim(dims=(3, 2, 2)) -> SimProduct:
    return build_sim(0, dims, 0.0, 0.0)


def drain_config() -> LoopConfig:
    # three PRs opened and one merged per normal iteration
    return LoopConfig(polish_pr_limit=1, execute_ticket_limit=3)


@dataclass
class ScriptedEvaluator:
    """Replays canned step results; optionally writes files into the workspace first."""

    id: str = "scripted"
    outputs: dict[int, tuple[bytes | None, int | None]] = field(default_factory=dict)
    unrunnable: dict[int, str] = field(default_factory=dict)
    writes: dict[str, str] = field(default_factory=dict)
    seen: list[EvaluatorRequest] = field(default_factory=list)
    omit_first: bool = False
    calls: int = 0

    def evaluate(self, request: EvaluatorRequest, workspace: Path) -> list[StepEvidence]:
        self.seen.append(request)
        self.calls += 1
        for rel, text in self.writes.items():
            p = workspace / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(text, encoding="utf-8")
        out = []
        for step in request.steps:
            if step.index in self.unrunnable:
                out.append(StepEvidence(step.index, None, None, unrunnable=self.unrunnable[step.index]))
                continue
            raw, code = self.outputs.get(step.index, (b"", 0))
            if self.omit_first and self.calls == 1:
                raw = None
            out.append(StepEvidence(step.index, raw, code, 1.0, 2.0))
        return out


def backtest_card(pr_id: str = "PR-7") -> TestCard:
    """Start the service, submit a job, poll it, then send a malformed request."""
    return TestCard(
        pr_id,
        (
            CardStep("./serve --port 8000 --detach", 0, ("listening",)),
            CardStep("curl -s -X POST http://localhost:8000/api/v1/backtest -d @job.json", 0, ('"job_id"',)),
            CardStep("curl -s http://localhost:8000/api/v1/backtest/1 --fail", 0, ('"status": "done"', '"pnl"')),
            CardStep("curl -s -X POST http://localhost:8000/api/v1/backtest -d '{}' --fail", 22, (), True),
        ),
        fixtures=("job.json",),
        notes="a submitted job completes and reports non-empty pnl",
    )


BACKTEST_PASS = {
    0: (b"listening on 8000\n", 0),
    1: (b'{"job_id": 1}\n', 0),
    2: (b'{"status": "done", "pnl": [1.5, -0.2]}\n', 0),
    3: (b"curl: (22) The requested URL returned error: 400\n", 22),
}


def product_tree(root: Path) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    (root / "serve").write_text("#!/bin/sh\necho listening\n", encoding="utf-8")
    (root / "job.json").write_text('{"strategy": "momentum"}\n', encoding="utf-8")
    return root
