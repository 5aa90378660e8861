"""User-acceptance gate: card validation, walled evaluation, integrity, verdicts."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import shutil
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol, Sequence

from . import serde
from .model import ChangeKind, FileChange

log = logging.getLogger(__name__)

EVIDENCE_DIR = "evidence"

PLACEHOLDER_PATTERNS = (r"<[^<>\s]+>", r"\bTODO\b", r"your-")
UNIT_TEST_PATTERNS = (
    r"run the unit tests",
    r"\bpytest\b",
    r"python3? -m unittest",
    r"\bnpm (run )?test\b",
    r"\bcargo test\b",
    r"\bgo test\b",
    r"\bmake (unit-?)?test\b",
)


@dataclass(frozen=True)
class CardStep:
    command: str
    expected_exit_code: int
    output_assertions: tuple[str, ...] = ()
    is_bad_input_step: bool = False


@dataclass(frozen=True)
class TestCard:
    __test__ = False

    pr_id: str
    steps: tuple[CardStep, ...]
    fixtures: tuple[str, ...] = ()
    notes: str = ""


def validate_card(
    card: TestCard,
    *,
    unit_test_patterns: Sequence[str] = UNIT_TEST_PATTERNS,
    implementation_markers: Sequence[str] = (),
) -> list[str]:
    problems: list[str] = []
    if not card.steps:
        problems.append("card has no steps")
    if not any(s.is_bad_input_step for s in card.steps):
        problems.append("card has no bad-input step")
    for i, step in enumerate(card.steps, 1):
        if not step.command.strip():
            problems.append(f"step {i}: empty command")
            continue
        if not isinstance(step.expected_exit_code, int) or isinstance(step.expected_exit_code, bool):
            problems.append(f"step {i}: expected exit code must be an integer")
        for pat in PLACEHOLDER_PATTERNS:
            if re.search(pat, step.command):
                problems.append(f"step {i}: placeholder in command ({pat})")
        for pat in unit_test_patterns:
            if re.search(pat, step.command, re.IGNORECASE):
                problems.append(f"step {i}: runs the product's own unit tests")
                break
    for marker in implementation_markers:
        if marker and marker in card.notes:
            problems.append(f"notes mention implementation detail {marker!r}")
    return problems


# --- evidence -----------------------------------------------------------


@dataclass(frozen=True)
class StepEvidence:
    step_index: int
    raw_output: bytes | None
    exit_code: int | None
    started: float = 0.0
    finished: float = 0.0
    # set when the evaluator could not run the step at all (missing binary, ambiguous command)
    unrunnable: str | None = None


@dataclass(frozen=True)
class EvidenceBundle:
    entries: tuple[StepEvidence, ...] = ()
    evaluator_id: str = ""
    workspace_id: str = ""
    crashed: str | None = None
    attempts: int = 1


@dataclass(frozen=True)
class IntegrityReport:
    modified_product_paths: tuple[str, ...] = ()
    untracked_paths_outside_evidence: tuple[str, ...] = ()

    @property
    def clean(self) -> bool:
        return not self.modified_product_paths and not self.untracked_paths_outside_evidence


class Verdict(str, Enum):
    PASS = "pass"
    PRODUCT_FAIL = "product_fail"
    UAT_SPEC_FAIL = "uat_spec_fail"
    EVAL_CHEAT_FAIL = "eval_cheat_fail"


@dataclass(frozen=True)
class UatVerdict:
    value: Verdict
    evidence_ref: str = ""
    reasons: tuple[str, ...] = ()

    @property
    def blocks_merge(self) -> bool:
        # spec failures are process problems and do not block the PR
        return self.value in (Verdict.PRODUCT_FAIL, Verdict.EVAL_CHEAT_FAIL)


# --- the information wall -------------------------------------------------


@dataclass(frozen=True)
class EvaluatorStep:
    index: int
    command: str


@dataclass(frozen=True)
class EvaluatorRequest:
    """Everything an evaluator is told. Built from the card alone; there is no field for diffs or tickets."""

    steps: tuple[EvaluatorStep, ...]
    fixtures: tuple[str, ...]
    notes: str
    evidence_dir: str
    evaluator_hint: str = "weakest"
    read_only: bool = True
    instructions: str = (
        "Run each step exactly as written from the workspace root and capture the raw output and exit code. "
        "Do not edit any product file. Write only inside the evidence directory."
    )


def build_request(card: TestCard) -> EvaluatorRequest:
    return EvaluatorRequest(
        steps=tuple(EvaluatorStep(i, s.command) for i, s in enumerate(card.steps)),
        fixtures=card.fixtures,
        notes=card.notes,
        evidence_dir=f"{EVIDENCE_DIR}/{card.pr_id}",
    )


# --- workspaces ---------------------------------------------------------


class WorkspaceCreationFailed(Exception):
    pass


class WorkspaceUnavailable(Exception):
    pass


class Workspace(Protocol):
    path: Path
    id: str

    def diff(self) -> list[FileChange]: ...

    def untracked(self) -> list[str]: ...

    def discard(self) -> None: ...


class WorkspaceProvider(Protocol):
    def create(self, base_revision: str) -> Workspace: ...


def _hash_tree(root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and ".git" not in p.relative_to(root).parts:
            out[p.relative_to(root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


class DirectoryWorkspace:
    """A copied tree plus a content-hash manifest of the pristine state."""

    def __init__(self, path: Path, ws_id: str):
        self.path = path
        self.id = ws_id
        self._base = _hash_tree(path)

    def diff(self) -> list[FileChange]:
        if not self.path.exists():
            raise WorkspaceUnavailable(str(self.path))
        now = _hash_tree(self.path)
        changes = []
        for rel in sorted(set(self._base) | set(now)):
            if rel not in now:
                changes.append(FileChange(rel, ChangeKind.DELETED))
            elif rel not in self._base:
                changes.append(FileChange(rel, ChangeKind.ADDED))
            elif now[rel] != self._base[rel]:
                changes.append(FileChange(rel, ChangeKind.MODIFIED))
        return changes

    def untracked(self) -> list[str]:
        return [c.path for c in self.diff() if c.kind is ChangeKind.ADDED]

    def discard(self) -> None:
        shutil.rmtree(self.path, ignore_errors=True)


class DirectoryWorkspaceProvider:
    """``source_for`` maps a revision to the directory holding that revision's tree."""

    def __init__(self, source_for: Callable[[str], Path], scratch: Path | None = None):
        self.source_for = source_for
        self.scratch = scratch
        self._n = 0

    def create(self, base_revision: str) -> DirectoryWorkspace:
        try:
            src = Path(self.source_for(base_revision))
            self._n += 1
            dest = Path(tempfile.mkdtemp(prefix=f"ws-{self._n}-", dir=self.scratch)) / "tree"
            shutil.copytree(src, dest)
        except Exception as exc:
            raise WorkspaceCreationFailed(f"cannot create workspace at {base_revision}: {exc}") from exc
        return DirectoryWorkspace(dest, f"{base_revision}#{self._n}")


class GitWorktree:
    def __init__(self, repo: Path, path: Path, ws_id: str):
        self.repo = repo
        self.path = path
        self.id = ws_id

    def _git(self, *args: str) -> str:
        return subprocess.run(
            ["git", *args], cwd=self.path, check=True, capture_output=True, text=True
        ).stdout

    def diff(self) -> list[FileChange]:
        kinds = {"A": ChangeKind.ADDED, "M": ChangeKind.MODIFIED, "D": ChangeKind.DELETED}
        out = []
        for line in self._git("diff", "--name-status", "HEAD").splitlines():
            code, _, path = line.partition("\t")
            out.append(FileChange(path, kinds.get(code[:1], ChangeKind.MODIFIED)))
        out += [FileChange(p, ChangeKind.ADDED) for p in self.untracked()]
        return sorted(out, key=lambda c: c.path)

    def untracked(self) -> list[str]:
        return sorted(self._git("ls-files", "--others", "--exclude-standard").splitlines())

    def discard(self) -> None:
        subprocess.run(
            ["git", "worktree", "remove", "--force", str(self.path)], cwd=self.repo, capture_output=True
        )
        shutil.rmtree(self.path, ignore_errors=True)


class GitWorktreeProvider:
    def __init__(self, repo: Path, scratch: Path | None = None):
        self.repo = Path(repo)
        self.scratch = scratch
        self._n = 0

    def create(self, base_revision: str) -> GitWorktree:
        self._n += 1
        path = Path(tempfile.mkdtemp(prefix=f"wt-{self._n}-", dir=self.scratch)) / "tree"
        proc = subprocess.run(
            ["git", "worktree", "add", "--detach", str(path), base_revision],
            cwd=self.repo,
            capture_output=True,
            text=True,
        )
        if proc.returncode != 0:
            raise WorkspaceCreationFailed(proc.stderr.strip())
        return GitWorktree(self.repo, path, f"{base_revision}#{self._n}")


# --- evaluation ---------------------------------------------------------


class Evaluator(Protocol):
    id: str

    def evaluate(self, request: EvaluatorRequest, workspace: Path) -> list[StepEvidence]: ...


class ShellEvaluator:
    """Runs each step through the shell, verbatim."""

    def __init__(self, ev_id: str = "shell", timeout: float = 30.0):
        self.id = ev_id
        self.timeout = timeout

    def evaluate(self, request: EvaluatorRequest, workspace: Path) -> list[StepEvidence]:
        out = []
        for step in request.steps:
            t0 = time.time()
            try:
                proc = subprocess.run(
                    step.command, shell=True, cwd=workspace, capture_output=True, timeout=self.timeout
                )
            except subprocess.TimeoutExpired:
                out.append(StepEvidence(step.index, None, None, t0, time.time(), unrunnable="timed out"))
                continue
            raw = proc.stdout + proc.stderr
            if proc.returncode == 127 and b"not found" in raw:
                out.append(StepEvidence(step.index, raw, 127, t0, time.time(), unrunnable="command not found"))
                continue
            out.append(StepEvidence(step.index, raw, proc.returncode, t0, time.time()))
        return out


def _under(path: str, prefix: str) -> bool:
    return path == prefix or path.startswith(prefix.rstrip("/") + "/")


def integrity_of(changes: Sequence[FileChange], card: TestCard) -> IntegrityReport:
    evidence = f"{EVIDENCE_DIR}/{card.pr_id}"
    fixtures = set(card.fixtures)
    modified, untracked = [], []
    for c in changes:
        if _under(c.path, evidence) or c.path in fixtures:
            continue
        (untracked if c.kind is ChangeKind.ADDED else modified).append(c.path)
    return IntegrityReport(tuple(sorted(modified)), tuple(sorted(untracked)))


def _omitted_output(entries: Sequence[StepEvidence]) -> bool:
    return any(e.raw_output is None and e.unrunnable is None for e in entries)


def run_evaluation(
    card: TestCard,
    evaluator: Evaluator,
    provider: WorkspaceProvider,
    base_revision: str,
    *,
    evidence_root: Path | None = None,
) -> tuple[EvidenceBundle, IntegrityReport]:
    """Evaluate ``card`` in a pristine workspace; a run that omits output is repeated once."""
    request = build_request(card)
    attempts = 0
    while True:
        attempts += 1
        ws = provider.create(base_revision)
        try:
            (ws.path / request.evidence_dir).mkdir(parents=True, exist_ok=True)
            crashed = None
            try:
                entries = list(evaluator.evaluate(request, ws.path))
            except Exception as exc:
                log.warning("evaluator %s crashed: %s", evaluator.id, exc)
                entries, crashed = [], f"{type(exc).__name__}: {exc}"
            integrity = integrity_of(ws.diff(), card)
        finally:
            ws.discard()
        bundle = EvidenceBundle(tuple(entries), evaluator.id, ws.id, crashed, attempts)
        if attempts >= 2 or crashed or not _omitted_output(entries) or not integrity.clean:
            break
    if evidence_root is not None:
        write_evidence(Path(evidence_root), card.pr_id, bundle)
    return bundle, integrity


def write_evidence(root: Path, pr_id: str, bundle: EvidenceBundle) -> Path:
    base = root / EVIDENCE_DIR / pr_id
    for e in bundle.entries:
        d = base / str(e.step_index)
        d.mkdir(parents=True, exist_ok=True)
        if e.raw_output is not None:
            (d / "output.bin").write_bytes(e.raw_output)
        meta = {
            "exit_code": e.exit_code,
            "started": e.started,
            "finished": e.finished,
            "unrunnable": e.unrunnable,
            "evaluator_id": bundle.evaluator_id,
            "workspace_id": bundle.workspace_id,
        }
        (d / "meta").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    return base


def compute_verdict(card: TestCard, bundle: EvidenceBundle, integrity: IntegrityReport) -> UatVerdict:
    ref = f"{EVIDENCE_DIR}/{card.pr_id}"
    if not integrity.clean:
        reasons = [f"product file modified: {p}" for p in integrity.modified_product_paths]
        reasons += [f"untracked file outside evidence: {p}" for p in integrity.untracked_paths_outside_evidence]
        return UatVerdict(Verdict.EVAL_CHEAT_FAIL, ref, tuple(reasons))

    by_index = {e.step_index: e for e in bundle.entries}
    spec_reasons = []
    if bundle.crashed:
        spec_reasons.append(f"evaluator could not run the card: {bundle.crashed}")
    for i in range(len(card.steps)):
        e = by_index.get(i)
        if e is None:
            spec_reasons.append(f"step {i}: no evidence entry")
        elif e.unrunnable is not None:
            spec_reasons.append(f"step {i}: un-runnable ({e.unrunnable})")
        elif e.raw_output is None:
            spec_reasons.append(f"step {i}: output omitted")
    if spec_reasons:
        return UatVerdict(Verdict.UAT_SPEC_FAIL, ref, tuple(spec_reasons))

    product_reasons = []
    for i, step in enumerate(card.steps):
        e = by_index[i]
        if e.exit_code != step.expected_exit_code:
            product_reasons.append(f"step {i}: exit code {e.exit_code}, expected {step.expected_exit_code}")
        text = e.raw_output.decode("utf-8", errors="replace") if e.raw_output is not None else ""
        for needle in step.output_assertions:
            if needle not in text:
                product_reasons.append(f"step {i}: output lacks {needle!r}")
    if product_reasons:
        return UatVerdict(Verdict.PRODUCT_FAIL, ref, tuple(product_reasons))
    return UatVerdict(Verdict.PASS, ref, ())


@dataclass
class UatGate:
    """Binds the configured evaluators (weakest first) to a workspace provider."""

    evaluators: Sequence[Evaluator]
    provider: WorkspaceProvider
    implementation_markers: Sequence[str] = ()
    evidence_root: Path | None = None
    log: list[UatVerdict] = field(default_factory=list)

    def __call__(self, card: TestCard, base_revision: str) -> UatVerdict:
        problems = validate_card(card, implementation_markers=self.implementation_markers)
        if problems:
            verdict = UatVerdict(Verdict.UAT_SPEC_FAIL, "", tuple(problems))
        else:
            bundle, integrity = run_evaluation(
                card, self.evaluators[0], self.provider, base_revision, evidence_root=self.evidence_root
            )
            verdict = compute_verdict(card, bundle, integrity)
        self.log.append(verdict)
        return verdict


def load_card(path: str | os.PathLike) -> TestCard:
    return serde.loads(TestCard, Path(path).read_text(encoding="utf-8"))
