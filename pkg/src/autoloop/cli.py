"""Command-line entry point."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Sequence

from . import serde
from .deliberation import ScriptedDebater, Turn, corpus_metrics, load_corpus, new_session, run_session, save_session
from .drift import InsufficientHistory, detect_drift
from .model import OPEN_PR_STATES, Mode, Phase
from .orchestrator import (
    Adapters,
    ConfigError,
    CorruptState,
    Loop,
    LoopBusy,
    ProcessSkill,
    config_from_doc,
    load_config,
    load_state,
    load_world,
    read_config_doc,
)
from .sim import ScriptConfig, build_sim, open_sim_loop, report_doc, run_simulation, summary_table
from .tickets import CorruptStore, TicketStore
from .uat import DirectoryWorkspaceProvider, ShellEvaluator, UatGate, load_card
from .verification import Layer, default_catalog, inject_and_score, reference_verifiers

STATE_ENV = "AUTOLOOP_STATE_DIR"
EXIT_OK, EXIT_ERROR, EXIT_PAUSE = 0, 1, 2
MODES = ("strategy", "user-only", "dev-only", "drain", "regress-quick", "ui")


class _Parser(argparse.ArgumentParser):
    # exit status 2 is reserved for Pause, so usage errors exit 1
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _state_dir(args) -> Path:
    return Path(args.state_dir or os.environ.get(STATE_ENV) or ".autoloop")


def _mode(name: str | None) -> Mode | None:
    return Mode(name.replace("-", "_")) if name else None


def _read_config_doc(path: str | None) -> dict:
    return {} if path is None else read_config_doc(path)


def _sim_from(doc: dict):
    sim_doc = doc.get("sim")
    if sim_doc is None:
        return None, None
    dims = tuple(sim_doc.get("dims", (3, 2, 2)))
    sim = build_sim(
        int(sim_doc.get("seed", 0)), dims, float(sim_doc.get("defect_rate", 0.0)), float(sim_doc.get("regression_link_rate", 0.0))
    )
    env = sim_doc.get("environmental_failure_iterations", [])
    if env:
        sim.environmental_failure_iterations = frozenset(env)
    script = serde.from_doc(ScriptConfig, sim_doc.get("script", {}))
    return sim, script


def _process_adapters(doc: dict) -> Adapters:
    spec = doc.get("adapters")
    if not spec:
        raise ConfigError("config needs an 'adapters' section (phase -> command) or a 'sim' section")
    skills = {}
    for name, argv in spec.items():
        if name == "reviewer":
            continue
        try:
            skills[Phase(name)] = ProcessSkill(argv)
        except ValueError:
            raise ConfigError(f"unknown adapter phase {name!r}") from None
    reviewer = ProcessSkill(spec["reviewer"]) if "reviewer" in spec else None
    return Adapters(skills=skills, reviewer=reviewer)


# --- commands -----------------------------------------------------------


def cmd_run(args) -> int:
    if args.max_iterations < 0:
        raise ConfigError("--max-iterations must be >= 0")
    doc = _read_config_doc(args.config)
    config = config_from_doc(doc, mode=_mode(args.mode), seed=args.seed)
    if args.max_iterations == 0:
        print("max-iterations is 0; nothing to do")
        return EXIT_OK
    state_dir = _state_dir(args)
    sim, script = _sim_from(doc)
    if sim is not None:
        loop, _ = open_sim_loop(sim, config, state_dir, script=script)
    else:
        loop = Loop(state_dir, config, _process_adapters(doc))
    result = loop.run(args.max_iterations, resume=args.resume)
    last = result.records[-1] if result.records else None
    print(f"stopped: {result.stop} at iteration {result.state.iteration}")
    if last is not None:
        for d in last.decisions:
            print(f"  {d.gate.value}: {d.value.value} ({d.evidence})")
    return EXIT_PAUSE if result.stop == "pause" else EXIT_OK


def cmd_simulate(args) -> int:
    config = load_config(args.config, seed=args.seed, mode=_mode(args.mode))
    sim = build_sim(args.seed or 0, tuple(args.dims), args.defect_rate, args.regression_link_rate)
    script = ScriptConfig(seed=args.seed or 0, backlog_filler_target=args.backlog_filler)
    report = run_simulation(sim, config, args.max_iterations, script=script, state_dir=args.state_dir or os.environ.get(STATE_ENV))
    if args.format == "doc":
        sys.stdout.write(report_doc(report))
    else:
        sys.stdout.write(summary_table(report))
        print(f"stopped: {report.stop} at iteration {report.iteration}; merged {len(report.merged_prs)} PRs")
    return EXIT_PAUSE if report.stop == "pause" else EXIT_OK


def _emit_file(path: Path) -> None:
    sys.stdout.write(path.read_text(encoding="utf-8"))


def cmd_status(args) -> int:
    d = _state_dir(args)
    path = d / Loop.STATE
    if not path.exists():
        raise CorruptState(f"no state file at {path}")
    if args.format == "doc":
        load_state(path)  # validate before echoing
        _emit_file(path)
        return EXIT_OK
    s = load_state(path)
    open_prs = 0
    if (d / Loop.WORLD).exists():
        world = load_world((d / Loop.WORLD).read_text(encoding="utf-8"), TicketStore())
        open_prs = sum(1 for p in world.prs.values() if p.state in OPEN_PR_STATES)
    print(f"iteration: {s.iteration}")
    print(f"starvation_counter: {s.starvation_counter}")
    print(f"drain_entries: {s.drain_entries}")
    print(f"no_work_loops: {s.no_work_loops}")
    print(f"regression_failure_streak: {s.regression_failure_streak}")
    print(f"in_drain: {str(s.in_drain).lower()}")
    print(f"halted: {s.halted.value if s.halted else 'no'}")
    print(f"open_prs: {open_prs}")
    print("last gate decisions: " + (", ".join(f"{g.gate.value}:{g.value.value}" for g in s.last_gate_decisions) or "none"))
    print("recent history:")
    for r in s.history[-5:]:
        m = r.metrics
        print(
            f"  {r.index}: {r.mode.value} created={r.prs_created} merged={r.prs_merged} "
            f"oracle={r.oracle_outcome.value.value if r.oracle_outcome else '-'} open_prs={m.open_pr_count if m else '-'}"
        )
    return EXIT_OK


def _latest(directory: Path, prefix: str) -> Path | None:
    files = sorted(directory.glob(f"{prefix}-*.json"))
    return files[-1] if files else None


def cmd_report(args) -> int:
    d = _state_dir(args)
    latest = _latest(d / "reports", "drift")
    if args.format == "doc":
        if latest is None:
            raise CorruptState(f"no drift reports under {d / 'reports'}")
        _emit_file(latest)
        return EXIT_OK
    s = load_state(d / Loop.STATE)
    snaps = [r.metrics for r in s.history if r.metrics is not None]
    try:
        report = detect_drift(snaps)
    except InsufficientHistory as exc:
        print(f"drift: {exc}")
        return EXIT_OK
    print(f"drift report at iteration {report.iteration}")
    for name in sorted(report.trends):
        recent, base = report.window_means[name]
        print(f"  {name}: {report.trends[name].value} recent={recent:.3f} baseline={base:.3f} streak={report.decline_streaks[name]}")
    for a in report.alerts:
        print(f"  alert: {a}")
    return EXIT_OK


def cmd_gates(args) -> int:
    if args.canaries:
        cat = default_catalog()
        layers = [Layer(x) for x in args.layers] if args.layers else list(Layer)
        report = inject_and_score(
            cat.real_items,
            cat.canaries,
            reference_verifiers(cat.reference, layers),
            degraded=lambda m: reference_verifiers(cat.reference, layers, m),
            seed=args.seed or 0,
            require_structural=False,
        )
        if args.format == "doc":
            sys.stdout.write(serde.dumps(report))
            return EXIT_OK
        for tier, score in sorted(report.per_tier.items()):
            print(f"{tier}: caught {score.caught}/{score.total}, escaped {score.escaped}")
        api = report.api_resilience
        print(f"api_degradation: graceful {api.caught}/{api.total}")
        print("escapes: " + (", ".join(report.escapes) or "none"))
        return EXIT_OK
    d = _state_dir(args)
    if args.format == "doc":
        latest = _latest(d / "reports", "gates")
        if latest is None:
            raise CorruptState(f"no gate reports under {d / 'reports'}")
        _emit_file(latest)
        return EXIT_OK
    s = load_state(d / Loop.STATE)
    if not s.last_gate_decisions:
        print(f"iteration {s.iteration}: no gate fired")
    for g in s.last_gate_decisions:
        print(f"iteration {s.iteration}: {g.gate.value} -> {g.value.value} [{g.severity}] {g.evidence}")
    return EXIT_OK


def cmd_tickets(args) -> int:
    path = _state_dir(args) / Loop.TICKETS
    if not path.exists():
        raise CorruptStore(f"no ticket store at {path}")
    if args.format == "doc":
        TicketStore.load(path)
        _emit_file(path)
        return EXIT_OK
    store = TicketStore.load(path)
    rows = sorted(store.tickets.values(), key=lambda t: t.id)
    if args.open:
        rows = [t for t in rows if t.state.value != "done"]
    for t in rows:
        print(f"{t.id} [{t.state.value}] {t.label.value}/{t.priority.value} {t.title}")
    print(f"{len(rows)} ticket(s), store revision {store.revision}")
    return EXIT_OK


def cmd_discuss(args) -> int:
    if args.corpus:
        m = corpus_metrics(load_corpus(Path(args.corpus)))
        if args.format == "doc":
            sys.stdout.write(serde.dumps(m))
        else:
            print(f"sessions: {m.sessions}")
            print(f"dcr: {m.dcr:.3f}")
            print(f"round_efficiency: {m.round_efficiency:.3f}")
            print(f"ratification_rate: {m.ratification_rate:.3f}")
            for f in m.flags:
                print(f"flag: {f}")
        return EXIT_OK
    if not args.script:
        raise ConfigError("discuss needs --script FILE or --corpus DIR")
    doc = _read_config_doc(args.script)
    debaters = {}
    for name, spec in doc["debaters"].items():
        turns = {int(k): serde.from_doc(Turn, v) for k, v in spec.get("turns", {}).items()}
        debaters[name] = ScriptedDebater(name, turns, spec.get("opening"))
    session = new_session(
        doc["topic"], list(doc["debaters"]), max_rounds=int(doc.get("max_rounds", 3)), grounding=tuple(doc.get("grounding", ()))
    )
    session, report = run_session(session, debaters)
    if args.save:
        Path(args.save).parent.mkdir(parents=True, exist_ok=True)
        save_session(session, Path(args.save))
    if args.format == "doc":
        sys.stdout.write(serde.dumps(report))
    else:
        print(f"conclusion: {report.conclusion.value} ({report.reason})")
        for li in report.lineage:
            print(f"  {li.issue_id}: raised by {li.raised_by}, resolved by {li.resolved_by or '-'}, ratified by {li.ratified_by or '-'}")
    return EXIT_OK


def cmd_uat(args) -> int:
    card = load_card(args.card)
    source = Path(args.workspace)
    if not source.is_dir():
        raise ConfigError(f"workspace {source} is not a directory")
    gate = UatGate([ShellEvaluator(timeout=args.step_timeout)], DirectoryWorkspaceProvider(lambda rev: source))
    verdict = gate(card, "working-tree")
    if args.format == "doc":
        sys.stdout.write(serde.dumps(verdict))
    else:
        print(f"verdict: {verdict.value.value}")
        for r in verdict.reasons:
            print(f"  {r}")
    return EXIT_PAUSE if verdict.blocks_merge else EXIT_OK


# --- parser -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--state-dir", help=f"state directory (default ${STATE_ENV} or .autoloop)")
    common.add_argument("--format", choices=("text", "doc"), default="text")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=MODES)

    p = _Parser(prog="autoloop", description="Autonomous improvement loop control plane")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", parents=[common], help="run loop iterations")
    run.add_argument("--max-iterations", type=int, default=1)
    run.add_argument("--resume", action="store_true", help="clear a previous Pause or MonitorOnly halt")
    run.set_defaults(func=cmd_run)

    sim = sub.add_parser("simulate", parents=[common], help="run a scripted simulation")
    sim.add_argument("--max-iterations", type=int, default=20)
    sim.add_argument("--dims", type=int, nargs=3, default=(5, 3, 4), metavar=("F", "P", "A"))
    sim.add_argument("--defect-rate", type=float, default=0.15)
    sim.add_argument("--regression-link-rate", type=float, default=0.2)
    sim.add_argument("--backlog-filler", type=int, default=0)
    sim.set_defaults(func=cmd_simulate)

    st = sub.add_parser("status", parents=[common], help="summarize loop state")
    st.set_defaults(func=cmd_status)

    rep = sub.add_parser("report", parents=[common], help="drift report")
    rep.set_defaults(func=cmd_report)

    g = sub.add_parser("gates", parents=[common], help="gate decisions or the canary suite")
    g.add_argument("--canaries", action="store_true", help="score the canary catalog")
    g.add_argument("--layers", nargs="*", choices=[x.value for x in Layer])
    g.set_defaults(func=cmd_gates)

    t = sub.add_parser("tickets", parents=[common], help="list tickets")
    t.add_argument("--open", action="store_true")
    t.set_defaults(func=cmd_tickets)

    dsc = sub.add_parser("discuss", parents=[common], help="run a scripted deliberation or score a corpus")
    dsc.add_argument("--script")
    dsc.add_argument("--corpus")
    dsc.add_argument("--save")
    dsc.set_defaults(func=cmd_discuss)

    u = sub.add_parser("uat", parents=[common], help="evaluate a test card against a working tree")
    u.add_argument("--card", required=True)
    u.add_argument("--workspace", required=True)
    u.add_argument("--step-timeout", type=float, default=30.0)
    u.set_defaults(func=cmd_uat)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CorruptState, CorruptStore, LoopBusy, serde.DecodeError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"autoloop: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
