"""``lemmaflow`` command line: solve, credit, grade, bench, export.

Exit codes: 0 ok, 2 configuration or input error, 3 provider error,
4 empty input, 5 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import yaml

from . import __version__
from .config import ConfigError, CliConfig, build_provider, load_config
from .credit import backpropagate_values, build_graph, compute_advantages, graph_edge_list, graph_json
from .domain import DomainError, Problem
from .evalkit import Rubric, grade, run_benchmark
from .orchestrator import Agent
from .provider import ProviderError
from .reports import plot_advantages, plot_grade, plot_pass_rates, plot_values, write_csv
from .store import (
    TrajectoryRecord,
    append_trajectory,
    export_qa,
    export_rft,
    export_rl_batch,
    read_store,
    write_jsonl,
)

log = logging.getLogger("lemmaflow")

EXIT_OK, EXIT_CONFIG, EXIT_PROVIDER, EXIT_EMPTY, EXIT_INTERNAL = 0, 2, 3, 4, 5


class EmptyInput(Exception):
    pass


# ---------------------------------------------------------------- helpers


def load_problems(path) -> list:
    """Problems from a YAML/JSON file holding one mapping, a list, or ``{problems: [...]}``."""
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as err:
        raise ConfigError(f"cannot read problems from {path}: {err}") from err
    if isinstance(data, dict) and "problems" in data:
        data = data["problems"]
    if isinstance(data, dict):
        data = [data]
    if not data:
        raise EmptyInput(f"{path} holds no problems")
    out = []
    for raw in data:
        if not isinstance(raw, dict) or "id" not in raw or "statement" not in raw:
            raise ConfigError(f"{path}: each problem needs an id and a statement")
        extra = set(raw) - {"id", "statement", "kind", "reference_answer", "rubric_ref"}
        if extra:
            raise ConfigError(f"{path}: unknown problem key {sorted(extra)[0]}")
        ref = raw.get("reference_answer")
        out.append(Problem(
            id=str(raw["id"]),
            statement=raw["statement"],
            kind=raw.get("kind", "solution_based" if ref is not None else "proof_based"),
            reference_answer=None if ref is None else str(ref),
            rubric_ref=raw.get("rubric_ref"),
        ))
    return out


def _config(args) -> CliConfig:
    return load_config(
        args.config,
        overrides={
            "preset": args.preset,
            "seed": args.seed,
            "out": args.out,
            "rollouts": getattr(args, "rollouts", None),
            "provider_url": args.provider_url,
            "script": args.script,
        },
    )


def _dump(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def _manifest(out: Path, command: str, cfg: Optional[CliConfig], files, extra: Optional[dict] = None) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "config": None if cfg is None else cfg.describe(),
        "files": sorted(str(Path(f).relative_to(out)) for f in files),
    }
    doc.update(extra or {})
    _dump(out / f"{command}.manifest.json", doc)


def _planned_calls(cfg: CliConfig, n_problems: int) -> dict:
    b = cfg.budget
    per_round = [
        {"role": "reasoner", "samples": 1},
        {"role": "summarizer", "samples": 1},
        {"role": "theorem_verifier", "samples": b.verifier_samples, "per": "candidate lemma"},
    ]
    per_refinement = [
        {"role": "process_verifier", "samples": cfg.reward.n},
        {"role": "improver", "samples": 1, "when": "vote not unanimous"},
    ]
    return {
        "problems": n_problems,
        "rollouts_per_problem": cfg.rollouts,
        "rounds_at_most": b.max_rounds,
        "per_round": per_round,
        "refinement_votes_at_most": b.max_refinement_rounds,
        "per_refinement": per_refinement,
    }


def _agent(cfg: CliConfig, provider, events) -> Agent:
    return Agent(
        provider,
        budget=cfg.budget,
        reward_spec=cfg.reward,
        templates=cfg.templates,
        temperatures=cfg.temperatures(),
        seed=cfg.seed,
        on_event=events,
        wellformed_bonus=cfg.wellformed_bonus,
    )


class _EventLog:
    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "a", encoding="utf-8")

    def __call__(self, event: dict):
        self.fh.write(json.dumps(event, sort_keys=True) + "\n")

    def close(self):
        self.fh.close()


def _record(cfg: CliConfig, traj, provider) -> TrajectoryRecord:
    return TrajectoryRecord(
        traj, cfg.budget, cfg.reward, cfg.templates, provider.describe() if provider else {}
    )


def _solve_into(cfg: CliConfig, problems, out: Path, provider, events) -> tuple:
    """Run every rollout, appending each trajectory as soon as it is done."""
    agent = _agent(cfg, provider, events)
    files, trajs = set(), []
    for problem in problems:
        shard = out / "trajectories" / f"{problem.id}.jsonl"
        for traj in agent.iter_solve(problem, cfg.rollouts):
            append_trajectory(shard, _record(cfg, traj, provider))
            files.add(shard)
            trajs.append(traj)
            log.info(
                "%s: %d rounds, k=%d/%d, reward %.4f%s",
                traj.rollout_id, len(traj.rounds), traj.pv_passes, traj.pv_trials, traj.final_reward,
                f" (aborted: {traj.aborted})" if traj.aborted else "",
            )
    return files, trajs


# ---------------------------------------------------------------- commands


def cmd_solve(args) -> int:
    cfg = _config(args)
    problems = load_problems(args.problems)
    b = cfg.budget
    print(
        f"budgets: parallel_rollouts={b.parallel_rollouts} max_rounds={b.max_rounds} "
        f"verifier_samples={b.verifier_samples} max_refinement_rounds={b.max_refinement_rounds}",
        file=sys.stderr,
    )
    if args.dry_run:
        print(json.dumps({"config": cfg.describe(), "plan": _planned_calls(cfg, len(problems))}, indent=2, sort_keys=True))
        return EXIT_OK
    out = Path(cfg.out)
    provider = build_provider(cfg)
    events = _EventLog(out / "runlog.jsonl")
    try:
        files, trajs = _solve_into(cfg, problems, out, provider, events)
    finally:
        events.close()
    aborted = [t.rollout_id for t in trajs if t.aborted]
    _manifest(out, "solve", cfg, files | {out / "runlog.jsonl"}, {"tokens": provider.totals(), "aborted": aborted})
    solved = sum(1 for t in trajs if t.solved)
    print(f"{len(trajs)} trajectories, {solved} solved, {len(aborted)} aborted -> {out}")
    return EXIT_PROVIDER if aborted else EXIT_OK


def _load_trajectories(path) -> list:
    p = Path(path)
    if not p.exists():
        raise EmptyInput(f"{path} does not exist")
    result = read_store(p)
    for d in result.diagnostics:
        log.warning("%s: %s", d.kind, d.message)
    if not result.records:
        raise EmptyInput(f"no trajectories under {path}")
    return [r.trajectory for r in result.records]


def cmd_credit(args) -> int:
    cfg = _config(args)
    trajs = _load_trajectories(args.trajectories)
    out = Path(cfg.out) / "credit"
    if args.dry_run:
        print(json.dumps({"config": cfg.describe(), "trajectories": len(trajs)}, indent=2, sort_keys=True))
        return EXIT_OK
    groups: dict = {}
    for t in trajs:
        groups.setdefault(t.problem_id, []).append(t)
    files = []
    for pid in sorted(groups):
        g = build_graph(groups[pid])
        values = backpropagate_values(g, cfg.credit_weighting)
        records = [a for t in sorted(groups[pid], key=lambda t: t.rollout_id) for a in compute_advantages(t, values, cfg.budget.discount)]
        d = out / pid
        d.mkdir(parents=True, exist_ok=True)
        (d / "graph.edges").write_text(graph_edge_list(g), encoding="utf-8")
        (d / "graph.json").write_text(graph_json(g, values) + "\n", encoding="utf-8")
        files += [d / "graph.edges", d / "graph.json"]
        files.append(write_csv(d / "values.csv", [["node", "label", "occurrences", "contributing", "value"]] + [
            [k, g.nodes[k].label, g.nodes[k].occurrences, g.nodes[k].contributing, values[k]] for k in sorted(g.nodes)
        ]))
        files.append(write_csv(d / "advantages.csv", [["rollout_id", "round", "advantage", "masked", "state_value", "next_value"]] + [
            [a.rollout_id, a.t, a.advantage, a.masked, a.state_value, a.next_value] for a in records
        ]))
        files.append(plot_advantages(records, d / "advantages.png", f"{pid}: round advantages"))
        contributing = {k for k, n in g.nodes.items() if n.contributing}
        files.append(plot_values(values, contributing, d / "values.png", f"{pid}: lemma values"))
        shared = max((n.occurrences for n in g.nodes.values()), default=0)
        unmasked = [a.advantage for a in records if not a.masked]
        print(
            f"{pid}: {len(groups[pid])} rollouts, {len(g.nodes)} lemmas, {len(g.edges)} edges, "
            f"{len(contributing)} contributing, max occurrences {shared}, "
            f"{len(unmasked)} unmasked rounds"
            + (f", mean advantage {sum(unmasked) / len(unmasked):.4f}" if unmasked else "")
        )
    _manifest(Path(cfg.out), "credit", cfg, files)
    return EXIT_OK


def cmd_grade(args) -> int:
    cfg = _config(args)
    rubric = Rubric.load(args.rubric)
    solution = Path(args.solution).read_text(encoding="utf-8")
    problem = Path(args.problem_text).read_text(encoding="utf-8") if args.problem_text else ""
    runs = args.runs or cfg.judge_runs
    if args.dry_run:
        print(json.dumps({"config": cfg.describe(), "plan": {"role": "judge", "samples": runs, "rubric_total": rubric.total}}, indent=2, sort_keys=True))
        return EXIT_OK
    provider = build_provider(cfg)
    report = grade(solution, rubric, provider, runs, problem, seed=cfg.seed)
    out = Path(cfg.out) / "grade"
    files = [_dump(out / "grade.json", report.to_dict())]
    rows = [["run"] + [f"item{i}" for i in range(1, len(rubric.items) + 1)] + ["total"]]
    for i, r in enumerate(report.per_run, start=1):
        rows.append([i] + [float(a) for a in r.awards] + [float(r.total)])
    files.append(write_csv(out / "grade.csv", rows))
    files.append(plot_grade(report, out / "grade.png", f"{rubric.id}: judge runs"))
    _manifest(Path(cfg.out), "grade", cfg, files, {"tokens": provider.totals()})
    print(f"mean {report.mean_total:.6f} / {rubric.total} over {len(report.per_run)} runs")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    problems = load_problems(args.problems)
    rubrics = {}
    for path in args.rubric or ():
        r = Rubric.load(path)
        rubrics[r.id] = r
    if args.dry_run:
        print(json.dumps({"config": cfg.describe(), "plan": _planned_calls(cfg, len(problems)), "k": args.k}, indent=2, sort_keys=True))
        return EXIT_OK
    out = Path(cfg.out)
    provider = build_provider(cfg)
    events = _EventLog(out / "runlog.jsonl")
    try:
        agent = _agent(cfg, provider, events)
        report = run_benchmark(problems, agent, cfg.rollouts, tuple(args.k), rubrics, judge_runs=cfg.judge_runs)
    finally:
        events.close()
    files = [out / "runlog.jsonl"]
    for p in report.problems:
        shard = out / "trajectories" / f"{p.problem_id}.jsonl"
        for t in p.trajectories:
            append_trajectory(shard, _record(cfg, t, provider))
        if p.trajectories:
            files.append(shard)
    bench = out / "bench"
    files.append(_dump(bench / "report.json", report.to_dict()))
    files.append(write_csv(bench / "report.csv", report.csv_rows()))
    if report.problems:
        files.append(plot_pass_rates(report, bench / "pass_rates.png"))
    _manifest(out, "bench", cfg, files, {"tokens": provider.totals()})
    agg = report.aggregate()
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in agg.items()) or "no problems")
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = _config(args)
    trajs = _load_trajectories(args.trajectories)
    out = Path(cfg.out) / "export"
    if args.mode == "rft":
        rows = [s.to_dict() for s in export_rft(trajs)]
    elif args.mode == "qa":
        if not args.problems:
            raise ConfigError("--mode qa needs --problems to recover the question text")
        statements = {p.id: p.statement for p in load_problems(args.problems)}
        rows = export_qa(trajs, statements)
    else:
        groups = export_rl_batch(trajs, cfg.budget.discount, cfg.credit_weighting)
        rows = [row for g in groups for row in g.rows()]
        print(f"kept {len(groups)} problem group(s): " + ", ".join(f"{g.problem_id} ({g.pass_rate:.3f})" for g in groups))
    if args.dry_run:
        print(json.dumps({"config": cfg.describe(), "mode": args.mode, "rows": len(rows)}, indent=2, sort_keys=True))
        return EXIT_OK
    path = out / f"{args.mode}.jsonl"
    write_jsonl(path, rows)
    _manifest(Path(cfg.out), "export", cfg, [path], {"mode": args.mode, "rows": len(rows)})
    print(f"{len(rows)} {args.mode} samples -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--preset", choices=["default", "cmo2025"], help="named budget preset")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--provider-url", dest="provider_url", help="chat-completions base URL")
    common.add_argument("--script", help="scripted provider file (YAML/JSON) instead of a live endpoint")
    common.add_argument("--dry-run", dest="dry_run", action="store_true", help="print the resolved config and plan, call nothing")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lemmaflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", parents=[common], help="run rollouts and store trajectories")
    s.add_argument("problems")
    s.add_argument("--rollouts", type=int)
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("credit", parents=[common], help="lemma graph, values and advantages")
    c.add_argument("trajectories", help="JSONL file or directory of shards")
    c.set_defaults(func=cmd_credit)

    g = sub.add_parser("grade", parents=[common], help="rubric-grade one solution with a judge ensemble")
    g.add_argument("solution")
    g.add_argument("--rubric", required=True)
    g.add_argument("--problem-text", dest="problem_text")
    g.add_argument("--runs", type=int)
    g.set_defaults(func=cmd_grade)

    b = sub.add_parser("bench", parents=[common], help="solve a problem suite and report pass@k")
    b.add_argument("problems")
    b.add_argument("--rollouts", type=int)
    b.add_argument("--k", type=int, nargs="+", default=[1])
    b.add_argument("--rubric", action="append", help="rubric file; its stem is the rubric_ref (repeatable)")
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("export", parents=[common], help="training datasets from stored trajectories")
    e.add_argument("trajectories")
    e.add_argument("--mode", choices=["rft", "qa", "rl"], default="rft")
    e.add_argument("--problems", help="problem file (needed for --mode qa)")
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except EmptyInput as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_EMPTY
    except (ConfigError, DomainError, FileNotFoundError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ProviderError as err:
        print(f"provider error: {err}", file=sys.stderr)
        return EXIT_PROVIDER
    except KeyboardInterrupt:
        print("interrupted; finished trajectories are already on disk", file=sys.stderr)
        return 130
    except Exception as err:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
