"""Line-delimited JSON trajectory store and training-set exporters.

Every record is one line. Appends are a single ``write`` followed by an
``fsync``, so a crash can only leave a torn *last* line, which the reader
sets aside as quarantined instead of failing.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .credit import backpropagate_values, build_graph, compute_advantages
from .domain import (
    BudgetConfig,
    Diagnostic,
    Lemma,
    Origin,
    RefinementStep,
    Round,
    Trajectory,
)
from .protocol import extract_final_answer, parse_summarizer_output
from .reward import RewardSpec, final_reward

SCHEMA_VERSION = 1


class SchemaVersionError(ValueError):
    pass


# ---------------------------------------------------------------- codec


def _frac(x: Optional[Fraction]) -> Optional[str]:
    return None if x is None else f"{x.numerator}/{x.denominator}"


def lemma_to_dict(lem: Lemma) -> dict:
    return {
        "index": lem.index,
        "fixed_suffix": lem.fixed_suffix,
        "name": lem.name,
        "statement": lem.statement,
        "proof_steps": list(lem.proof_steps),
        "cited_indices": sorted(lem.cited_indices),
        "origin": None if lem.origin is None else [lem.origin.rollout_id, lem.origin.round_index],
        "confidence": _frac(lem.confidence),
        "proven": lem.proven,
    }


def lemma_from_dict(d: dict) -> Lemma:
    return Lemma(
        index=d["index"],
        statement=d["statement"],
        proof_steps=tuple(d.get("proof_steps", ())),
        fixed_suffix=d.get("fixed_suffix", False),
        name=d.get("name"),
        cited_indices=frozenset(d.get("cited_indices", ())),
        origin=None if d.get("origin") is None else Origin(*d["origin"]),
        confidence=None if d.get("confidence") is None else Fraction(d["confidence"]),
        proven=d.get("proven"),
    )


def _diag_to_dict(d: Diagnostic) -> dict:
    return {"kind": d.kind, "message": d.message, "span": None if d.span is None else list(d.span)}


def _diag_from_dict(d: dict) -> Diagnostic:
    return Diagnostic(d["kind"], d["message"], None if d.get("span") is None else tuple(d["span"]))


def round_to_dict(r: Round) -> dict:
    return {
        "t": r.t,
        "meta_action": r.meta_action.value,
        "reasoner_prompt": r.reasoner_prompt,
        "reasoner_output": r.reasoner_output,
        "summarizer_prompt": r.summarizer_prompt,
        "summarizer_output": r.summarizer_output,
        "new_lemmas": [lemma_to_dict(l) for l in r.new_lemmas],
        "admitted": list(r.admitted),
        "progress_flag": r.progress_flag,
        "step_reward": r.step_reward,
        "search_verdict": r.search_verdict,
        "unproven_statements": list(r.unproven_statements),
        "diagnostics": [_diag_to_dict(d) for d in r.diagnostics],
    }


def round_from_dict(d: dict) -> Round:
    return Round(
        t=d["t"],
        meta_action=d["meta_action"],
        reasoner_output=d["reasoner_output"],
        summarizer_output=d["summarizer_output"],
        new_lemmas=tuple(lemma_from_dict(l) for l in d.get("new_lemmas", ())),
        admitted=tuple(d.get("admitted", ())),
        step_reward=d.get("step_reward", 0.0),
        reasoner_prompt=d.get("reasoner_prompt", ""),
        summarizer_prompt=d.get("summarizer_prompt", ""),
        search_verdict=d.get("search_verdict", "none"),
        unproven_statements=tuple(d.get("unproven_statements", ())),
        diagnostics=tuple(_diag_from_dict(x) for x in d.get("diagnostics", ())),
        progress_flag=d.get("progress_flag"),
    )


def trajectory_to_dict(tr: Trajectory) -> dict:
    return {
        "problem_id": tr.problem_id,
        "rollout_id": tr.rollout_id,
        "rounds": [round_to_dict(r) for r in tr.rounds],
        "final_solution": tr.final_solution,
        "refinement_log": [asdict(s) for s in tr.refinement_log],
        "pv_passes": tr.pv_passes,
        "pv_trials": tr.pv_trials,
        "outcome_correct": tr.outcome_correct,
        "final_reward": tr.final_reward,
        "refinement_exhausted": tr.refinement_exhausted,
        "improver_gave_up": tr.improver_gave_up,
        "aborted": tr.aborted,
        "max_rounds": tr.max_rounds,
        "outcome_gate": tr.outcome_gate,
    }


def trajectory_from_dict(d: dict) -> Trajectory:
    return Trajectory(
        problem_id=d["problem_id"],
        rollout_id=d["rollout_id"],
        rounds=tuple(round_from_dict(r) for r in d.get("rounds", ())),
        final_solution=d.get("final_solution", ""),
        refinement_log=tuple(RefinementStep(**s) for s in d.get("refinement_log", ())),
        pv_passes=d.get("pv_passes", 0),
        pv_trials=d.get("pv_trials", 0),
        outcome_correct=d.get("outcome_correct"),
        final_reward=d.get("final_reward", 0.0),
        refinement_exhausted=d.get("refinement_exhausted", False),
        improver_gave_up=d.get("improver_gave_up", False),
        aborted=d.get("aborted"),
        max_rounds=d.get("max_rounds"),
        outcome_gate=d.get("outcome_gate", True),
    )


def budget_to_dict(b: BudgetConfig) -> dict:
    out = {f.name: getattr(b, f.name) for f in fields(b)}
    out["lemma_confidence_threshold"] = _frac(b.lemma_confidence_threshold)
    return out


def budget_from_dict(d: dict) -> BudgetConfig:
    d = dict(d)
    if "lemma_confidence_threshold" in d:
        d["lemma_confidence_threshold"] = Fraction(d["lemma_confidence_threshold"])
    return BudgetConfig(**d)


def reward_spec_to_dict(s: RewardSpec) -> dict:
    return {"n": s.n, "transform": s.transform.value, "outcome_gate": s.outcome_gate}


@dataclass(frozen=True)
class TrajectoryRecord:
    trajectory: Trajectory
    budget: BudgetConfig = BudgetConfig()
    reward_spec: RewardSpec = RewardSpec()
    templates: str = "v1"
    provider_meta: dict = field(default_factory=dict)
    diagnostics: tuple = ()
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "trajectory": trajectory_to_dict(self.trajectory),
            "config": {
                "budget": budget_to_dict(self.budget),
                "reward_spec": reward_spec_to_dict(self.reward_spec),
                "templates": self.templates,
            },
            "provider_meta": dict(self.provider_meta),
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryRecord":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionError(f"unsupported schema_version {version!r} (reader knows {SCHEMA_VERSION})")
        cfg = d.get("config", {})
        return cls(
            trajectory=trajectory_from_dict(d["trajectory"]),
            budget=budget_from_dict(cfg.get("budget", {})),
            reward_spec=RewardSpec(**cfg.get("reward_spec", {})),
            templates=cfg.get("templates", "v1"),
            provider_meta=d.get("provider_meta", {}),
            diagnostics=tuple(d.get("diagnostics", ())),
        )

    def recomputed_reward(self) -> float:
        """Final reward recomputed from the stored counts and reward spec."""
        return final_reward(self.trajectory, self.reward_spec)


def dumps(record: TrajectoryRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))


# ---------------------------------------------------------------- files

_append_lock = threading.Lock()


def append_trajectory(path, record: TrajectoryRecord) -> None:
    """Append one record as one line; flushed and synced before returning."""
    data = (dumps(record) + "\n").encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _append_lock:
        fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        try:
            view = memoryview(data)
            while view:
                written = os.write(fd, view)
                view = view[written:]
            os.fsync(fd)
        finally:
            os.close(fd)


@dataclass
class ReadResult:
    records: list
    diagnostics: list = field(default_factory=list)
    quarantined: list = field(default_factory=list)


def read_trajectories(path, quarantine: bool = False) -> ReadResult:
    """Read every complete record of a JSONL file.

    An unparseable final line without a newline is a torn write: it is
    quarantined (and copied to ``<path>.quarantine`` when ``quarantine`` is
    set). Unparseable lines elsewhere are skipped with a diagnostic.
    """
    path = Path(path)
    raw = path.read_bytes()
    out = ReadResult([])
    lines = raw.split(b"\n")
    torn_tail = not raw.endswith(b"\n")
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        last = i == len(lines) - 1
        try:
            doc = json.loads(line.decode("utf-8"))
            out.records.append(TrajectoryRecord.from_dict(doc))
        except SchemaVersionError:
            raise
        except (ValueError, KeyError, TypeError) as err:
            if last and torn_tail:
                out.quarantined.append(line)
                out.diagnostics.append(
                    Diagnostic("quarantined_tail", f"{path.name}: torn last line ({len(line)} bytes): {err}")
                )
            else:
                out.diagnostics.append(Diagnostic("corrupt_line", f"{path.name}:{i + 1}: {err}"))
    if quarantine and out.quarantined:
        with open(str(path) + ".quarantine", "ab") as fh:
            for q in out.quarantined:
                fh.write(q + b"\n")
    return out


def read_store(root) -> ReadResult:
    """All records of a JSONL file, or of every ``*.jsonl`` shard under a directory."""
    root = Path(root)
    files = sorted(root.rglob("*.jsonl")) if root.is_dir() else [root]
    merged = ReadResult([])
    for f in files:
        part = read_trajectories(f)
        merged.records.extend(part.records)
        merged.diagnostics.extend(part.diagnostics)
        merged.quarantined.extend(part.quarantined)
    return merged


def write_jsonl(path, rows) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
            n += 1
    return n


# ---------------------------------------------------------------- exporters


def _ordered(trajectories) -> list:
    return sorted(trajectories, key=lambda t: (t.problem_id, t.rollout_id))


@dataclass(frozen=True)
class RftSample:
    prompt: str
    target: str
    problem_id: str
    rollout_id: str
    round: int

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "target": self.target,
            "meta": {"problem_id": self.problem_id, "rollout_id": self.rollout_id, "round": self.round},
        }


def export_rft(trajectories) -> list:
    """Summarizer turns whose output parses to at least one lemma, as (prompt, target) pairs."""
    out = []
    for tr in _ordered(trajectories):
        for rnd in tr.rounds:
            if not parse_summarizer_output(rnd.summarizer_output).lemmas:
                continue
            sample = RftSample(rnd.summarizer_prompt, rnd.summarizer_output, tr.problem_id, tr.rollout_id, rnd.t)
            # self-check: the exporter must never emit a target the parser rejects
            assert parse_summarizer_output(sample.target).lemmas
            out.append(sample)
    return out


def export_qa(trajectories, statements: dict) -> list:
    """Question and final-answer pairs from rollouts judged correct by outcome.

    ``statements`` maps problem id to problem text.
    """
    out = []
    for tr in _ordered(trajectories):
        if tr.outcome_correct is not True or tr.problem_id not in statements:
            continue
        out.append(
            {
                "prompt": statements[tr.problem_id],
                "target": tr.final_solution,
                "meta": {
                    "problem_id": tr.problem_id,
                    "rollout_id": tr.rollout_id,
                    "answer": extract_final_answer(tr.final_solution),
                },
            }
        )
    return out


def pass_rate(group) -> float:
    group = list(group)
    return sum(1 for t in group if t.solved) / len(group) if group else 0.0


@dataclass
class RlGroup:
    problem_id: str
    pass_rate: float
    trajectories: list
    advantages: dict  # rollout id -> list of AdvantageRecord
    values: dict

    def rows(self) -> list:
        out = []
        for tr in self.trajectories:
            adv = {a.t: a for a in self.advantages[tr.rollout_id]}
            for rnd in tr.rounds:
                a = adv[rnd.t]
                meta = {
                    "problem_id": tr.problem_id,
                    "rollout_id": tr.rollout_id,
                    "masked": a.masked,
                    "final_reward": tr.final_reward,
                }
                for prompt, target, role in (
                    (rnd.reasoner_prompt, rnd.reasoner_output, "reasoner"),
                    (rnd.summarizer_prompt, rnd.summarizer_output, "summarizer"),
                ):
                    out.append(
                        {"prompt": prompt, "target": target, "advantage": a.advantage, "round": rnd.t, "meta": {**meta, "role": role}}
                    )
        return out


def export_rl_batch(groups, gamma: float = 1.0, weighting: str = "uniform") -> list:
    """Keep groups whose pass rate is strictly between 0 and 1 and attach advantages.

    ``groups`` maps problem id to its rollouts (or is an iterable of rollouts,
    grouped here by problem id).
    """
    if not isinstance(groups, dict):
        by_problem: dict = {}
        for tr in groups:
            by_problem.setdefault(tr.problem_id, []).append(tr)
        groups = by_problem
    kept = []
    for pid in sorted(groups):
        trajs = _ordered(groups[pid])
        rate = pass_rate(trajs)
        if not trajs or rate in (0.0, 1.0):
            continue
        graph = build_graph(trajs)
        values = backpropagate_values(graph, weighting)
        adv = {tr.rollout_id: compute_advantages(tr, values, gamma) for tr in trajs}
        kept.append(RlGroup(pid, rate, trajs, adv, values))
    return kept
