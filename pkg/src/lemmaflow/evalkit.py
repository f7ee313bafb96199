"""Rubric grading with a judge ensemble, and benchmark metrics."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from pathlib import Path
from typing import Optional

from .domain import DomainError
from .provider import CompletionProvider, CompletionRequest, Role

log = logging.getLogger(__name__)


class JudgeParseError(ValueError):
    pass


@dataclass(frozen=True)
class RubricItem:
    title: str
    desc: str
    points: int

    def __post_init__(self):
        if not isinstance(self.points, int) or isinstance(self.points, bool) or self.points < 1:
            raise DomainError(f"rubric item {self.title!r}: points must be a positive integer")


@dataclass(frozen=True)
class Rubric:
    items: tuple
    id: str = "rubric"

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if not self.items:
            raise DomainError("a rubric needs at least one item")

    @property
    def total(self) -> int:
        return sum(i.points for i in self.items)

    @classmethod
    def from_json(cls, data, id: str = "rubric") -> "Rubric":
        """Accepts a JSON array of ``{"desc", "points", "title"}`` objects (text or parsed)."""
        if isinstance(data, str):
            data = json.loads(data)
        if not isinstance(data, list):
            raise DomainError("a rubric file must hold a JSON array")
        items = []
        for raw in data:
            extra = set(raw) - {"desc", "points", "title"}
            if extra:
                raise DomainError(f"unknown rubric fields: {sorted(extra)}")
            items.append(RubricItem(raw["title"], raw["desc"], raw["points"]))
        return cls(tuple(items), id)

    @classmethod
    def load(cls, path) -> "Rubric":
        path = Path(path)
        return cls.from_json(path.read_text(encoding="utf-8"), path.stem)

    def to_json(self) -> list:
        return [{"desc": i.desc, "points": i.points, "title": i.title} for i in self.items]


JUDGE_TEMPLATE = """You are grading a solution to a competition mathematics problem against a fixed rubric.

### Problem ###
{problem}

### Rubric ###
{rubric}

### Solution ###
{solution}

### Instructions ###
Check the solution against every rubric item independently. An item is earned only when the solution
proves the stated claim rigorously, not merely when it states the conclusion. Items worth more than
1 point may receive partial credit for a valid partial proof; items worth 1 point receive 0 or 1.

Answer with exactly one line per rubric item, then the total, in this form and nothing after it:
ITEM 1: <points>
ITEM 2: <points>
...
TOTAL: <points>
"""


def render_rubric(rubric: Rubric) -> str:
    return "\n".join(
        f"{i}. [{item.points} point{'s' if item.points > 1 else ''}] {item.title}: {item.desc}"
        for i, item in enumerate(rubric.items, start=1)
    )


def judge_prompt(problem: str, rubric: Rubric, solution: str) -> str:
    return JUDGE_TEMPLATE.format(problem=problem, rubric=render_rubric(rubric), solution=solution)


_ITEM_RE = re.compile(r"^\s*\**\s*ITEM\s+(\d+)\s*\**\s*:\s*\**\s*([0-9./]+)\s*\**\s*$", re.IGNORECASE | re.MULTILINE)
_TOTAL_RE = re.compile(r"^\s*\**\s*TOTAL\s*\**\s*:\s*\**\s*([0-9./]+)\s*\**\s*$", re.IGNORECASE | re.MULTILINE)


def _number(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise JudgeParseError(f"not a number: {text!r}") from None


def parse_judge(text: str, rubric: Rubric) -> tuple:
    """Per-item awards and a list of diagnostics; raises JudgeParseError on a malformed answer.

    The last ``ITEM i`` line for each item counts. Awards outside
    ``[0, points]``, or fractional awards on 1-point items, are malformed.
    """
    awards: dict = {}
    for m in _ITEM_RE.finditer(text or ""):
        awards[int(m.group(1))] = _number(m.group(2))
    missing = [i for i in range(1, len(rubric.items) + 1) if i not in awards]
    if missing:
        raise JudgeParseError(f"no award for item(s) {missing}")
    diags = []
    extra = sorted(set(awards) - set(range(1, len(rubric.items) + 1)))
    if extra:
        diags.append(f"ignored award for unknown item(s) {extra}")
    out = []
    for i, item in enumerate(rubric.items, start=1):
        a = awards[i]
        if not 0 <= a <= item.points:
            raise JudgeParseError(f"item {i}: award {a} outside [0, {item.points}]")
        if item.points == 1 and a not in (0, 1):
            raise JudgeParseError(f"item {i}: no partial credit on a 1-point item, got {a}")
        out.append(a)
    totals = _TOTAL_RE.findall(text or "")
    if totals and _number(totals[-1]) != sum(out):
        diags.append(f"stated total {totals[-1]} differs from the item sum {sum(out)}; using the sum")
    return tuple(out), diags


@dataclass(frozen=True)
class RunGrade:
    awards: tuple
    total: Fraction
    resampled: bool = False
    diagnostics: tuple = ()


@dataclass(frozen=True)
class GradeReport:
    per_run: tuple
    rubric_total: int
    rubric_id: str = "rubric"

    @property
    def exact_mean(self) -> Fraction:
        if not self.per_run:
            return Fraction(0)
        return sum((r.total for r in self.per_run), Fraction(0)) / len(self.per_run)

    @property
    def mean_total(self) -> float:
        return float(self.exact_mean)

    def to_dict(self) -> dict:
        return {
            "rubric": self.rubric_id,
            "rubric_total": self.rubric_total,
            "mean_total": self.mean_total,
            "exact_mean": str(self.exact_mean),
            "runs": [
                {
                    "awards": [str(a) for a in r.awards],
                    "total": str(r.total),
                    "resampled": r.resampled,
                    "diagnostics": list(r.diagnostics),
                }
                for r in self.per_run
            ],
        }


def grade(
    solution: str,
    rubric: Rubric,
    provider: CompletionProvider,
    n: int = 8,
    problem: str = "",
    seed: Optional[int] = None,
    tags: Optional[dict] = None,
) -> GradeReport:
    """Grade ``solution`` with ``n`` independent judge runs and average the run totals.

    A run whose answer does not parse is re-sampled once, then scored 0.
    An empty solution scores 0 without consulting any judge.
    """
    if n < 1:
        raise DomainError("grading needs n >= 1 judge runs")
    zero = tuple(Fraction(0) for _ in rubric.items)
    if not solution or not solution.strip():
        runs = tuple(RunGrade(zero, Fraction(0), diagnostics=("empty solution",)) for _ in range(n))
        return GradeReport(runs, rubric.total, rubric.id)

    prompt = judge_prompt(problem, rubric, solution)
    base = {k: str(v) for k, v in (tags or {}).items()}
    req = CompletionRequest.prompt(
        Role.JUDGE, prompt, temperature=0.0, sample_count=n, seed=seed, tags={**base, "purpose": "judge"}
    )
    samples = provider.complete(req).samples
    runs = []
    for i, text in enumerate(samples):
        try:
            awards, diags = parse_judge(text, rubric)
            runs.append(RunGrade(awards, sum(awards, Fraction(0)), diagnostics=tuple(diags)))
            continue
        except JudgeParseError as first:
            reason = str(first)
        retry = CompletionRequest.prompt(
            Role.JUDGE,
            prompt,
            temperature=0.0,
            seed=None if seed is None else seed + 1 + i,
            tags={**base, "purpose": "judge_retry", "run": str(i)},
        )
        (again,) = provider.complete(retry).samples
        try:
            awards, diags = parse_judge(again, rubric)
            runs.append(RunGrade(awards, sum(awards, Fraction(0)), True, (f"re-sampled: {reason}", *diags)))
        except JudgeParseError as second:
            log.warning("judge run %d unparseable twice: %s", i, second)
            runs.append(RunGrade(zero, Fraction(0), True, (f"re-sampled: {reason}", f"scored 0: {second}")))
    return GradeReport(tuple(runs), rubric.total, rubric.id)


# ---------------------------------------------------------------- pass@k


def pass_at_k_exact(n: int, c: int, k: int) -> Fraction:
    if not (0 <= c <= n and 1 <= k <= n):
        raise DomainError(f"pass@k needs 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}")
    return 1 - Fraction(comb(n - c, k), comb(n, k))


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased estimate of P(at least one of k draws is correct) from c successes in n."""
    return float(pass_at_k_exact(n, c, k))


# ---------------------------------------------------------------- benchmark


@dataclass
class ProblemResult:
    problem_id: str
    n: int
    c: int
    pass_at: dict = field(default_factory=dict)
    mean_total: Optional[float] = None
    rubric_total: Optional[int] = None
    errors: list = field(default_factory=list)
    trajectories: list = field(default_factory=list)


@dataclass
class BenchmarkReport:
    problems: list
    ks: tuple = (1,)

    def aggregate(self) -> dict:
        scored = [p for p in self.problems if p.n > 0]
        out = {}
        for k in self.ks:
            vals = [p.pass_at[k] for p in scored if k in p.pass_at]
            out[f"pass@{k}"] = sum(vals) / len(vals) if vals else None
        graded = [p.mean_total for p in self.problems if p.mean_total is not None]
        if graded:
            out["mean_rubric_total"] = sum(graded) / len(graded)
        return out

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate(),
            "problems": [
                {
                    "problem_id": p.problem_id,
                    "rollouts": p.n,
                    "correct": p.c,
                    **{f"pass@{k}": v for k, v in sorted(p.pass_at.items())},
                    "mean_total": p.mean_total,
                    "rubric_total": p.rubric_total,
                    "errors": list(p.errors),
                }
                for p in self.problems
            ],
        }

    def csv_rows(self) -> list:
        header = ["problem_id", "rollouts", "correct"] + [f"pass@{k}" for k in self.ks] + ["mean_total"]
        rows = [header]
        for p in self.problems:
            rows.append(
                [p.problem_id, p.n, p.c]
                + [p.pass_at.get(k, "") for k in self.ks]
                + ["" if p.mean_total is None else p.mean_total]
            )
        return rows


def run_benchmark(
    problems,
    agent,
    rollouts: int,
    ks=(1,),
    rubrics: Optional[dict] = None,
    judge: Optional[CompletionProvider] = None,
    judge_runs: int = 8,
) -> BenchmarkReport:
    """Solve every problem ``rollouts`` times and score the attempts.

    Solution-based problems count a rollout correct on a matching final
    answer. Other problems count it correct on a unanimous process-verifier
    vote, and additionally get rubric-graded when ``rubrics`` has their
    ``rubric_ref``. A failing problem is recorded and the run moves on.
    """
    if rollouts < 1:
        raise DomainError("rollouts must be >= 1")
    ks = tuple(k for k in ks if 1 <= k <= rollouts) or (1,)
    rubrics = rubrics or {}
    results = []
    for problem in problems:
        res = ProblemResult(problem.id, 0, 0)
        try:
            trajs = agent.solve_many(problem, rollouts)
        except Exception as err:  # keep benchmarking the other problems
            log.exception("problem %s failed", problem.id)
            res.errors.append(f"{type(err).__name__}: {err}")
            results.append(res)
            continue
        res.trajectories = trajs
        res.n = len(trajs)
        res.c = sum(1 for t in trajs if t.aborted is None and t.solved)
        res.errors.extend(f"{t.rollout_id}: {t.aborted}" for t in trajs if t.aborted)
        res.pass_at = {k: pass_at_k(res.n, res.c, k) for k in ks}
        rubric = rubrics.get(problem.rubric_ref) if problem.rubric_ref else None
        if rubric is not None:
            grader = judge or agent.provider
            reports = [
                grade(t.final_solution, rubric, grader, judge_runs, problem.statement, tags={"rollout": t.rollout_id})
                for t in trajs
            ]
            res.mean_total = float(sum((r.exact_mean for r in reports), Fraction(0)) / len(reports))
            res.rubric_total = rubric.total
        results.append(res)
    return BenchmarkReport(results, ks)
