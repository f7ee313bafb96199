"""Shared builders for tests: the scripted lattice replay and provider doubles."""

from __future__ import annotations

import threading
import time
from dataclasses import replace
from pathlib import Path

import yaml

from lemmaflow.cli import load_problems
from lemmaflow.provider import (
    CompletionProvider,
    CompletionResult,
    ScriptedProvider,
    TransportError,
    Usage,
)

FIXTURES = Path(__file__).parent / "fixtures"
LATTICE = FIXTURES / "lattice"
RUBRIC_PATH = FIXTURES / "imo2025_p1_rubric.json"

PASS = "Every lemma and step holds.\n\\box{STEP-1}"
FAIL_STEP = "Step 2 uses a distance that was never computed.\n\\box{STEP2}"
FAIL_LEMMA = "The cited lemma does not apply here.\n\\box{LEMMA3}"

# votes per candidate lemma: number of passing verdicts out of four
LATTICE_VOTES = {
    "1": 3, "2": 0, "3": 4, "4": 3, "5": 2, "6": 1, "7": 4, "8": 3, "9": 0, "10": 0,
    "11": 0, "12": 0, "13": 0,
}
LATTICE_ADMITTED = ["1", "3", "4", "7", "8"]


def text(name: str) -> str:
    return (LATTICE / name).read_text(encoding="utf-8")


def lattice_problem():
    (problem,) = load_problems(LATTICE / "problem.yaml")
    return problem


def votes(passes: int, n: int = 4) -> list:
    """``passes`` passing verdicts among ``n``, failures interleaved deterministically."""
    out = []
    fails = [FAIL_STEP, FAIL_LEMMA]
    for i in range(n):
        out.append(PASS if i < passes else fails[i % 2])
    # put one failure before the last pass so order matters in the script
    if 0 < passes < n:
        out[passes - 1], out[passes] = out[passes], out[passes - 1]
    return out


def lattice_entries(n: int = 4) -> list:
    """Script for one lattice rollout (any rollout id): four rounds, one revision, then a unanimous vote."""
    entries = []
    for t in range(1, 5):
        entries.append({"role": "reasoner", "tags": {"purpose": "search", "round": str(t)},
                        "responses": [text(f"round{t}_search.md")]})
        entries.append({"role": "summarizer", "tags": {"purpose": "summarize", "round": str(t)},
                        "responses": [text(f"round{t}_summary.md")]})
    for key, k in LATTICE_VOTES.items():
        entries.append({"role": "theorem_verifier", "tags": {"lemma": key}, "responses": votes(k, n)})
    entries.append({"role": "process_verifier", "tags": {"refine": "0"},
                    "responses": [PASS, PASS, "Step 3 skips the (3,3,0) case.\n\\box{STEP3}", PASS]})
    entries.append({"role": "improver", "tags": {"refine": "0"}, "responses": [text("refined_solution.md")]})
    entries.append({"role": "process_verifier", "tags": {"refine": "1"}, "responses": [PASS] * 4})
    return entries


def lattice_provider(**kw) -> ScriptedProvider:
    return ScriptedProvider(lattice_entries(), **kw)


def write_script(path: Path, entries, strict: bool = True) -> Path:
    path.write_text(yaml.safe_dump({"strict": strict, "entries": entries}, allow_unicode=True), encoding="utf-8")
    return path


def cycling_entries(search: str, summary: str = "Can not summary any new lemmas.", pv: str = PASS) -> list:
    """Script whose every request of a role gets the same text, for any round or rollout."""
    return [
        {"role": "reasoner", "responses": [search], "cycle": True},
        {"role": "summarizer", "responses": [summary], "cycle": True},
        {"role": "theorem_verifier", "responses": [PASS], "cycle": True},
        {"role": "process_verifier", "responses": [pv], "cycle": True},
        {"role": "improver", "responses": [search], "cycle": True},
    ]


EASY_SEARCH = "**a. Verdict:** I have found a complete solution. The answer is 4.\n\n$2+2=\\boxed{4}$"
STUCK_SEARCH = "**a. Verdict:** I have not found a complete solution, but I have rigorously proven the following:\n"


class FlakyProvider(CompletionProvider):
    """Raises ``TransportError`` for the first ``failures`` calls, then delegates."""

    def __init__(self, inner: CompletionProvider, failures: int, error=TransportError):
        self.inner = inner
        self.failures = failures
        self.error = error
        self.calls = 0
        self.max_output_tokens = inner.max_output_tokens

    def _complete(self, req):
        self.calls += 1
        if self.calls <= self.failures:
            raise self.error(f"injected failure {self.calls}")
        return self.inner.complete(req)


class CountingProvider(CompletionProvider):
    """Echo provider that records the peak number of concurrent calls."""

    def __init__(self, delay: float = 0.002):
        self.delay = delay
        self.active = 0
        self.peak = 0
        self.total = 0
        self._lock = threading.Lock()

    def _complete(self, req):
        with self._lock:
            self.active += 1
            self.total += 1
            self.peak = max(self.peak, self.active)
        try:
            time.sleep(self.delay)
            return CompletionResult([PASS] * req.sample_count, Usage(1, 1))
        finally:
            with self._lock:
                self.active -= 1


class RecordingProvider(CompletionProvider):
    """Pass-through that keeps every request it saw."""

    def __init__(self, inner: CompletionProvider):
        self.inner = inner
        self.requests = []
        self.max_output_tokens = inner.max_output_tokens
        self._lock = threading.Lock()

    def _complete(self, req):
        with self._lock:
            self.requests.append(req)
        return self.inner.complete(req)


def with_rollout(traj, rollout_id: str, correct: bool):
    """A copy of ``traj`` under another rollout id with the given outcome (reward gated accordingly)."""
    return replace(
        traj,
        rollout_id=rollout_id,
        outcome_correct=correct,
        final_reward=traj.final_reward if correct else 0.0,
    )
