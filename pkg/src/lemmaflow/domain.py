"""Core value types: problems, lemmas, the lemma library, rounds and trajectories.

Everything here is an immutable value. "Mutation" returns a new object, so
values can be shared freely between rollouts running on different threads.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Iterator, Optional


class DomainError(ValueError):
    """A value violates one of the model invariants."""


class IndexClash(DomainError):
    pass


class DanglingCitation(DomainError):
    pass


class ProblemKind(str, Enum):
    SOLUTION_BASED = "solution_based"
    PROOF_BASED = "proof_based"


class MetaAction(str, Enum):
    EXTRACT_LEMMAS = "extract_lemmas"
    INVOKE_VERIFICATION = "invoke_verification"
    COMMIT_ANSWER = "commit_answer"


SENTINEL_INDEX = -1

_CITATION_RE = re.compile(r"\blemma\s+(\d+)(?:-fixed)?\b", re.IGNORECASE)
_WS_RE = re.compile(r"\s+")
_MATH_DELIM_RE = re.compile(r"\s*(\$\$?|\\\(|\\\)|\\\[|\\\])\s*")


def extract_citations(steps, own_index: Optional[int] = None) -> frozenset:
    """Lemma numbers mentioned as ``Lemma k`` / ``Lemma k-fixed`` in proof steps."""
    found = set()
    for step in steps:
        for m in _CITATION_RE.finditer(step):
            found.add(int(m.group(1)))
    found.discard(own_index)
    return frozenset(found)


def normalize_statement(text: str) -> str:
    text = _WS_RE.sub(" ", text).strip()
    return _MATH_DELIM_RE.sub(r"\1", text)


def statement_identity(text: str) -> str:
    """Cross-rollout identity of a lemma: hash of its normalized statement."""
    return hashlib.sha256(normalize_statement(text).encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Problem:
    id: str
    statement: str
    kind: ProblemKind = ProblemKind.PROOF_BASED
    reference_answer: Optional[str] = None
    rubric_ref: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ProblemKind(self.kind))
        if not self.statement or not self.statement.strip():
            raise DomainError(f"problem {self.id!r} has an empty statement")
        if (
            self.reference_answer is not None
            and self.kind is not ProblemKind.SOLUTION_BASED
            and self.rubric_ref is None
        ):
            raise DomainError(
                f"problem {self.id!r}: a reference answer needs kind=solution_based or a rubric"
            )


@dataclass(frozen=True)
class Origin:
    rollout_id: str
    round_index: int


@dataclass(frozen=True)
class Lemma:
    index: int
    statement: str
    proof_steps: tuple = ()
    fixed_suffix: bool = False
    name: Optional[str] = None
    cited_indices: Optional[frozenset] = None
    origin: Optional[Origin] = None
    confidence: Optional[Fraction] = None
    proven: Optional[bool] = None

    def __post_init__(self):
        object.__setattr__(self, "proof_steps", tuple(self.proof_steps))
        if self.index < 1 and self.index != SENTINEL_INDEX:
            raise DomainError(f"lemma index must be >= 1 (or the -1 sentinel), got {self.index}")
        if self.cited_indices is None:
            object.__setattr__(
                self, "cited_indices", extract_citations(self.proof_steps, self.index)
            )
        else:
            object.__setattr__(self, "cited_indices", frozenset(self.cited_indices))
        if self.proven is None:
            object.__setattr__(self, "proven", bool(self.proof_steps))
        elif self.proven and not self.proof_steps:
            raise DomainError(f"lemma {self.key} is marked proven but has no proof steps")
        if self.confidence is not None:
            c = Fraction(self.confidence)
            if not 0 <= c <= 1:
                raise DomainError(f"confidence {c} outside [0, 1]")
            object.__setattr__(self, "confidence", c)

    @property
    def key(self) -> str:
        return f"{self.index}-fixed" if self.fixed_suffix else str(self.index)

    @property
    def identity(self) -> str:
        return statement_identity(self.statement)

    def with_confidence(self, passes: int, n: int) -> "Lemma":
        if n < 1 or not 0 <= passes <= n:
            raise DomainError(f"invalid vote count {passes}/{n}")
        return replace(self, confidence=Fraction(passes, n))

    def with_origin(self, rollout_id: str, round_index: int) -> "Lemma":
        return replace(self, origin=Origin(rollout_id, round_index))


@dataclass(frozen=True)
class LemmaLibrary:
    """Insertion-ordered collection of verified lemmas.

    Insertion order doubles as a topological order of the citation edges:
    a lemma may only cite lemmas that were inserted before it.
    """

    entries: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Lemma]:
        return iter(self.entries)

    def __bool__(self) -> bool:
        return bool(self.entries)

    @property
    def next_index(self) -> int:
        return 1 + max((e.index for e in self.entries), default=0)

    @property
    def raw_indices(self) -> frozenset:
        return frozenset(e.index for e in self.entries)

    def get(self, key: str) -> Optional[Lemma]:
        for e in self.entries:
            if e.key == key:
                return e
        return None

    def resolve(self, index: int) -> Optional[Lemma]:
        """Current version of lemma ``index``: the ``-fixed`` one if present."""
        return self.get(f"{index}-fixed") or self.get(str(index))

    def insert(self, lemma: Lemma) -> "LemmaLibrary":
        return library_insert(self, lemma)


def library_insert(lib: LemmaLibrary, lemma: Lemma) -> LemmaLibrary:
    """Append ``lemma`` to ``lib``, returning the new library.

    A plain lemma must carry a raw index above every index already stored
    (numbers consumed by rejected candidates may leave gaps). A ``-fixed``
    lemma must correct an index that is present and not yet fixed.
    """
    if lemma.index == SENTINEL_INDEX:
        raise DomainError("the -1 sentinel is never stored in a library")
    present = lib.raw_indices
    if lemma.fixed_suffix:
        if lemma.index not in present:
            raise IndexClash(f"Lemma {lemma.key} corrects a lemma that is not in the library")
        if lib.get(lemma.key) is not None:
            raise IndexClash(f"Lemma {lemma.key} is already in the library")
    elif lemma.index in present:
        raise IndexClash(f"Lemma {lemma.index} is already in the library")
    elif lemma.index < lib.next_index:
        raise IndexClash(
            f"Lemma {lemma.index} would be inserted out of order (next index {lib.next_index})"
        )
    dangling = sorted(i for i in lemma.cited_indices if i not in present)
    if dangling:
        raise DanglingCitation(
            f"Lemma {lemma.key} cites {', '.join(map(str, dangling))} which the library lacks"
        )
    return LemmaLibrary(lib.entries + (lemma,))


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    message: str
    span: Optional[tuple] = None


@dataclass(frozen=True)
class Round:
    t: int
    meta_action: MetaAction
    reasoner_output: str
    summarizer_output: str
    new_lemmas: tuple = ()
    admitted: tuple = ()
    step_reward: float = 0.0
    reasoner_prompt: str = ""
    summarizer_prompt: str = ""
    search_verdict: str = "none"
    unproven_statements: tuple = ()
    diagnostics: tuple = ()
    progress_flag: Optional[bool] = None

    def __post_init__(self):
        if self.t < 1:
            raise DomainError(f"round numbers start at 1, got {self.t}")
        object.__setattr__(self, "meta_action", MetaAction(self.meta_action))
        for name in ("new_lemmas", "admitted", "unproven_statements", "diagnostics"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        flag = len(self.new_lemmas) >= 1
        if self.progress_flag is None:
            object.__setattr__(self, "progress_flag", flag)
        elif self.progress_flag != flag:
            raise DomainError(
                f"round {self.t}: progress_flag={self.progress_flag} but "
                f"{len(self.new_lemmas)} new lemmas"
            )
        keys = {lem.key for lem in self.new_lemmas}
        if not set(self.admitted) <= keys:
            raise DomainError(f"round {self.t}: admitted keys not among its candidates")

    def admitted_lemmas(self) -> list:
        keys = set(self.admitted)
        return [lem for lem in self.new_lemmas if lem.key in keys]


@dataclass(frozen=True)
class RefinementStep:
    feedback: str
    revised_solution: str
    passes: int
    trials: int


@dataclass(frozen=True)
class Trajectory:
    problem_id: str
    rollout_id: str
    rounds: tuple = ()
    final_solution: str = ""
    refinement_log: tuple = ()
    pv_passes: int = 0
    pv_trials: int = 0
    outcome_correct: Optional[bool] = None
    final_reward: float = 0.0
    refinement_exhausted: bool = False
    improver_gave_up: bool = False
    aborted: Optional[str] = None
    max_rounds: Optional[int] = None
    outcome_gate: bool = True

    def __post_init__(self):
        object.__setattr__(self, "rounds", tuple(self.rounds))
        object.__setattr__(self, "refinement_log", tuple(self.refinement_log))
        if not 0 <= self.pv_passes <= self.pv_trials:
            raise DomainError(f"pv passes {self.pv_passes} outside [0, {self.pv_trials}]")
        if self.outcome_gate and self.outcome_correct is False and self.final_reward != 0:
            raise DomainError("an incorrect final answer must carry a zero final reward")
        if self.max_rounds is not None and len(self.rounds) > self.max_rounds:
            raise DomainError(f"{len(self.rounds)} rounds exceed the budget of {self.max_rounds}")

    @property
    def solved(self) -> bool:
        """Correct by outcome when known, otherwise by a unanimous process-verifier vote."""
        if self.outcome_correct is not None:
            return self.outcome_correct
        return self.pv_trials > 0 and self.pv_passes == self.pv_trials


@dataclass(frozen=True)
class BudgetConfig:
    max_rounds: int = 8
    verifier_samples: int = 4
    max_refinement_rounds: int = 8
    max_output_tokens: int = 65536
    parallel_rollouts: int = 1
    discount: float = 1.0
    lemma_confidence_threshold: Fraction = field(default_factory=lambda: Fraction(1, 2))

    def __post_init__(self):
        for name in (
            "max_rounds",
            "verifier_samples",
            "max_refinement_rounds",
            "max_output_tokens",
            "parallel_rollouts",
        ):
            if getattr(self, name) < 1:
                raise DomainError(f"budget {name} must be >= 1")
        if not 0.0 <= self.discount <= 1.0:
            raise DomainError(f"discount {self.discount} outside [0, 1]")
        object.__setattr__(
            self, "lemma_confidence_threshold", Fraction(self.lemma_confidence_threshold)
        )

    def admits(self, confidence: Fraction) -> bool:
        return confidence > self.lemma_confidence_threshold
