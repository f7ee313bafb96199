"""The agent loop: lemma search, summarization and verification rounds, then refinement.

One rollout runs on one logical thread and owns its ``RunState``. Fan-out
happens inside the provider (``sample_count`` votes) and across rollouts in
``Agent.solve_many``; the only shared object is the provider.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional

from .domain import (
    BudgetConfig,
    Diagnostic,
    DomainError,
    LemmaLibrary,
    MetaAction,
    Problem,
    ProblemKind,
    RefinementStep,
    Round,
    Trajectory,
    library_insert,
)
from .protocol import (
    PromptKind,
    SearchVerdict,
    TemplateSet,
    answers_match,
    gave_up,
    load_templates,
    parse_search_output,
    parse_summarizer_output,
    parse_verdict,
    render_lemma,
    render_prompt,
)
from .provider import DEFAULT_TEMPERATURES, CompletionProvider, CompletionRequest, ProviderError, Role
from .reward import RewardSpec, aggregate_pv_votes, final_reward

log = logging.getLogger(__name__)


class Phase(str, Enum):
    EXPLORING = "exploring"
    REFINING = "refining"
    DONE = "done"


_NEXT_PHASE = {Phase.EXPLORING: Phase.REFINING, Phase.REFINING: Phase.DONE}


@dataclass(frozen=True)
class RunState:
    problem: Problem
    rollout_id: str
    budget: BudgetConfig
    seed: int = 0
    library: LemmaLibrary = LemmaLibrary()
    rounds: tuple = ()
    phase: Phase = Phase.EXPLORING
    solution: str = ""

    def __post_init__(self):
        if len(self.rounds) > self.budget.max_rounds:
            raise DomainError(f"{len(self.rounds)} rounds exceed max_rounds={self.budget.max_rounds}")

    def advance(self, phase: Phase) -> "RunState":
        if phase is not self.phase and _NEXT_PHASE.get(self.phase) is not phase:
            raise DomainError(f"illegal phase change {self.phase.value} -> {phase.value}")
        return replace(self, phase=phase)


@dataclass(frozen=True)
class RefinementResult:
    solution: str
    passes: int
    trials: int
    log: tuple = ()
    exhausted: bool = False
    gave_up: bool = False


class ImproverGaveUp(Exception):
    """The improver answered that it found no complete solution.

    ``partial`` holds the refinement result up to (and excluding) that answer.
    """

    def __init__(self, partial: RefinementResult):
        super().__init__("improver gave up")
        self.partial = partial


class RolloutAborted(RuntimeError):
    def __init__(self, cause: Exception, partial: Trajectory):
        super().__init__(f"rollout {partial.rollout_id} aborted: {cause}")
        self.cause = cause
        self.partial = partial


def derive_seed(seed: int, *parts) -> int:
    """Stable 63-bit seed for one request, independent of scheduling order."""
    h = hashlib.sha256(repr((seed,) + tuple(str(p) for p in parts)).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big") >> 1


def rollout_id_for(problem: Problem, i: int) -> str:
    return f"{problem.id}-r{i:04d}"


class Agent:
    """Runs rollouts of the lemma-memory agent against one completion provider.

    ``on_event`` receives one dict per provider call (role, purpose, round,
    token usage) and is the hook the CLI uses for its run log.
    """

    def __init__(
        self,
        provider: CompletionProvider,
        budget: BudgetConfig = BudgetConfig(),
        reward_spec: RewardSpec = RewardSpec(),
        templates="v1",
        temperatures: Optional[dict] = None,
        seed: int = 0,
        answer_checker: Callable[[str, str], bool] = answers_match,
        on_event: Optional[Callable[[dict], None]] = None,
        wellformed_bonus: float = 0.0,
    ):
        self.provider = provider
        self.budget = budget
        self.reward_spec = reward_spec
        self.templates: TemplateSet = (
            load_templates(templates) if isinstance(templates, str) else templates
        )
        self.temperatures = {**DEFAULT_TEMPERATURES, **{Role(k): v for k, v in (temperatures or {}).items()}}
        self.seed = seed
        self.answer_checker = answer_checker
        self.on_event = on_event
        self.wellformed_bonus = wellformed_bonus

    # ------------------------------------------------------------ plumbing

    def _call(self, role: Role, prompt: str, n: int = 1, **tags) -> tuple:
        tags = {k: str(v) for k, v in tags.items() if v is not None}
        req = CompletionRequest.prompt(
            role,
            prompt,
            max_tokens=self.budget.max_output_tokens,
            temperature=self.temperatures[role],
            sample_count=n,
            seed=derive_seed(self.seed, role.value, *sorted(tags.items())),
            tags=tags,
        )
        result = self.provider.complete(req)
        if self.on_event is not None:
            self.on_event(
                {
                    **tags,
                    "role": role.value,
                    "samples": n,
                    "prompt_tokens": result.usage.prompt_tokens,
                    "completion_tokens": result.usage.completion_tokens,
                }
            )
        return result.samples

    def new_state(self, problem: Problem, rollout_id: Optional[str] = None) -> RunState:
        rollout_id = rollout_id or rollout_id_for(problem, 0)
        return RunState(problem, rollout_id, self.budget, derive_seed(self.seed, rollout_id))

    # ------------------------------------------------------------ one round

    def verify_lemma(self, lemma, lib: LemmaLibrary, problem: Problem, n: Optional[int] = None, **tags):
        """Confidence of ``lemma``: the fraction of ``n`` verifier votes finding no error."""
        n = n or self.budget.verifier_samples
        if n < 1:
            raise DomainError("verification needs n >= 1")
        prompt = render_prompt(
            PromptKind.LEMMA_VERIFY,
            problem,
            lib,
            {"NewLemmatoVerify": render_lemma(lemma)},
            self.templates,
        )
        samples = self._call(Role.THEOREM_VERIFIER, prompt, n, purpose="verify_lemma", lemma=lemma.key, **tags)
        k, trials = aggregate_pv_votes(parse_verdict(s) for s in samples)
        return lemma.with_confidence(k, trials).confidence

    def run_round(self, state: RunState) -> tuple:
        if state.phase is not Phase.EXPLORING:
            raise DomainError(f"run_round needs the exploring phase, state is {state.phase.value}")
        if len(state.rounds) >= self.budget.max_rounds:
            raise DomainError("round budget already spent")
        t = len(state.rounds) + 1
        problem, lib = state.problem, state.library
        tags = {"rollout": state.rollout_id, "round": t}

        search_prompt = render_prompt(PromptKind.LEMMA_SEARCH, problem, lib, None, self.templates)
        (thinking,) = self._call(Role.REASONER, search_prompt, purpose="search", **tags)
        search = parse_search_output(thinking)

        summ_prompt = render_prompt(
            PromptKind.LEMMA_SUMMARIZE, problem, lib, {"Thinking": thinking}, self.templates
        )
        (summary,) = self._call(Role.SUMMARIZER, summ_prompt, purpose="summarize", **tags)
        parsed = parse_summarizer_output(summary, lib)

        diagnostics = list(search.diagnostics) + list(parsed.diagnostics)
        candidates, admitted, seen = [], [], set()
        for lem in parsed.lemmas:
            if lem.key in seen:
                diagnostics.append(Diagnostic("duplicate_candidate", f"Lemma {lem.key} emitted twice; kept the first"))
                continue
            seen.add(lem.key)
            confidence = self.verify_lemma(lem, lib, problem, **tags)
            lem = replace(lem, confidence=confidence).with_origin(state.rollout_id, t)
            candidates.append(lem)
            if not self.budget.admits(lem.confidence):
                continue
            try:
                lib = library_insert(lib, lem)
            except DomainError as err:
                diagnostics.append(Diagnostic("not_admitted", f"Lemma {lem.key}: {err}"))
                continue
            admitted.append(lem.key)

        complete = search.verdict is SearchVerdict.COMPLETE
        if candidates and all(l.fixed_suffix for l in candidates):
            action = MetaAction.INVOKE_VERIFICATION
        elif complete and not candidates:
            action = MetaAction.COMMIT_ANSWER
        else:
            action = MetaAction.EXTRACT_LEMMAS
        clean = bool(candidates) and not parsed.diagnostics
        rnd = Round(
            t=t,
            meta_action=action,
            reasoner_output=thinking,
            summarizer_output=summary,
            new_lemmas=tuple(candidates),
            admitted=tuple(admitted),
            step_reward=self.wellformed_bonus if clean else 0.0,
            reasoner_prompt=search_prompt,
            summarizer_prompt=summ_prompt,
            search_verdict=search.verdict.value,
            unproven_statements=search.unproven_statements,
            diagnostics=tuple(diagnostics),
        )
        new_state = replace(state, library=lib, rounds=state.rounds + (rnd,))
        if thinking.strip():
            new_state = replace(new_state, solution=thinking)
        if complete:
            new_state = new_state.advance(Phase.REFINING)
        return new_state, rnd

    # ------------------------------------------------------------ refinement

    def _vote(self, problem: Problem, solution: str, n: int, **tags) -> tuple:
        prompt = render_prompt(
            PromptKind.FINAL_VERIFY, problem, None, {"response": solution}, self.templates
        )
        samples = self._call(Role.PROCESS_VERIFIER, prompt, n, purpose="final_verify", **tags)
        k, trials = aggregate_pv_votes(parse_verdict(s) for s in samples)
        return k, trials, samples

    def refine_solution(self, solution: str, problem: Problem, rollout_id: str = "", n: Optional[int] = None) -> RefinementResult:
        """Vote on the solution; on any dissent revise it, at most ``max_refinement_rounds`` votes.

        The returned ``passes`` always come from a vote on the returned solution.
        """
        if not solution.strip():
            raise DomainError("refinement needs a non-empty solution")
        n = n or self.reward_spec.n
        steps = []
        for i in range(self.budget.max_refinement_rounds):
            k, trials, samples = self._vote(problem, solution, n, rollout=rollout_id, refine=i)
            if k == trials:
                return RefinementResult(solution, k, trials, tuple(steps))
            if i == self.budget.max_refinement_rounds - 1:
                return RefinementResult(solution, k, trials, tuple(steps), exhausted=True)
            feedback = "\n\n".join(s for s in samples if not parse_verdict(s).passed)
            prompt = render_prompt(
                PromptKind.SELF_IMPROVE,
                problem,
                None,
                {"SolutiontoVerify": solution, "PreviousCheckingEfforts": feedback},
                self.templates,
            )
            (revised,) = self._call(Role.IMPROVER, prompt, purpose="improve", rollout=rollout_id, refine=i)
            if gave_up(revised) or not revised.strip():
                raise ImproverGaveUp(RefinementResult(solution, k, trials, tuple(steps), gave_up=True))
            steps.append(RefinementStep(feedback, revised, k, trials))
            solution = revised
        raise AssertionError("unreachable")  # pragma: no cover

    # ------------------------------------------------------------ rollouts

    def _trajectory(self, state: RunState, result: Optional[RefinementResult], aborted: Optional[str] = None) -> Trajectory:
        problem = state.problem
        base = dict(
            problem_id=problem.id,
            rollout_id=state.rollout_id,
            rounds=state.rounds,
            max_rounds=self.budget.max_rounds,
            outcome_gate=self.reward_spec.outcome_gate,
        )
        if result is None:
            return Trajectory(**base, final_solution=state.solution, aborted=aborted)
        outcome = None
        if problem.kind is ProblemKind.SOLUTION_BASED and problem.reference_answer is not None:
            outcome = bool(self.answer_checker(result.solution, problem.reference_answer))
        traj = Trajectory(
            **base,
            final_solution=result.solution,
            refinement_log=result.log,
            pv_passes=result.passes,
            pv_trials=result.trials,
            outcome_correct=outcome,
            refinement_exhausted=result.exhausted,
            improver_gave_up=result.gave_up,
            aborted=aborted,
        )
        return replace(traj, final_reward=final_reward(traj, self.reward_spec))

    def solve(self, problem: Problem, rollout_id: Optional[str] = None) -> Trajectory:
        state = self.new_state(problem, rollout_id)
        try:
            while state.phase is Phase.EXPLORING and len(state.rounds) < self.budget.max_rounds:
                state, _ = self.run_round(state)
            if state.phase is Phase.EXPLORING:
                state = state.advance(Phase.REFINING)
            if not state.solution.strip():
                # nothing to refine: every verifier vote counts as a failure
                n = self.reward_spec.n
                result = RefinementResult("", 0, n)
            else:
                try:
                    result = self.refine_solution(state.solution, problem, state.rollout_id)
                except ImproverGaveUp as stop:
                    result = stop.partial
            state = state.advance(Phase.DONE)
        except ProviderError as err:
            log.warning("rollout %s aborted: %s", state.rollout_id, err)
            raise RolloutAborted(err, self._trajectory(state, None, aborted=str(err))) from err
        return self._trajectory(state, result)

    def iter_solve(self, problem: Problem, rollouts: int, start: int = 0):
        """Yield ``rollouts`` independent trajectories in rollout order as they become available.

        Aborted rollouts contribute their partial trajectory (``aborted`` set).
        """
        ids = [rollout_id_for(problem, start + i) for i in range(rollouts)]

        def one(rid):
            try:
                return self.solve(problem, rid)
            except RolloutAborted as err:
                return err.partial

        workers = max(1, min(self.budget.parallel_rollouts, rollouts))
        if workers == 1:
            for rid in ids:
                yield one(rid)
            return
        with ThreadPoolExecutor(max_workers=workers) as pool:
            yield from pool.map(one, ids)

    def solve_many(self, problem: Problem, rollouts: int, start: int = 0) -> list:
        return list(self.iter_solve(problem, rollouts, start))
