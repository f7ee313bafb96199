"""Round-level credit assignment over a cross-rollout lemma dependency graph.

Lemmas from all rollouts of one problem are merged by statement identity.
An edge ``l -> l'`` means the proof of ``l'`` cites ``l``. Values flow
backwards from the lemmas the successful final solutions rely on:

* a terminal node is worth the mean final reward of the rollouts using it,
* any other node is worth the mean value of its successors,
* a node with neither is worth 0.

A round's state value is the best value among the lemmas it produced, and
its advantage is the TD error to the next round that produced any lemma.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from graphlib import TopologicalSorter
from typing import Optional

from .domain import Diagnostic, Trajectory, statement_identity

_FINAL_CITATION_RE = re.compile(r"\blemma\s+(\d+)(?:-fixed)?\b", re.IGNORECASE)


@dataclass
class Node:
    key: str
    statement: str
    label: str
    rollouts: set = field(default_factory=set)
    admitted: bool = False
    contributing: bool = False

    @property
    def occurrences(self) -> int:
        return len(self.rollouts)


@dataclass
class LemmaGraph:
    problem_id: Optional[str]
    nodes: dict = field(default_factory=dict)
    edges: set = field(default_factory=set)
    terminal_rewards: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)

    def successors(self, key: str) -> list:
        return sorted(b for a, b in self.edges if a == key)

    def predecessors(self, key: str) -> list:
        return sorted(a for a, b in self.edges if b == key)

    def _reaches(self, src: str, dst: str) -> bool:
        stack, seen = [src], set()
        while stack:
            cur = stack.pop()
            if cur == dst:
                return True
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(b for a, b in self.edges if a == cur)
        return False

    def add_edge(self, src: str, dst: str) -> bool:
        """Add ``src -> dst`` unless it is a self-loop or closes a cycle."""
        if src == dst or (src, dst) in self.edges:
            return False
        if self._reaches(dst, src):
            self.diagnostics.append(
                Diagnostic("cycle_dropped", f"edge {src} -> {dst} would close a cycle")
            )
            return False
        self.edges.add((src, dst))
        return True


@dataclass(frozen=True)
class AdvantageRecord:
    rollout_id: str
    t: int
    advantage: float
    masked: bool
    state_value: Optional[float] = None
    next_value: Optional[float] = None

    def __post_init__(self):
        if self.masked and self.advantage != 0:
            raise ValueError("masked advantages must be 0")


def _rollout_lemmas(traj: Trajectory, admitted_only: bool):
    for rnd in traj.rounds:
        chosen = rnd.admitted_lemmas() if admitted_only else rnd.new_lemmas
        admitted = set(rnd.admitted)
        for lem in chosen:
            yield rnd, lem, lem.key in admitted


def build_graph(trajectories, admitted_only: bool = False) -> LemmaGraph:
    """Merge the lemmas of several rollouts of one problem into a DAG.

    Citations are resolved inside each rollout to the latest earlier lemma
    carrying the cited number (its ``-fixed`` version when one exists).
    The lemmas a rewarded final solution cites become terminal nodes; when
    the solution cites none, the lemmas of its last progress round stand in.
    """
    trajectories = sorted(trajectories, key=lambda tr: tr.rollout_id)
    problem_ids = {tr.problem_id for tr in trajectories}
    if len(problem_ids) > 1:
        raise ValueError(f"trajectories span several problems: {sorted(problem_ids)}")
    g = LemmaGraph(problem_ids.pop() if problem_ids else None)

    for traj in trajectories:
        seen_by_index: dict = {}
        fixed: set = set()
        last_progress: list = []
        for rnd, lem, admitted in _rollout_lemmas(traj, admitted_only):
            key = statement_identity(lem.statement)
            node = g.nodes.get(key)
            if node is None:
                node = g.nodes[key] = Node(key, lem.statement, f"{traj.rollout_id}:{lem.key}")
            node.rollouts.add(traj.rollout_id)
            node.admitted = node.admitted or admitted
            for cited in sorted(lem.cited_indices):
                src = seen_by_index.get(cited)
                if src is None:
                    g.diagnostics.append(
                        Diagnostic(
                            "unresolved_citation",
                            f"{traj.rollout_id} round {rnd.t}: Lemma {lem.key} cites unknown Lemma {cited}",
                        )
                    )
                    continue
                g.add_edge(src, key)
            if lem.fixed_suffix:
                seen_by_index[lem.index] = key
                fixed.add(lem.index)
            elif lem.index not in fixed:
                seen_by_index[lem.index] = key
        for rnd in traj.rounds:
            if rnd.progress_flag:
                chosen = rnd.admitted_lemmas() if admitted_only else rnd.new_lemmas
                if chosen:
                    last_progress = [statement_identity(l.statement) for l in chosen]

        if traj.final_reward == 0:
            continue
        cited = {int(m.group(1)) for m in _FINAL_CITATION_RE.finditer(traj.final_solution)}
        terminals = [seen_by_index[i] for i in sorted(cited) if i in seen_by_index]
        if not terminals:
            terminals = last_progress
        for key in dict.fromkeys(terminals):
            g.terminal_rewards.setdefault(key, []).append(float(traj.final_reward))

    _mark_contributing(g)
    return g


def _mark_contributing(g: LemmaGraph):
    frontier = list(g.terminal_rewards)
    seen = set()
    while frontier:
        cur = frontier.pop()
        if cur in seen:
            continue
        seen.add(cur)
        frontier.extend(a for a, b in g.edges if b == cur)
    for key, node in g.nodes.items():
        node.contributing = key in seen


def backpropagate_values(g: LemmaGraph, weighting: str = "uniform") -> dict:
    """Lemma values by a reverse-topological sweep.

    ``weighting="occurrence"`` weights successors by how many rollouts
    produced them instead of averaging them uniformly.
    """
    if weighting not in ("uniform", "occurrence"):
        raise ValueError(f"unknown weighting {weighting!r}")
    succ = {k: [] for k in g.nodes}
    for a, b in g.edges:
        succ[a].append(b)
    order = TopologicalSorter({k: set(v) for k, v in succ.items()}).static_order()
    values = {}
    for key in order:  # successors come first
        rewards = g.terminal_rewards.get(key)
        if rewards:
            values[key] = sum(rewards) / len(rewards)
        elif succ[key]:
            if weighting == "occurrence":
                w = [g.nodes[s].occurrences for s in succ[key]]
                values[key] = sum(wi * values[s] for wi, s in zip(w, succ[key])) / sum(w)
            else:
                values[key] = sum(values[s] for s in succ[key]) / len(succ[key])
        else:
            values[key] = 0.0
    return values


def state_value(round_, values: dict) -> Optional[float]:
    """Best value among the round's lemmas; ``None`` when it produced none."""
    if not round_.new_lemmas:
        return None
    return max(values.get(statement_identity(l.statement), 0.0) for l in round_.new_lemmas)


def compute_advantages(traj: Trajectory, values: dict, gamma: float = 1.0) -> list:
    progress = [r for r in traj.rounds if r.progress_flag]
    nxt = {}
    for cur, following in zip(progress, progress[1:] + [None]):
        nxt[cur.t] = following
    out = []
    for rnd in traj.rounds:
        if not rnd.progress_flag:
            out.append(AdvantageRecord(traj.rollout_id, rnd.t, 0.0, True))
            continue
        v = state_value(rnd, values)
        following = nxt[rnd.t]
        target = float(traj.final_reward) if following is None else state_value(following, values)
        a = rnd.step_reward + gamma * target - v
        out.append(AdvantageRecord(traj.rollout_id, rnd.t, a, False, v, target))
    return out


# ---------------------------------------------------------------- export


def graph_edge_list(g: LemmaGraph) -> str:
    """Plain-text edge list: one ``src dst`` pair per line, sorted."""
    return "".join(f"{a} {b}\n" for a, b in sorted(g.edges))


def graph_document(g: LemmaGraph, values: Optional[dict] = None) -> dict:
    values = values if values is not None else backpropagate_values(g)
    return {
        "problem_id": g.problem_id,
        "nodes": [
            {
                "key": n.key,
                "label": n.label,
                "statement": n.statement,
                "occurrences": n.occurrences,
                "admitted": n.admitted,
                "contributing": n.contributing,
                "terminal_rewards": g.terminal_rewards.get(n.key, []),
                "value": values.get(n.key, 0.0),
            }
            for n in sorted(g.nodes.values(), key=lambda n: n.key)
        ],
        "edges": [list(e) for e in sorted(g.edges)],
        "diagnostics": [{"kind": d.kind, "message": d.message} for d in g.diagnostics],
    }


def graph_json(g: LemmaGraph, values: Optional[dict] = None) -> str:
    return json.dumps(graph_document(g, values), indent=2, sort_keys=True, ensure_ascii=False)
