"""CSV tables and matplotlib figures for command outputs.

Figures are rendered with the non-interactive Agg backend straight to files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
}


def write_csv(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(rows)
    return path


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_advantages(records, path, title: str = "Round advantages") -> Path:
    """Bar chart of per-round advantages, one group of bars per rollout; masked rounds hatched."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        rollouts = sorted({r.rollout_id for r in records})
        width = 0.8 / max(1, len(rollouts))
        for j, rid in enumerate(rollouts):
            mine = sorted((r for r in records if r.rollout_id == rid), key=lambda r: r.t)
            xs = [r.t + (j - (len(rollouts) - 1) / 2) * width for r in mine]
            bars = ax.bar(xs, [r.advantage for r in mine], width, label=rid)
            for bar, rec in zip(bars, mine):
                if rec.masked:
                    bar.set_hatch("//")
                    bar.set_alpha(0.4)
        ax.axhline(0, color="black", linewidth=0.8)
        ax.set_xlabel("round")
        ax.set_ylabel("advantage")
        ax.set_title(title)
        if len(rollouts) <= 10:
            ax.legend(fontsize=8)
        return _save(fig, path)


def plot_values(values: dict, contributing: set, path, title: str = "Lemma values") -> Path:
    """Sorted lemma values; contributing lemmas in a second color."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        items = sorted(values.items(), key=lambda kv: (-kv[1], kv[0]))
        colors = ["tab:red" if k in contributing else "tab:gray" for k, _ in items]
        ax.bar(range(len(items)), [v for _, v in items], color=colors)
        ax.set_xlabel("lemma (sorted by value)")
        ax.set_ylabel("value")
        ax.set_title(title)
        return _save(fig, path)


def plot_pass_rates(report, path, title: str = "Benchmark") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        probs = report.problems
        ks = report.ks
        width = 0.8 / max(1, len(ks))
        for j, k in enumerate(ks):
            xs = [i + (j - (len(ks) - 1) / 2) * width for i in range(len(probs))]
            ax.bar(xs, [p.pass_at.get(k, 0.0) for p in probs], width, label=f"pass@{k}")
        ax.set_xticks(range(len(probs)))
        ax.set_xticklabels([p.problem_id for p in probs], rotation=30, ha="right")
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("rate")
        ax.set_title(title)
        ax.legend(fontsize=8)
        return _save(fig, path)


def plot_grade(report, path, title: str = "Judge runs") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        totals = [float(r.total) for r in report.per_run]
        ax.bar(range(1, len(totals) + 1), totals, color="tab:blue")
        ax.axhline(report.mean_total, color="tab:red", linestyle="--", label=f"mean {report.mean_total:.3f}")
        ax.set_ylim(0, report.rubric_total * 1.05)
        ax.set_xlabel("judge run")
        ax.set_ylabel("points")
        ax.set_title(title)
        ax.legend(fontsize=8)
        return _save(fig, path)


def plot_reward_curve(ns, path, reward_fn) -> Path:
    """``reward_fn(k, n)`` against the pass fraction k/n for each n."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for n in ns:
            ks = list(range(n + 1))
            ax.plot([k / n for k in ks], [reward_fn(k, n) for k in ks], marker="o", markersize=3, label=f"n={n}")
        ax.set_xlabel("pass fraction k/n")
        ax.set_ylabel("reward")
        ax.legend(fontsize=8)
        return _save(fig, path)
