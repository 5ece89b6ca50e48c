"""Experiment trace emission: the per-round CSV, the machine-readable
summary, and rendered accuracy/entropy curve figures."""

from __future__ import annotations

import json
from pathlib import Path

from .pipeline import PhaseLabel, RunRecord, SweepResult, label_phases

CSV_HEADER = "round,sparsity,train_acc,val_acc,test_acc,entropy_avg,flops_cumulative"

PHASE_COLORS = {
    "light": "#d3e8f5",
    "critical": "#f6d3d3",
    "sweet": "#d8f0d3",
    "collapsed": "#e0d3f0",
}


def emit_csv(records: list[RunRecord], path) -> None:
    """Fixed 6-decimal floats, rows in round order, '\\n' newlines."""
    if not records:
        raise ValueError("no records to emit")
    lines = [CSV_HEADER]
    for r in records:
        lines.append(f"{r.round},{r.sparsity:.6f},{r.train_acc:.6f},{r.val_acc:.6f},"
                     f"{r.test_acc:.6f},{r.entropy_avg:.6f},{r.flops_cumulative}")
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def read_csv(path) -> list[RunRecord]:
    lines = Path(path).read_text().strip().split("\n")
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"unexpected CSV header in {path}")
    records = []
    for line in lines[1:]:
        parts = line.split(",")
        records.append(RunRecord(round=int(parts[0]), sparsity=float(parts[1]),
                                 train_acc=float(parts[2]), val_acc=float(parts[3]),
                                 test_acc=float(parts[4]), entropy_avg=float(parts[5]),
                                 flops_cumulative=int(parts[6])))
    return records


def summarize(records: list[RunRecord], best_round: int, phases: PhaseLabel,
              gate_round: int | None = None) -> dict:
    best = records[best_round]
    summary = {
        "best_round": best_round,
        "best_val_acc": round(best.val_acc, 6),
        "best_test_acc": round(best.test_acc, 6),
        "sparsity_at_best": round(best.sparsity, 6),
        "flops_cumulative": records[-1].flops_cumulative,
        "phase_of_best": phases.labels[best_round],
        "rounds": len(records) - 1,
    }
    if gate_round is not None:
        summary["entropy_gate_round"] = gate_round
    return summary


def emit_summary(result: SweepResult, path, margin: float = 0.01) -> dict:
    phases = label_phases(result.records, margin)
    summary = summarize(result.records, result.best_round, phases, result.gate_round)
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def render_curves(records: list[RunRecord], phases: PhaseLabel, path,
                  title: str = "") -> None:
    """Accuracy and entropy vs pruning round, with phase bands shaded."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rounds = [r.round for r in records]
    fig, (ax_acc, ax_ent) = plt.subplots(
        2, 1, sharex=True, figsize=(7, 6),
        gridspec_kw={"height_ratios": [2, 1]})

    seen = set()
    for idx, label in enumerate(phases.labels):
        legend = label if label not in seen else None
        seen.add(label)
        ax_acc.axvspan(rounds[idx] - 0.5, rounds[idx] + 0.5,
                       color=PHASE_COLORS[label], lw=0, label=legend)
    ax_acc.plot(rounds, [r.train_acc for r in records], "o-", ms=3, label="train")
    ax_acc.plot(rounds, [r.val_acc for r in records], "s-", ms=3, label="val")
    ax_acc.plot(rounds, [r.test_acc for r in records], "d-", ms=3, label="test")
    best = max(range(len(records)), key=lambda i: (records[i].val_acc, -i))
    ax_acc.plot([rounds[best]], [records[best].val_acc], "k*", ms=12, label="best")
    ax_acc.set_ylabel("top-1 accuracy")
    ax_acc.legend(loc="lower left", fontsize=8, ncol=2)
    if title:
        ax_acc.set_title(title)

    ax_ent.plot(rounds, [r.entropy_avg for r in records], "o-", ms=3, color="tab:purple")
    ax_ent.set_ylabel("entropy [bits]")
    ax_ent.set_xlabel("pruning round")

    ax_top = ax_acc.secondary_xaxis("top")
    ax_top.set_xticks(rounds[:: max(1, len(rounds) // 8)])
    ax_top.set_xticklabels([f"{records[i].sparsity:.2f}"
                            for i in range(0, len(records), max(1, len(rounds) // 8))],
                           fontsize=7)
    ax_top.set_xlabel("sparsity", fontsize=8)

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
