"""Report figures rendered alongside the CSV outputs.

Matches the presentation of the evaluation: accuracy versus fault rate
with min/max error bars per mitigation mode, and per-epoch retraining
traces.  Uses the Agg backend so rendering works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

MODE_STYLES = {
    "none": dict(color="tab:gray", marker="s", label="baseline (no faults)"),
    "inject": dict(color="tab:red", marker="v", label="faulty, no mitigation"),
    "faq": dict(color="tab:blue", marker="o", label="fault-aware quantization"),
    "faq-pfll": dict(color="tab:green", marker="^",
                     label="fault-aware quantization + protected first/last"),
}


def plot_sweep_summary(summary_rows: list[dict], out_path) -> None:
    """Accuracy vs fault rate, one line per mode, min/max error bars.

    ``summary_rows`` are dicts with keys rate, mode, mean_accuracy,
    min_accuracy, max_accuracy (the summary CSV rows).
    """
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    modes = sorted({row["mode"] for row in summary_rows})
    for mode in modes:
        rows = sorted((r for r in summary_rows if r["mode"] == mode),
                      key=lambda r: r["rate"])
        rates = [r["rate"] for r in rows]
        mean = [r["mean_accuracy"] for r in rows]
        low = [m - r["min_accuracy"] for m, r in zip(mean, rows)]
        high = [r["max_accuracy"] - m for m, r in zip(mean, rows)]
        style = MODE_STYLES.get(mode, dict(marker="x", label=mode))
        ax.errorbar(rates, mean, yerr=[low, high], capsize=3, **style)
    ax.set_xlabel("fault rate")
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_retrain_traces(traces: dict[int, list[float]], use_faq: bool,
                        out_path) -> None:
    """Per-seed retraining accuracy traces plus their mean."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    epochs = None
    for seed, trace in sorted(traces.items()):
        epochs = range(len(trace))
        ax.plot(epochs, trace, alpha=0.35, linewidth=1.0,
                label=f"seed {seed}" if len(traces) <= 6 else None)
    if traces:
        length = min(len(t) for t in traces.values())
        mean = [sum(t[e] for t in traces.values()) / len(traces)
                for e in range(length)]
        ax.plot(range(length), mean, color="black", linewidth=2.0, label="mean")
    ax.set_xlabel("retraining epoch")
    ax.set_ylabel("top-1 accuracy (read through faults)")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.set_title("retraining " + ("with" if use_faq else "without") + " FAQ")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
