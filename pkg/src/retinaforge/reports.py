"""Report emission: delimited files, aligned text tables, and figures.

Every evaluation writes a CSV plus a plain-text table with the metric
columns in AUC, SE, SP, AC, F1 order; figures (ROC curve, training
history, parameter budgets) render to PNG next to them.
"""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

METRIC_COLUMNS = ["AUC", "SE", "SP", "AC", "F1"]


def _fmt(value, digits=4):
    if value is None:
        return "NA"
    return f"{value:.{digits}f}"


def metrics_to_csv(reports, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scope"] + METRIC_COLUMNS + ["TP", "FP", "TN", "FN"])
        for rep in reports:
            row = [rep.scope] + [_fmt(v) for v in rep.metric_row()]
            row += [rep.counts.tp, rep.counts.fp, rep.counts.tn, rep.counts.fn]
            writer.writerow(row)


def metrics_table(reports, title=None):
    """Aligned text table of the same rows."""
    header = ["scope"] + METRIC_COLUMNS
    rows = [[rep.scope] + [_fmt(v) for v in rep.metric_row()] for rep in reports]
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)


def params_table(rows):
    """Parameter/size table mirroring the comparison-table row layout.

    ``rows`` is a list of (model name, parameter count, size in bytes).
    """
    names = [r[0] for r in rows]
    params = [f"{r[1]:,}" for r in rows]
    sizes = [f"{r[2] / 1e6:.2f}" for r in rows]
    widths = [
        max(len(n), len(p), len(s), 10) for n, p, s in zip(names, params, sizes)
    ]
    head = "Model           " + "  ".join(n.rjust(w) for n, w in zip(names, widths))
    prow = "Parameters      " + "  ".join(p.rjust(w) for p, w in zip(params, widths))
    srow = "Size (in MB)    " + "  ".join(s.rjust(w) for s, w in zip(sizes, widths))
    return "\n".join([head, prow, srow])


def save_roc_figure(curves, path, title="ROC"):
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, curve in curves.items():
        ax.plot(curve.fpr, curve.tpr, label=name, linewidth=1.2)
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.7, alpha=0.5)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    if curves:
        ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_history_figure(history, path):
    """Training/validation loss curves with the LR trace on a twin axis."""
    epochs = [r[0] for r in history.rows]
    lrs = [r[1] for r in history.rows]
    tr = [r[2] for r in history.rows]
    va = [r[3] for r in history.rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, tr, label="train loss")
    ax.plot(epochs, va, label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("composite BCE")
    ax2 = ax.twinx()
    ax2.plot(epochs, lrs, "g:", label="lr", alpha=0.6)
    ax2.set_yscale("log")
    ax2.set_ylabel("learning rate")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_params_figure(counts, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = list(counts)
    ax.bar(names, [counts[n] for n in names], color="#4878a8")
    ax.set_yscale("log")
    ax.set_ylabel("trainable parameters")
    for i, n in enumerate(names):
        ax.text(i, counts[n], f"{counts[n]/1e6:.3g}M", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
