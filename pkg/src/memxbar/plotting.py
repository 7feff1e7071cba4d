"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_threshold_sweep(reports: dict, path) -> Path:
    """Accuracy against decision threshold for one or more digits runs.

    Args:
        reports: label -> DigitsReport.  The software curve of the first
            report is drawn as a dashed reference.
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    first = next(iter(reports.values()))
    ax.plot(first.thresholds, first.software_accuracy, "k--", lw=1, label="software")
    for label, rep in reports.items():
        ax.plot(rep.thresholds, rep.accuracy, lw=1.5,
                label=f"{label} (best {rep.best_accuracy:.3f})")
    ax.set_xlabel("threshold on p(class 1)")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower center")
    return _save(fig, path)


def plot_robot_commands(report, path) -> Path:
    """True versus chip-predicted commands over the test samples."""
    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    order = report.times.argsort()
    t = report.times[order]
    for ax, ch, name in zip(axes, (0, 1), ("v_cmd", "steer_cmd")):
        ax.plot(t, report.truth[order, ch], "k.", ms=3, label="true")
        ax.plot(t, report.pred_software[order, ch], ".", ms=3, alpha=0.6, label="software")
        ax.plot(t, report.pred_chip[order, ch], ".", ms=3, alpha=0.8, label="chip (fine-tuned)")
        ax.set_ylabel(name)
        ax.grid(alpha=0.3)
    axes[0].legend(loc="best", fontsize="small")
    axes[1].set_xlabel("t [s]")
    axes[0].set_title(f"RMSE software {report.rmse_software:.4f}, "
                      f"chip {report.rmse_finetuned:.4f}, "
                      f"chip w/o fine-tune {report.rmse_no_finetune:.4f}", fontsize="small")
    return _save(fig, path)


def plot_programming(report, path) -> Path:
    """Absolute programming error per iteration for every cell of an array run."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for r in report.cells:
        ax.semilogy(range(1, len(r.error_trace) + 1),
                    [max(abs(e), 1e-6) for e in r.error_trace], lw=0.6, alpha=0.6)
    ax.set_xlabel("iteration")
    ax.set_ylabel("|target - read|")
    ax.set_title(f"{report.method}: {len(report.converged_cells)}/{report.n_programmed} converged")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
