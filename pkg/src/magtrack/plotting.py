"""Report figures written straight to PNG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({"figure.dpi": 110, "font.size": 9, "axes.spines.top": False, "axes.spines.right": False})


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_history(history, path, title="training"):
    epochs = [r["epoch"] for r in history]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.semilogy(epochs, [r["train_loss"] for r in history], "o-", label="train")
    ax.semilogy(epochs, [r["test_loss"] for r in history], "s-", label="test")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_loss_curves(curves, path):
    """Several test-loss curves on one axis; ``curves`` maps label to history."""
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for label, history in curves.items():
        ax.semilogy([r["epoch"] for r in history], [r["test_loss"] for r in history], "o-", label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test loss")
    ax.legend()
    return _save(fig, path)


def plot_error_boxes(groups, path):
    """Side-by-side position/orientation error box plots; ``groups`` maps label to (e_p, e_theta)."""
    labels = list(groups)
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(7, 3))
    a0.boxplot([groups[k][0] for k in labels], showfliers=False)
    a1.boxplot([groups[k][1] for k in labels], showfliers=False)
    for ax, unit in ((a0, "position error (mm)"), (a1, "orientation error (deg)")):
        ax.set_xticks(range(1, len(labels) + 1), labels, rotation=20)
        ax.set_ylabel(unit)
    return _save(fig, path)


def plot_perturbation_sweep(summary, path):
    """Median position error against iteration budget, one line per initial tilt."""
    fig, ax = plt.subplots(figsize=(4.5, 3))
    conds = sorted({(s["init_dp"], s["init_dtheta"]) for s in summary})
    for dp, dth in conds:
        rows = sorted((s for s in summary if (s["init_dp"], s["init_dtheta"]) == (dp, dth)), key=lambda s: s["max_iter"])
        ax.semilogy(
            [s["max_iter"] for s in rows],
            [max(s["e_p_mm"]["median"], 1e-6) for s in rows],
            "o-",
            label=f"{dp:g} mm / {dth:g} deg",
        )
    ax.set_xlabel("L-BFGS iterations")
    ax.set_ylabel("median position error (mm)")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_timing(report, path):
    names = list(report)
    med = [report[n]["median_us"] / 1e3 for n in names]
    err = np.array([[m - report[n]["q1_us"] / 1e3, report[n]["q3_us"] / 1e3 - m] for n, m in zip(names, med)]).T
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.bar(names, med, yerr=err, capsize=3, color="0.6")
    ax.set_ylabel("median wall time (ms)")
    return _save(fig, path)


def plot_step_histograms(step_mm, step_deg, path, target_mm=None, target_deg=None):
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(7, 3))
    a0.hist(step_mm, bins=60, color="0.5")
    a0.set_xlabel("step displacement (mm)")
    a1.hist(step_deg, bins=60, color="0.5")
    a1.set_xlabel("step rotation (deg)")
    for ax, target in ((a0, target_mm), (a1, target_deg)):
        if target is not None:
            ax.axvline(target, color="k", ls="--", lw=1)
    return _save(fig, path)


def plot_tracking(t, e_p, e_theta, path):
    fig, (a0, a1) = plt.subplots(2, 1, figsize=(6, 4), sharex=True)
    a0.plot(t, e_p, lw=0.8)
    a0.set_ylabel("position error (mm)")
    a1.plot(t, e_theta, lw=0.8)
    a1.set_ylabel("orientation error (deg)")
    a1.set_xlabel("time (s)")
    return _save(fig, path)
