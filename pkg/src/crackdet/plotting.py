"""Report figures rendered to files with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import PrecisionRecall, beta_sweep  # noqa: E402

_BAR_METRICS = ("precision", "recall", "f_beta@0.3", "af_beta")


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_method_bars(report: dict, path) -> Path:
    """Aggregate precision, recall, F and AF for every method."""
    methods = report["methods"]
    x = np.arange(len(_BAR_METRICS))
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    for k, m in enumerate(methods):
        agg = report["aggregate"][m]
        ax.bar(x + k * width, [agg.get(f) or 0.0 for f in _BAR_METRICS], width, label=m)
    ax.set_xticks(x + width * (len(methods) - 1) / 2, _BAR_METRICS)
    ax.set_ylim(0, 1)
    ax.set_ylabel("score")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_beta_sweep(report: dict, path, grid=None) -> Path:
    """F as a function of beta^2 from each method's aggregate precision and recall."""
    grid = np.linspace(0.02, 1.0, 99) if grid is None else np.asarray(grid)
    lo, hi = report["beta_range"]
    fig, ax = plt.subplots(figsize=(6, 4))
    for m in report["methods"]:
        agg = report["aggregate"][m]
        p, r = agg.get("precision") or 0.0, agg.get("recall") or 0.0
        if p + r == 0:
            continue
        sweep = beta_sweep(PrecisionRecall(p, r), grid)
        ax.plot([b for b, _ in sweep], [f for _, f in sweep], label=m)
    ax.axvspan(lo, hi, color="0.85", label="AF range")
    ax.set_xlabel("beta^2")
    ax.set_ylabel("F")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_per_image(report: dict, path, method: str = "cbat", baseline: str = "fixed",
                   metric: str = "f_beta@0.3") -> Path:
    """Per-image scatter of ``method`` against ``baseline``; points above the diagonal favour ``method``."""
    base = {r["id"]: r[metric] for r in report["images"] if r["method"] == baseline}
    pairs = [(base[r["id"]], r[metric]) for r in report["images"] if r["method"] == method and r["id"] in base]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    if pairs:
        a, b = np.array(pairs).T
        ax.scatter(a, b, s=12)
    ax.plot([0, 1], [0, 1], color="0.5", lw=0.8)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel(f"{baseline} {metric}")
    ax.set_ylabel(f"{method} {metric}")
    return _save(fig, path)


def render_report_figures(report: dict, out_dir, stem: str = "report") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"bars": plot_method_bars(report, out / f"{stem}_methods.png"),
             "beta_sweep": plot_beta_sweep(report, out / f"{stem}_beta_sweep.png")}
    methods = report["methods"]
    if len(methods) >= 2:
        method = "cbat" if "cbat" in methods else methods[-1]
        baseline = "fixed" if "fixed" in methods and method != "fixed" else methods[0]
        paths["per_image"] = plot_per_image(report, out / f"{stem}_per_image.png", method, baseline)
    return paths


def plot_training_log(log: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r["epoch"] for r in log], [r["loss"] for r in log], marker="o", label="train")
    if log and "val_loss" in log[0]:
        ax.plot([r["epoch"] for r in log], [r["val_loss"] for r in log], marker="s", label="held-out")
    ax.set_xlabel("epoch")
    ax.set_ylabel("objective")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, path)


def plot_posterior(rows: list[tuple[float, float, float]], path) -> Path:
    xs, direct, via = (np.array(c) for c in zip(*rows))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, direct, label="Bayes rule")
    ax.plot(xs, via, "--", label="sigmoid(w x + w0)")
    ax.set_xlabel("intensity")
    ax.set_ylabel("P(crack | x)")
    ax.legend()
    return _save(fig, path)


def plot_calibration(table: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r["contrast_stop"] for r in table], [r["mean_af_beta"] for r in table], marker="o")
    ax.set_xlabel("C_s")
    ax.set_ylabel("mean AF")
    return _save(fig, path)
