"""Figures written next to the tab-separated reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "figure.figsize": (6.0, 3.6),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(step_losses, val_sisdr, noisy_sisdr, path) -> Path:
    with plt.rc_context(_STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2)
        ax1.plot(range(1, len(step_losses) + 1), step_losses, lw=1)
        ax1.set_yscale("log")
        ax1.set_xlabel("step")
        ax1.set_ylabel("loss")
        if val_sisdr:
            ax2.plot(range(len(val_sisdr)), val_sisdr, marker="o", ms=3, label="enhanced")
            ax2.axhline(noisy_sisdr, color="k", ls="--", lw=1, label="noisy")
            ax2.legend()
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("val SI-SDR (dB)")
        return _save(fig, path)


def plot_scan_bench(rows: list[dict], path) -> Path:
    """``rows`` carry ``mode``, ``len`` and ``steps_per_s``."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for mode in sorted({r["mode"] for r in rows}):
            pts = sorted((r["len"], r["steps_per_s"]) for r in rows if r["mode"] == mode)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, label=mode)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("sequence length")
        ax.set_ylabel("steps / s")
        ax.legend()
        return _save(fig, path)


def plot_latency(latencies_ms, budget_ms: float, path) -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(latencies_ms, lw=0.8)
        ax.axhline(budget_ms, color="r", ls="--", lw=1, label=f"{budget_ms:g} ms budget")
        ax.set_xlabel("frame")
        ax.set_ylabel("compute (ms)")
        ax.legend()
        return _save(fig, path)
