"""Plotting: per-episode force traces and attention-mass curves."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluate import EvalReport

logger = logging.getLogger(__name__)

SMOOTHING_WINDOW = 10


def moving_average(x: np.ndarray, window: int = SMOOTHING_WINDOW) -> np.ndarray:
    if len(x) == 0:
        return x
    window = min(window, len(x))
    kernel = np.ones(window) / window
    return np.convolve(x, kernel, mode="same")


def plot_traces(
    report: EvalReport,
    out_dir: str | Path,
    force_limit: float | None = None,
    force_target: float | None = None,
    hold_band: float | None = None,
    max_episodes: int = 10,
) -> list[Path]:
    """Write force-vs-time plots (with limit/target bands), per-episode trace
    CSVs, and attention-mass curves when the report carries them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    if not report.force_traces:
        logger.warning("report has no force traces; nothing to plot")
        return written

    for i, trace in enumerate(report.force_traces[:max_episodes]):
        t = trace[:, 0]
        force = trace[:, 1:]
        mag = np.linalg.norm(force, axis=1)
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(t, mag, label="|f| measured", color="tab:blue")
        ax.plot(t, force[:, -1], label="normal component", color="tab:cyan", alpha=0.7)
        if force_limit is not None:
            ax.axhline(force_limit, color="tab:red", linestyle="--", label=f"limit {force_limit:g} N")
        if force_target is not None and hold_band is not None:
            ax.axhspan(
                force_target - hold_band, force_target + hold_band,
                color="tab:green", alpha=0.15, label="hold band",
            )
        ax.set_xlabel("time [s]")
        ax.set_ylabel("force [N]")
        ok = report.episodes[i].success if i < len(report.episodes) else None
        ax.set_title(f"episode {i} ({'success' if ok else report.episodes[i].failure_reason})")
        ax.legend(loc="upper left", fontsize=8)
        fig.tight_layout()
        path = out_dir / f"force_trace_{i:04d}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)

        csv_path = out_dir / f"force_trace_{i:04d}.csv"
        header = "time," + ",".join(f"f{j}" for j in range(force.shape[1]))
        np.savetxt(csv_path, trace, delimiter=",", header=header, comments="")
        written.append(csv_path)

    if report.attention:
        written.append(_plot_attention(report, out_dir))
    return written


def _plot_attention(report: EvalReport, out_dir: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    ep = report.attention[0]
    force_mass = np.array([s["force_mass"] for s in ep])
    visual_mass = np.array([s["visual_mass"] for s in ep])
    steps = np.arange(len(ep))
    ax.plot(steps, moving_average(force_mass), label="force tokens", color="tab:orange")
    ax.plot(steps, moving_average(visual_mass), label="visual tokens", color="tab:blue")
    contact = np.array([s["in_contact"] for s in ep], dtype=bool)
    if contact.any():
        ax.fill_between(
            steps, 0, 1, where=contact, color="tab:gray", alpha=0.15,
            transform=ax.get_xaxis_transform(), label="in contact",
        )
    ax.set_xlabel("control step")
    ax.set_ylabel(f"attention mass (window {SMOOTHING_WINDOW} smoothed)")
    ax.set_ylim(0, 1)
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    path = out_dir / "attention_mass.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
