"""DET curve figures.

Rendering is headless (Agg) and deterministic: the SVG hash salt is pinned
and the creation date metadata is dropped, so re-running a report rewrites
identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "madkit"

import matplotlib.pyplot as plt  # noqa: E402


def save_det_svg(named_points: dict[str, list], path,
                 title: str = "Detection error tradeoff") -> None:
    """Plot APCER (x) against BPCER (y), in percent, one line per subset."""
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    for name, points in named_points.items():
        xs = [p.apcer * 100.0 for p in points]
        ys = [p.bpcer * 100.0 for p in points]
        ax.plot(xs, ys, label=name, linewidth=1.5)
    ax.plot([0, 100], [0, 100], linestyle=":", color="gray", linewidth=0.8)
    ax.set_xlabel("APCER (%)")
    ax.set_ylabel("BPCER (%)")
    ax.set_xlim(0, 100)
    ax.set_ylim(0, 100)
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, linewidth=0.3, alpha=0.6)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
