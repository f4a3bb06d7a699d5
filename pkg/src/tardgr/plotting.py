"""Report figures: per-snapshot metric curves rendered to PNG files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

__all__ = ["report_figures"]


def report_figures(report, out_dir, stem: str) -> list:
    """One figure per metric, named <stem>_<metric>.png.

    Skipped snapshots are left out of the curve. The PNG bytes depend
    only on the report content, so identical runs render identical
    files.
    """
    rows = [r for r in report.rows if not r.skipped]
    panels = [("recall", [r.recall for r in rows]),
              ("ndcg", [r.ndcg for r in rows])]
    xs = [r.time_index for r in rows]
    written = []
    for metric, ys in panels:
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        if rows:
            ax.plot(xs, ys, marker="o", color="#1b6ca8",
                    label=f"{metric}@{report.k}")
            mean = report.mean_recall if metric == "recall" \
                else report.mean_ndcg
            ax.axhline(mean, color="#aa3b3b", linestyle="--",
                       linewidth=1.0, label=f"mean {mean:.4f}")
            ax.legend(loc="best", fontsize=8)
        ax.set_xlabel("snapshot")
        ax.set_ylabel(f"{metric}@{report.k}")
        ax.set_title(report.variant)
        ax.set_xticks(xs)
        fig.tight_layout()
        path = Path(out_dir) / f"{stem}_{metric}.png"
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)
        written.append(str(path))
    return written
