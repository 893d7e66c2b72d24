"""Execution timeline rendering (matplotlib, imported lazily)."""

from __future__ import annotations

from pathlib import Path
from typing import Union

from .coordinator import ExecutionReport

__all__ = ["STATUS_COLORS", "render_timeline"]

STATUS_COLORS = {
    "COMPLETED": "#2b8a3e",
    "SKIPPED": "#adb5bd",
    "TIMED_OUT": "#e8590c",
    "LOW_QUALITY": "#f59f00",
    "FAILED": "#c92a2a",
    "CANCELLED": "#868e96",
    "RUNNING": "#1c7ed6",
}


def render_timeline(report: ExecutionReport, path: Union[str, Path]) -> Path:
    """Draw one bar per node attempt on the simulated time axis and save it."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Patch

    attempts = [n for n in report.nodes if n.started_ts is not None]
    fig, ax = plt.subplots(figsize=(7.0, 0.45 * max(1, len(attempts)) + 1.4))
    labels = []
    for i, st in enumerate(attempts):
        end = st.finished_ts if st.finished_ts is not None else st.started_ts
        width = max(end - st.started_ts, 0.5)
        ax.barh(i, width, left=st.started_ts, color=STATUS_COLORS.get(st.status.value, "#495057"), height=0.6)
        labels.append(f"{st.node_id} #{st.attempt} ({st.agent})")
    for v in report.violations:
        ax.axvline(v["ts"], color="#c92a2a", linewidth=0.6, linestyle=":")
    ax.set_yticks(range(len(attempts)))
    ax.set_yticklabels(labels, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("simulated time (ms)")
    ax.set_title(f"{report.run_id}: {report.final_status.value}", fontsize=10)
    seen = sorted({st.status.value for st in attempts})
    ax.legend(handles=[Patch(color=STATUS_COLORS.get(s, "#495057"), label=s) for s in seen],
              fontsize=7, loc="upper left", bbox_to_anchor=(1.01, 1.0), frameon=False)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
