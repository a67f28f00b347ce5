"""SVG emission for similarity heatmaps, orthogonality line plots and eval bar charts.

Output is byte-reproducible: fixed svg hash salt, text kept as text, no date stamp.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from importlib.util import find_spec
from pathlib import Path
from typing import Any

from moeforge.models import SimilarityRecord

logger = logging.getLogger(__name__)

# Cells get a printed value only up to this matrix size.
ANNOTATE_MAX_EXPERTS = 8

_SVG_RC = {
    "svg.hashsalt": "moeforge",
    "svg.fonttype": "none",
    "path.simplify": False,
}


def _require_matplotlib() -> Any:
    try:
        import matplotlib
        from matplotlib.figure import Figure  # noqa: F401
    except ImportError:
        raise ImportError(
            "SVG plots require matplotlib. Install with: pip install 'moeforge[plot]'"
        )
    return matplotlib


def plots_available(requested: bool = True) -> bool:
    """False, with a warning, when plots are requested but matplotlib is missing."""
    if requested and find_spec("matplotlib") is None:
        logger.warning("matplotlib is not installed; skipping SVG output")
        return False
    return requested


def heatmap_export(record: SimilarityRecord, path: Path, title: str | None = None) -> Path:
    """Grayscale heatmap: similarity -1 is white, 0 mid-gray, 1 black."""
    matplotlib = _require_matplotlib()
    from matplotlib.figure import Figure

    n = len(record.matrix)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with matplotlib.rc_context(_SVG_RC):
        fig = Figure(figsize=(4.0, 4.0))
        ax = fig.add_subplot()
        ax.imshow(
            record.matrix,
            cmap="gray_r",
            vmin=-1.0,
            vmax=1.0,
            interpolation="nearest",
        )
        if n <= ANNOTATE_MAX_EXPERTS:
            for i, row in enumerate(record.matrix):
                for j, value in enumerate(row):
                    ax.text(
                        j, i, f"{value:.2f}",
                        ha="center", va="center",
                        color="white" if value > 0.5 else "black",
                        fontsize=9,
                    )
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(title or f"step {record.step}, O = {record.orthogonality:.3f}")
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def orthogonality_plot(
    series: Mapping[str, Sequence[float]],
    path: Path,
    title: str = "Orthogonality per generation step",
) -> Path:
    """One line per configuration label, plotted in sorted label order."""
    matplotlib = _require_matplotlib()
    from matplotlib.figure import Figure

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with matplotlib.rc_context(_SVG_RC):
        fig = Figure(figsize=(7.0, 4.0))
        ax = fig.add_subplot()
        for label in sorted(series):
            values = list(series[label])
            ax.plot(range(1, len(values) + 1), values, marker="o", label=label)
        ax.set_xlabel("generation step")
        ax.set_ylabel("orthogonality O")
        ax.set_title(title)
        if series:
            ax.legend(fontsize=8)
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def eval_comparison_plot(
    bars: Sequence[tuple[str, float, float]],
    path: Path,
    title: str = "Baseline vs mixture of experts",
) -> Path:
    """Bars of hallucination rate and mean latency, one (label, rate, seconds) per run."""
    matplotlib = _require_matplotlib()
    from matplotlib.figure import Figure

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = [label for label, _, _ in bars]
    positions = list(range(len(bars)))

    with matplotlib.rc_context(_SVG_RC):
        fig = Figure(figsize=(8.0, 3.5))
        rate_ax, latency_ax = fig.subplots(1, 2)
        rate_ax.bar(positions, [rate for _, rate, _ in bars], color="0.3")
        rate_ax.set_ylim(0.0, 1.0)
        rate_ax.set_ylabel("hallucination rate")
        latency_ax.bar(positions, [seconds * 1000.0 for _, _, seconds in bars], color="0.6")
        latency_ax.set_ylabel("mean latency per query (ms)")
        for ax in (rate_ax, latency_ax):
            ax.set_xticks(positions, labels, fontsize=8)
        fig.suptitle(title)
        fig.subplots_adjust(wspace=0.35)
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path
