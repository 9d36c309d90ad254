"""Matplotlib figures: loss curves, mask coverage bars and frame montages.

Figures are written with fixed metadata so the same input renders to the
same bytes.
"""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import FormatError  # noqa: E402

log = logging.getLogger(__name__)

_SVG_META = {"Date": None, "Creator": None}
_PNG_META = {"Software": None}


def _save(fig, out_path) -> Path:
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    suffix = out.suffix.lower()
    if suffix == ".svg":
        with matplotlib.rc_context({"svg.hashsalt": "tgmae", "svg.fonttype": "none"}):
            fig.savefig(out, format="svg", metadata=_SVG_META)
    elif suffix == ".png":
        fig.savefig(out, format="png", dpi=100, metadata=_PNG_META)
    else:
        plt.close(fig)
        raise ValueError(f"unsupported figure format {suffix!r}; use .png or .svg")
    plt.close(fig)
    return out


def read_series(path, column: str = "nce_diagnostic") -> tuple[np.ndarray, np.ndarray]:
    """Read ``(step, column)`` from a loss CSV; raises FormatError when malformed."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "step" not in reader.fieldnames or column not in reader.fieldnames:
            raise FormatError(f"{path}: expected columns 'step' and {column!r}")
        steps, values = [], []
        for n, row in enumerate(reader, 2):
            try:
                steps.append(int(row["step"]))
                values.append(float(row[column]))
            except (TypeError, ValueError):
                raise FormatError(f"{path}:{n}: cannot parse row {row!r}") from None
    return np.asarray(steps), np.asarray(values)


def plot_losses(csv_paths, out_path, labels=None, column: str = "nce_diagnostic") -> tuple[Path, list[str]]:
    """Overlay one curve per run. Empty runs are skipped with a warning.

    Returns the written path and the labels that were actually drawn.
    """
    csv_paths = [Path(p) for p in csv_paths]
    if not csv_paths:
        raise ValueError("need at least one loss CSV")
    labels = list(labels) if labels else [p.parent.name or p.stem for p in csv_paths]
    if len(labels) != len(csv_paths):
        raise ValueError("one label per CSV is required")
    fig, ax = plt.subplots(figsize=(6, 4))
    drawn = []
    for path, label in zip(csv_paths, labels):
        steps, values = read_series(path, column)
        if len(steps) == 0:
            log.warning("skipping %s: no rows", path)
            continue
        ax.plot(steps, values, label=label, linewidth=1.2)
        drawn.append(label)
    ax.set_xlabel("step")
    ax.set_ylabel(column)
    if drawn:
        ax.legend()
    fig.tight_layout()
    return _save(fig, out_path), drawn


def plot_coverage(coverage: dict[str, float], out_path, title: str = "saliency coverage") -> Path:
    names = list(coverage)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, [coverage[n] for n in names], color="0.4")
    ax.set_ylim(0, 1)
    ax.set_ylabel("fraction of masked cells on foreground")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, out_path)


def plot_montage(rows: dict[str, np.ndarray], out_path) -> Path:
    """Grid of frames, one row per named stack.

    Each stack is ``[N, H, W]`` (grey) or ``[N, H, W, 3]`` with values in [0, 1].
    """
    names = list(rows)
    cols = max(len(rows[n]) for n in names)
    fig, axes = plt.subplots(len(names), cols, figsize=(1.3 * cols, 1.4 * len(names)), squeeze=False)
    for r, name in enumerate(names):
        for c in range(cols):
            ax = axes[r][c]
            ax.set_axis_off()
            if c < len(rows[name]):
                img = np.asarray(rows[name][c])
                ax.imshow(img, cmap=None if img.ndim == 3 else "gray", vmin=0, vmax=1, interpolation="nearest")
        axes[r][0].set_title(name, fontsize=8, loc="left")
    fig.tight_layout()
    return _save(fig, out_path)


def heatmap_to_image(values: np.ndarray, scale: int = 1) -> np.ndarray:
    """Min-max normalise a 2-D map to [0, 1] and upsample by pixel repetition."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    v = np.zeros_like(v) if math.isclose(hi, lo) else (v - lo) / (hi - lo)
    return np.kron(v, np.ones((scale, scale)))
