"""Mask generators over the token grid and visible/masked partitioning.

Every generator masks exactly ``k = round_half_up(gamma * H' * W')`` cells
in each temporal slice. Masks are boolean ``[T', H', W']`` arrays where
``True`` means the token is hidden from the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError
from .netpbm import write_pgm
from .videocore import PatchConfig, TokenSeq, grid_shape

ALGORITHMS = ("tube", "random", "motion", "text-top", "text-bottom")


@dataclass(frozen=True)
class MaskSpec:
    algorithm: str = "tube"
    gamma: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown mask algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1), got {self.gamma}")

    def k_per_slice(self, grid) -> int:
        return mask_count(self.gamma, grid)


@dataclass
class MaskedPartition:
    visible_idx: np.ndarray
    masked_idx: np.ndarray

    @property
    def num_tokens(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)


def mask_count(gamma: float, grid) -> int:
    """Per-slice masked count for a ``(T', H', W')`` or ``(H', W')`` grid."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {gamma}")
    cells = grid[-1] * grid[-2]
    # decimal arithmetic so 0.7 * 15 rounds to 11, not 10
    k = int((Decimal(repr(float(gamma))) * cells).to_integral_value(rounding=ROUND_HALF_UP))
    return min(max(k, 0), cells)


def _per_slice_topk(scores: np.ndarray, k: int, largest: bool) -> np.ndarray:
    """Boolean mask of the ``k`` extreme cells per slice, ties to lower index."""
    Tp = scores.shape[0]
    flat = scores.reshape(Tp, -1)
    if not np.isfinite(flat).all():
        raise ValueError("scores contain non-finite values")
    order = np.argsort(-flat if largest else flat, axis=1, kind="stable")[:, :k]
    bits = np.zeros_like(flat, dtype=bool)
    np.put_along_axis(bits, order, True, axis=1)
    return bits.reshape(scores.shape)


def tube_mask(spec: MaskSpec, grid, rng: np.random.Generator) -> np.ndarray:
    Tp, Hp, Wp = grid
    k = spec.k_per_slice(grid)
    cells = np.zeros(Hp * Wp, dtype=bool)
    cells[rng.permutation(Hp * Wp)[:k]] = True
    return np.broadcast_to(cells.reshape(1, Hp, Wp), grid).copy()


def random_mask(spec: MaskSpec, grid, rng: np.random.Generator) -> np.ndarray:
    Tp, Hp, Wp = grid
    k = spec.k_per_slice(grid)
    bits = np.zeros((Tp, Hp * Wp), dtype=bool)
    for tau in range(Tp):
        bits[tau, rng.permutation(Hp * Wp)[:k]] = True
    return bits.reshape(grid)


def motion_scores(video: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    """Mean absolute frame difference inside each token cell.

    Frame ``f`` contributes ``|V[f+1] - V[f]|``; the last frame reuses the
    previous difference. A single-frame clip scores zero everywhere.
    """
    video = np.asarray(video, dtype=np.float64)
    T, H, W, C = video.shape
    Tp, Hp, Wp = grid_shape(video.shape, cfg)
    if T < 2:
        return np.zeros((Tp, Hp, Wp))
    diff = np.abs(np.diff(video, axis=0))
    diff = np.concatenate([diff, diff[-1:]], axis=0)
    cells = diff.reshape(Tp, cfg.t, Hp, cfg.h, Wp, cfg.w, C)
    return cells.mean(axis=(1, 3, 5, 6))


def motion_mask(video: np.ndarray, spec: MaskSpec, cfg: PatchConfig) -> np.ndarray:
    """Frame-difference proxy for motion-guided masking (highest motion first)."""
    scores = motion_scores(video, cfg)
    return _per_slice_topk(scores, spec.k_per_slice(scores.shape), largest=True)


def text_mask(simmap, spec: MaskSpec, grid=None) -> np.ndarray:
    """Mask the most (``text-top``) or least (``text-bottom``) caption-similar cells."""
    sims = np.asarray(getattr(simmap, "sims", simmap), dtype=np.float64)
    if grid is not None and tuple(grid) != sims.shape:
        raise DimensionMismatchError(f"similarity grid {sims.shape} != token grid {tuple(grid)}")
    if sims.ndim != 3:
        raise DimensionMismatchError(f"similarity map must be [T', H', W'], got {sims.shape}")
    largest = spec.algorithm != "text-bottom"
    return _per_slice_topk(sims, spec.k_per_slice(sims.shape), largest=largest)


def generate_mask(spec: MaskSpec, grid, rng: np.random.Generator, *, video=None,
                  simmap=None, cfg: PatchConfig | None = None) -> np.ndarray:
    if spec.algorithm == "tube":
        return tube_mask(spec, grid, rng)
    if spec.algorithm == "random":
        return random_mask(spec, grid, rng)
    if spec.algorithm == "motion":
        if video is None or cfg is None:
            raise ValueError("motion masking needs the video and patch config")
        return motion_mask(video, spec, cfg)
    if simmap is None:
        raise ValueError(f"{spec.algorithm} masking needs a similarity map")
    return text_mask(simmap, spec, grid)


def partition(tokens: TokenSeq | None, mask: np.ndarray) -> MaskedPartition:
    """Sorted visible and masked token indices for one mask."""
    mask = np.asarray(mask, dtype=bool)
    if tokens is not None and tuple(tokens.grid) != mask.shape:
        raise DimensionMismatchError(f"mask grid {mask.shape} != token grid {tuple(tokens.grid)}")
    flat = mask.reshape(-1)
    return MaskedPartition(np.flatnonzero(~flat), np.flatnonzero(flat))


def batch_visible_indices(masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``[B, T', H', W']`` masks to ``(visible [B, L_v], masked [B, L_m])`` index arrays."""
    flat = masks.reshape(len(masks), -1)
    counts = flat.sum(axis=1)
    if len(set(counts.tolist())) > 1:
        raise DimensionMismatchError("masks in a batch must hide the same number of tokens")
    order = np.argsort(flat, axis=1, kind="stable")  # visible (False) first, each run ascending
    n_vis = flat.shape[1] - int(counts[0]) if len(flat) else 0
    return order[:, :n_vis], order[:, n_vis:]


def saliency_coverage(mask: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of masked cells that lie on ground-truth foreground."""
    mask = np.asarray(mask, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if mask.shape != gt.shape:
        raise DimensionMismatchError(f"mask {mask.shape} and ground truth {gt.shape} differ")
    n = mask.sum()
    if n == 0:
        raise ValueError("coverage of an empty mask is undefined")
    return float((mask & gt).sum() / n)


def dump_mask(mask: np.ndarray, out_dir, video: int | str) -> list[Path]:
    """Write one PGM per temporal slice (0 visible, 255 masked)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for tau, sl in enumerate(np.asarray(mask, dtype=bool)):
        p = out_dir / f"mask_{video}_{tau}.pgm"
        write_pgm(p, sl.astype(np.uint8) * 255)
        paths.append(p)
    return paths
