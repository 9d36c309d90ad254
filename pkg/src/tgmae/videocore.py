"""Video clips, cube patchification and per-patch target normalization.

Tokens are laid out temporal-major, then rows, then columns: grid cell
``(tau, i, j)`` lives at sequence index ``tau * H' * W' + i * W' + j``.
Inside one cube the flattened pixel order is ``(t, h, w, C)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DimensionMismatchError, FormatError

VIDEO_MAGIC = b"TGMV"
STD_FLOOR = 1e-6


@dataclass
class VideoClip:
    """RGB clip with values in [0, 1], shape ``[T, H, W, C]``."""

    data: np.ndarray
    frame_stride: int = 1

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or min(self.data.shape) <= 0:
            raise DimensionMismatchError(f"expected [T,H,W,C] video, got shape {self.data.shape}")
        if self.data.shape[-1] != 3:
            raise DimensionMismatchError(f"expected 3 channels, got {self.data.shape[-1]}")
        if self.frame_stride < 1:
            raise ValueError("frame_stride must be positive")
        if not np.isfinite(self.data).all():
            raise ValueError("video contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)

    @classmethod
    def from_uint8(cls, pixels, frame_stride: int = 1) -> "VideoClip":
        return cls(np.asarray(pixels, dtype=np.float32) / 255.0, frame_stride)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.data * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class PatchConfig:
    t: int = 2
    h: int = 16
    w: int = 16
    D: int = 768

    def __post_init__(self):
        if min(self.t, self.h, self.w, self.D) <= 0:
            raise ValueError("patch extents and embedding width must be positive")

    @property
    def patch_dim(self) -> int:
        """Flattened cube length ``t*h*w*C`` for RGB input."""
        return self.t * self.h * self.w * 3


@dataclass
class TokenSeq:
    tokens: torch.Tensor  # [L, D]
    grid: tuple[int, int, int]

    def __post_init__(self):
        n = self.grid[0] * self.grid[1] * self.grid[2]
        if self.tokens.shape[0] != n:
            raise DimensionMismatchError(f"{self.tokens.shape[0]} tokens for grid {self.grid}")

    def __len__(self):
        return self.tokens.shape[0]


@dataclass
class PatchTarget:
    values: torch.Tensor  # [L, t*h*w*C]
    normalization: str = "raw"  # "raw" | "standardized"
    mean: torch.Tensor | None = field(default=None)  # [L, 1]
    std: torch.Tensor | None = field(default=None)  # [L, 1]


def grid_shape(video_shape, cfg: PatchConfig) -> tuple[int, int, int]:
    """Token grid ``(T/t, H/h, W/w)`` for a ``(T, H, W[, C])`` shape."""
    T, H, W = video_shape[:3]
    if T % cfg.t or H % cfg.h or W % cfg.w:
        raise DimensionMismatchError(
            f"video {T}x{H}x{W} is not divisible by cube {cfg.t}x{cfg.h}x{cfg.w}")
    return T // cfg.t, H // cfg.h, W // cfg.w


def cell_index(tau: int, i: int, j: int, grid) -> int:
    _, Hp, Wp = grid
    return (tau * Hp + i) * Wp + j


def to_cubes(x: torch.Tensor, cfg: PatchConfig) -> torch.Tensor:
    """Flatten ``[..., T, H, W, C]`` into ``[..., L, t*h*w*C]`` cubes."""
    *lead, T, H, W, C = x.shape
    Tp, Hp, Wp = grid_shape((T, H, W), cfg)
    n = len(lead)
    x = x.reshape(*lead, Tp, cfg.t, Hp, cfg.h, Wp, cfg.w, C)
    perm = list(range(n)) + [n + k for k in (0, 2, 4, 1, 3, 5, 6)]
    x = x.permute(*perm)
    return x.reshape(*lead, Tp * Hp * Wp, cfg.t * cfg.h * cfg.w * C)


def from_cubes(p: torch.Tensor, grid, cfg: PatchConfig, channels: int = 3) -> torch.Tensor:
    """Inverse of :func:`to_cubes`."""
    Tp, Hp, Wp = grid
    *lead, L, P = p.shape
    if L != Tp * Hp * Wp or P != cfg.t * cfg.h * cfg.w * channels:
        raise DimensionMismatchError(f"patch tensor {tuple(p.shape)} does not fit grid {grid} / {cfg}")
    n = len(lead)
    x = p.reshape(*lead, Tp, Hp, Wp, cfg.t, cfg.h, cfg.w, channels)
    perm = list(range(n)) + [n + k for k in (0, 3, 1, 4, 2, 5, 6)]
    x = x.permute(*perm)
    return x.reshape(*lead, Tp * cfg.t, Hp * cfg.h, Wp * cfg.w, channels)


def patchify(video: VideoClip, cfg: PatchConfig, embed: torch.Tensor) -> TokenSeq:
    """Project flattened cubes with a ``[t*h*w*C, D]`` embedding matrix.

    Positional embeddings are not added here; the model does that.
    """
    grid = grid_shape(video.shape, cfg)
    cubes = to_cubes(torch.as_tensor(video.data), cfg)
    if embed.shape[0] != cubes.shape[-1]:
        raise DimensionMismatchError(f"embedding expects {embed.shape[0]} inputs, cubes have {cubes.shape[-1]}")
    return TokenSeq(cubes.to(embed.dtype) @ embed, grid)


def standardize_patches(p: torch.Tensor, eps: float = STD_FLOOR):
    """Per-row standardization with population statistics.

    Returns ``(values, mean, std)``; std is floored at ``eps`` so constant
    patches map to all-zero rows. ``eps=0`` disables the floor.
    """
    mean = p.mean(dim=-1, keepdim=True)
    std = p.var(dim=-1, unbiased=False, keepdim=True).sqrt()
    if eps > 0:
        std = std.clamp_min(eps)
    return (p - mean) / std, mean, std


def normalize_targets(video: VideoClip, cfg: PatchConfig, eps: float = STD_FLOOR) -> PatchTarget:
    cubes = to_cubes(torch.as_tensor(video.data), cfg)
    values, mean, std = standardize_patches(cubes, eps)
    return PatchTarget(values, "standardized", mean, std)


def raw_targets(video: VideoClip, cfg: PatchConfig) -> PatchTarget:
    return PatchTarget(to_cubes(torch.as_tensor(video.data), cfg), "raw")


def unpatchify(pred: PatchTarget, grid, cfg: PatchConfig) -> VideoClip:
    values = pred.values
    if pred.normalization == "standardized":
        if pred.mean is None or pred.std is None:
            raise DimensionMismatchError("standardized target is missing its per-patch statistics")
        values = values * pred.std + pred.mean
    elif pred.normalization != "raw":
        raise ValueError(f"unknown normalization {pred.normalization!r}")
    pixels = from_cubes(values, grid, cfg).detach().to(torch.float32).numpy()
    # reconstructions may overshoot the pixel range
    return VideoClip(np.clip(pixels, 0.0, 1.0))


def write_video(path, clip: VideoClip) -> None:
    T, H, W, C = clip.shape
    with open(path, "wb") as fh:
        fh.write(VIDEO_MAGIC)
        fh.write(struct.pack("<4I", T, H, W, C))
        fh.write(clip.to_uint8().tobytes(order="C"))


def read_video(path) -> VideoClip:
    raw = Path(path).read_bytes()
    if raw[:4] != VIDEO_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header")
    T, H, W, C = struct.unpack("<4I", raw[4:20])
    body = raw[20:]
    if len(body) != T * H * W * C:
        raise FormatError(f"{path}: expected {T * H * W * C} pixel bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(T, H, W, C)
    return VideoClip.from_uint8(pixels)
