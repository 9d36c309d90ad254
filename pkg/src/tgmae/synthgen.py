"""Procedural moving-shape videos with captions and ground-truth saliency.

Also hosts the frozen toy text/patch embedder that stands in for a
pretrained vision-language model, and SIMMAP import/export for similarity
maps computed elsewhere.

Corpus directory layout::

    corpus.json        generation parameters
    videos/video_NNNNN.tgmv
    captions.txt       3 tab-separated captions per line
    labels.txt         one integer per line
    scenes.json        per-video SceneSpec records
    object_masks.npy   bool [N, T, H, W]
    gt_masks.npy       bool [N, T', H', W']
    simmaps/simmap_NNNNN.tgms   (optional, imported maps)
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, FormatError
from .videocore import PatchConfig, VideoClip, grid_shape, read_video, write_video

log = logging.getLogger(__name__)

SHAPES = ("square", "circle", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")
DIRECTIONS = ("left", "right", "up", "down", "still")
COLOR_RGB = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.15),
    "blue": (0.10, 0.20, 0.90),
    "yellow": (0.95, 0.90, 0.10),
}
DIRECTION_STEP = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0), "still": (0, 0)}

# 13 scene attributes, then a background slot for empty cells and a null
# slot for captions without any known word.
ATTRIBUTES = SHAPES + COLORS + DIRECTIONS + ("<background>", "<null>")
ATTR_INDEX = {a: i for i, a in enumerate(ATTRIBUTES)}
EMBED_DIM = 16
EMBED_SEED = 20240417
FG_OVERLAP = 0.25

SIMMAP_MAGIC = b"TGMS"
CAPTION_TEMPLATES = (
    "a {color} {shape} moving {direction}",
    "the {color} {shape} is moving {direction}",
    "{direction}-moving {color} {shape}",
)
LABEL_KEYS = ("direction", "color", "shape")


def _projection() -> np.ndarray:
    rng = np.random.default_rng(EMBED_SEED)
    q, _ = np.linalg.qr(rng.standard_normal((EMBED_DIM, EMBED_DIM)))
    proj = np.ascontiguousarray(q[: len(ATTRIBUTES)].astype(np.float64))
    proj.flags.writeable = False
    return proj


# Orthonormal rows: disjoint attribute bags embed to orthogonal vectors.
PROJECTION = _projection()


def projection_checksum() -> str:
    return hashlib.sha256(PROJECTION.tobytes()).hexdigest()


@dataclass
class SceneSpec:
    shape: str
    color: str
    direction: str
    speed: int
    background: str = "solid"
    noise_sigma: float = 0.1
    size: int = 16
    origin: tuple[int, int] = (0, 0)
    bg_level: float = 0.45
    bg_seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES or self.color not in COLORS or self.direction not in DIRECTIONS:
            raise ValueError(f"unknown attribute in {self}")
        if self.background not in ("solid", "static-noise"):
            raise ValueError(f"unknown background {self.background!r}")
        if self.speed < 0 or self.noise_sigma < 0 or self.size <= 0:
            raise ValueError("speed, noise_sigma and size must be non-negative / positive")
        self.origin = tuple(int(v) for v in self.origin)

    def position(self, frame: int) -> tuple[int, int]:
        dy, dx = DIRECTION_STEP[self.direction]
        return self.origin[0] + dy * self.speed * frame, self.origin[1] + dx * self.speed * frame

    def captions(self) -> list[str]:
        return [t.format(color=self.color, shape=self.shape, direction=self.direction)
                for t in CAPTION_TEMPLATES]

    def label(self, key: str = "direction") -> int:
        if key == "direction":
            return DIRECTIONS.index(self.direction)
        if key == "color":
            return COLORS.index(self.color)
        if key == "shape":
            return SHAPES.index(self.shape)
        raise ValueError(f"unknown label key {key!r}")


@dataclass
class SceneDistribution:
    """Sampling ranges for random scenes; sizes are fractions of the frame side."""

    size_range: tuple[float, float] = (0.62, 0.75)
    max_speed: int = 2
    noise_background_prob: float = 0.5
    noise_sigma: float = 0.1
    balanced: bool = True


@dataclass
class SynthVideo:
    clip: VideoClip
    scene: SceneSpec | None
    object_mask: np.ndarray | None  # bool [T, H, W]


@dataclass
class SimilarityMap:
    sims: np.ndarray  # float32 [T', H', W']
    source: str = "toy-embedder"

    def __post_init__(self):
        self.sims = np.asarray(self.sims, dtype=np.float32)
        if self.sims.ndim != 3:
            raise DimensionMismatchError(f"similarity map must be 3-D, got {self.sims.shape}")

    @property
    def grid(self):
        return tuple(self.sims.shape)


def shape_stencil(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    if shape == "square":
        m = np.ones((size, size), dtype=bool)
    elif shape == "circle":
        m = (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2
    elif shape == "triangle":
        m = np.abs(xx - c) <= (yy + 1) / 2.0
    elif shape == "cross":
        m = (np.abs(yy - c) < size / 4.0) | (np.abs(xx - c) < size / 4.0)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def render_scene(scene: SceneSpec, T: int, H: int, W: int) -> tuple[VideoClip, np.ndarray]:
    """Render a scene; returns the clip and the per-frame object mask."""
    if scene.background == "solid":
        bg = np.full((H, W, 3), scene.bg_level, dtype=np.float64)
    else:
        noise = np.random.default_rng(scene.bg_seed).normal(0.0, 0.08, size=(H, W, 1))
        bg = np.clip(scene.bg_level + noise, 0.0, 1.0) * np.ones((1, 1, 3))
    stencil = shape_stencil(scene.shape, scene.size)
    rgb = np.asarray(COLOR_RGB[scene.color])
    video = np.empty((T, H, W, 3), dtype=np.float64)
    objmask = np.zeros((T, H, W), dtype=bool)
    for f in range(T):
        y, x = scene.position(f)
        if y < 0 or x < 0 or y + scene.size > H or x + scene.size > W:
            raise ValueError(f"object leaves the frame at frame {f}: {scene}")
        objmask[f, y:y + scene.size, x:x + scene.size] = stencil
        video[f] = bg
        video[f][objmask[f]] = rgb
    return VideoClip(video.astype(np.float32)), objmask


def sample_scene(rng: np.random.Generator, T: int, H: int, W: int,
                 dist: SceneDistribution | None = None,
                 attrs: tuple[str, str, str] | None = None) -> SceneSpec:
    dist = dist or SceneDistribution()
    if attrs is None:
        attrs = (SHAPES[rng.integers(4)], COLORS[rng.integers(4)], DIRECTIONS[rng.integers(5)])
    shape, color, direction = attrs
    side = min(H, W)
    lo = max(2, int(round(dist.size_range[0] * side)))
    hi = max(lo, int(round(dist.size_range[1] * side)))
    size = int(rng.integers(lo, hi + 1))
    if direction == "still":
        speed = 0
    else:
        free = (H if direction in ("up", "down") else W) - size
        speed = int(min(rng.integers(1, dist.max_speed + 1), free // max(T - 1, 1)))
    dy, dx = DIRECTION_STEP[direction]
    travel_y, travel_x = abs(dy) * speed * (T - 1), abs(dx) * speed * (T - 1)
    y0 = int(rng.integers(0, H - size - travel_y + 1)) + (travel_y if dy < 0 else 0)
    x0 = int(rng.integers(0, W - size - travel_x + 1)) + (travel_x if dx < 0 else 0)
    background = "static-noise" if rng.random() < dist.noise_background_prob else "solid"
    return SceneSpec(shape=shape, color=color, direction=direction, speed=speed,
                     background=background, noise_sigma=dist.noise_sigma, size=size,
                     origin=(y0, x0), bg_level=float(rng.uniform(0.35, 0.55)),
                     bg_seed=int(rng.integers(2**31)))


def cell_overlap(object_mask: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    """Largest per-frame object coverage of each token cell, ``[T', H', W']``."""
    T, H, W = object_mask.shape
    Tp, Hp, Wp = grid_shape((T, H, W), cfg)
    m = object_mask.astype(np.float64).reshape(Tp, cfg.t, Hp, cfg.h, Wp, cfg.w)
    per_frame = m.mean(axis=(3, 5))  # [T', t, H', W']
    return per_frame.max(axis=1)


def ground_truth_mask(object_mask: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    return cell_overlap(object_mask, cfg) >= FG_OVERLAP


def _bag_vector(attrs) -> np.ndarray:
    bag = np.zeros(len(ATTRIBUTES))
    for a in attrs:
        bag[ATTR_INDEX[a]] = 1.0
    return bag


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, 1e-12)


def caption_attributes(caption: str) -> set[str]:
    words = re.findall(r"[a-z]+", caption.lower())
    return {w for w in words if w in ATTR_INDEX}


def embed_text(caption: str) -> np.ndarray:
    """Unit-norm ``[EMBED_DIM]`` embedding of the caption's attribute set.

    Unknown words carry no attribute; a caption with no known word maps to
    the null attribute.
    """
    attrs = caption_attributes(caption) or {"<null>"}
    return _unit(_bag_vector(attrs) @ PROJECTION)


def embed_cells(overlap: np.ndarray, scene: SceneSpec, sigma: float = 0.0,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-cell embeddings ``[T', H', W', EMBED_DIM]`` from object coverage.

    Cell presence saturates at the foreground threshold, so every
    ground-truth foreground cell carries exactly the scene's attribute bag
    while partial cells blend it with the background attribute.
    """
    presence = np.clip(overlap / FG_OVERLAP, 0.0, 1.0)[..., None]
    obj = _bag_vector((scene.shape, scene.color, scene.direction)) @ PROJECTION
    bg = _bag_vector(("<background>",)) @ PROJECTION
    vec = _unit(presence * obj + (1.0 - presence) * bg)
    if sigma > 0:
        if rng is None:
            raise ValueError("a random generator is required when sigma > 0")
        vec = _unit(vec + rng.normal(0.0, sigma, size=vec.shape))
    return vec


def embed_patches(video: SynthVideo, cfg: PatchConfig, sigma: float | None = None,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    if video.scene is None or video.object_mask is None:
        raise ValueError("patch embedding needs scene metadata; import a similarity map instead")
    if sigma is None:
        sigma = video.scene.noise_sigma
    return embed_cells(cell_overlap(video.object_mask, cfg), video.scene, sigma, rng)


def similarity_from_cells(cells: np.ndarray, caption: str) -> SimilarityMap:
    sims = np.clip(cells @ embed_text(caption), -1.0, 1.0)
    return SimilarityMap(sims)


def compute_similarity_map(video: SynthVideo, caption: str, cfg: PatchConfig,
                           sigma: float | None = None,
                           rng: np.random.Generator | None = None) -> SimilarityMap:
    return similarity_from_cells(embed_patches(video, cfg, sigma, rng), caption)


def sample_caption(captions, rng: np.random.Generator, num_captions: int = 3) -> str:
    pool = list(captions)[:num_captions]
    if not pool:
        raise ValueError("no captions to sample from")
    if len(pool) == 1:
        return pool[0]
    return pool[int(rng.integers(len(pool)))]


def write_similarity_map(path, smap: SimilarityMap) -> None:
    Tp, Hp, Wp = smap.grid
    with open(path, "wb") as fh:
        fh.write(SIMMAP_MAGIC)
        fh.write(struct.pack("<3I", Tp, Hp, Wp))
        fh.write(smap.sims.astype("<f4").tobytes(order="C"))


def import_similarity_map(path, grid=None) -> SimilarityMap:
    """Read a SIMMAP file; ``grid`` is the paired video's token grid."""
    raw = Path(path).read_bytes()
    if raw[:4] != SIMMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    Tp, Hp, Wp = struct.unpack("<3I", raw[4:16])
    body = raw[16:]
    if len(body) != 4 * Tp * Hp * Wp:
        raise FormatError(f"{path}: expected {Tp * Hp * Wp} floats, found {len(body)} bytes")
    sims = np.frombuffer(body, dtype="<f4").reshape(Tp, Hp, Wp).astype(np.float32)
    if not np.isfinite(sims).all():
        raise FormatError(f"{path}: non-finite similarity values")
    if grid is not None and tuple(grid) != (Tp, Hp, Wp):
        raise DimensionMismatchError(f"{path}: map grid {(Tp, Hp, Wp)} != video grid {tuple(grid)}")
    return SimilarityMap(sims, source="imported")


@dataclass
class Corpus:
    """A loaded corpus; scene metadata is absent for user-supplied videos."""

    root: Path
    videos: np.ndarray  # float32 [N, T, H, W, 3]
    captions: list[list[str]]
    labels: np.ndarray | None
    patch: PatchConfig
    scenes: list[SceneSpec] | None = None
    object_masks: np.ndarray | None = None
    gt_masks: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.videos)

    @property
    def grid(self):
        return grid_shape(self.videos.shape[1:4], self.patch)

    @property
    def num_classes(self) -> int:
        return int(self.meta.get("num_classes", 0) or (self.labels.max() + 1))

    def sample(self, i: int) -> SynthVideo:
        return SynthVideo(
            VideoClip(self.videos[i]),
            self.scenes[i] if self.scenes else None,
            self.object_masks[i] if self.object_masks is not None else None,
        )

    def simmap_path(self, i: int) -> Path:
        return self.root / "simmaps" / f"simmap_{i:05d}.tgms"

    def subset(self, idx) -> "Corpus":
        idx = np.asarray(idx)
        pick = lambda seq: [seq[i] for i in idx] if seq is not None else None  # noqa: E731
        return Corpus(
            self.root, self.videos[idx], pick(self.captions),
            self.labels[idx] if self.labels is not None else None, self.patch,
            pick(self.scenes),
            self.object_masks[idx] if self.object_masks is not None else None,
            self.gt_masks[idx] if self.gt_masks is not None else None,
            dict(self.meta, subset=[int(i) for i in idx]),
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.videos).tobytes())
        h.update("\n".join("\t".join(c) for c in self.captions).encode())
        if self.labels is not None:
            h.update(np.asarray(self.labels, dtype=np.int64).tobytes())
        return h.hexdigest()


def _balanced_choice(values, n, rng):
    reps = -(-n // len(values))
    pool = np.tile(np.arange(len(values)), reps)[:n]
    return [values[k] for k in rng.permutation(pool)]


def generate_dataset(out_dir, n: int, seed: int = 0, video_shape=(8, 32, 32),
                     patch: PatchConfig | None = None, dist: SceneDistribution | None = None,
                     label_by: str = "direction") -> Corpus:
    """Write ``n`` synthetic videos plus captions, labels and masks to ``out_dir``."""
    patch = patch or PatchConfig(2, 8, 8, 96)
    dist = dist or SceneDistribution()
    T, H, W = video_shape
    grid = grid_shape(video_shape, patch)
    if label_by not in LABEL_KEYS:
        raise ValueError(f"label_by must be one of {LABEL_KEYS}")
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)

    attrs = [None] * n
    if dist.balanced:
        master = np.random.default_rng([seed, 2**31 - 1])
        attrs = list(zip(_balanced_choice(SHAPES, n, master),
                         _balanced_choice(COLORS, n, master),
                         _balanced_choice(DIRECTIONS, n, master)))

    videos = np.empty((n, T, H, W, 3), dtype=np.float32)
    objmasks = np.empty((n, T, H, W), dtype=bool)
    gts = np.empty((n,) + grid, dtype=bool)
    scenes, captions = [], []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        for _ in range(100):
            scene = sample_scene(rng, T, H, W, dist, attrs[i])
            clip, om = render_scene(scene, T, H, W)
            gt = ground_truth_mask(om, patch)
            if gt.reshape(grid[0], -1).any(axis=1).all():
                break
        else:
            raise ValueError("could not place an object covering a cell in every slice; "
                             "increase the object size range")
        write_video(out / "videos" / f"video_{i:05d}.tgmv", clip)
        # stored clips are 8-bit; keep the in-memory copy identical to a reload
        videos[i] = np.rint(clip.data * 255.0) / 255.0
        objmasks[i], gts[i] = om, gt
        scenes.append(scene)
        captions.append(scene.captions())

    labels = [s.label(label_by) for s in scenes]
    (out / "captions.txt").write_text("".join("\t".join(c) + "\n" for c in captions), encoding="utf-8")
    (out / "labels.txt").write_text("".join(f"{y}\n" for y in labels), encoding="utf-8")
    (out / "scenes.json").write_text(json.dumps([asdict(s) for s in scenes], indent=1), encoding="utf-8")
    np.save(out / "object_masks.npy", objmasks)
    np.save(out / "gt_masks.npy", gts)
    meta = {
        "n": n, "seed": seed, "video_shape": list(video_shape),
        "patch": [patch.t, patch.h, patch.w], "label_by": label_by,
        "num_classes": {"direction": 5, "color": 4, "shape": 4}[label_by],
        "distribution": asdict(dist),
    }
    (out / "corpus.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    log.info("wrote %d videos to %s", n, out)
    return Corpus(out, videos, captions, np.asarray(labels, dtype=np.int64), patch,
                  scenes, objmasks, gts, meta)


def read_captions(path) -> list[list[str]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        caps = [c for c in line.split("\t") if c.strip()]
        if not caps:
            raise FormatError(f"{path}: empty caption line {len(rows)}")
        rows.append(caps)
    return rows


def load_corpus(root, patch: PatchConfig | None = None) -> Corpus:
    root = Path(root)
    meta = {}
    if (root / "corpus.json").exists():
        meta = json.loads((root / "corpus.json").read_text(encoding="utf-8"))
        if patch is None and "patch" in meta:
            patch = PatchConfig(*meta["patch"])
    patch = patch or PatchConfig(2, 16, 16)
    files = sorted((root / "videos").glob("*.tgmv"))
    if not files:
        raise FileNotFoundError(f"no .tgmv videos under {root / 'videos'}")
    videos = np.stack([read_video(f).data for f in files])
    captions = read_captions(root / "captions.txt")
    if len(captions) != len(videos):
        raise FormatError(f"{len(captions)} caption lines for {len(videos)} videos")
    labels = None
    if (root / "labels.txt").exists():
        labels = np.asarray([int(x) for x in (root / "labels.txt").read_text().split()], dtype=np.int64)
        if len(labels) != len(videos):
            raise FormatError(f"{len(labels)} labels for {len(videos)} videos")
    scenes = objmasks = gts = None
    if (root / "scenes.json").exists():
        raw = json.loads((root / "scenes.json").read_text(encoding="utf-8"))
        scenes = [SceneSpec(**r) for r in raw]
    if (root / "object_masks.npy").exists():
        objmasks = np.load(root / "object_masks.npy")
    if (root / "gt_masks.npy").exists():
        gts = np.load(root / "gt_masks.npy")
    return Corpus(root, videos, captions, labels, patch, scenes, objmasks, gts, meta)
