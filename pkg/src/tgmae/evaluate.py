"""Linear probe, multi-view inference and zero-shot video-text retrieval."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import synthgen
from .config import TrainConfig
from .errors import ConfigError, DimensionMismatchError, FrozenParameterError
from .masking import MaskSpec, saliency_coverage
from .model import MaskedVideoAutoencoder, param_checksum
from .videocore import PatchConfig, to_cubes


@dataclass(frozen=True)
class ViewSpec:
    temporal_views: int = 1
    spatial_views: int = 1

    def __post_init__(self):
        if self.temporal_views < 1 or self.spatial_views < 1:
            raise ValueError("view counts must be at least 1")

    @property
    def count(self) -> int:
        return self.temporal_views * self.spatial_views


@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class ProbeResult:
    top1: float
    train_top1: float
    checksum: str


@dataclass
class RetrievalResult:
    r_at: dict[int, float]  # video -> text
    r_at_t2v: dict[int, float]
    sims: np.ndarray  # [N_videos, N_texts]
    ties: int = 0  # queries whose matched candidate shared its score with another
    meta: dict = field(default_factory=dict)


@torch.no_grad()
def extract_features(model: MaskedVideoAutoencoder, videos: np.ndarray, patch: PatchConfig,
                     batch: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(videos), batch):
        clips = torch.from_numpy(np.ascontiguousarray(videos[start:start + batch]))
        out.append(model.features(to_cubes(clips, patch)))
    return torch.cat(out).numpy()


def fit_linear(features: np.ndarray, labels: np.ndarray, num_classes: int,
               cfg: ProbeConfig) -> tuple[nn.Linear, np.ndarray, np.ndarray]:
    """Mini-batch cross-entropy on standardized features; returns (layer, mean, std)."""
    mean = features.mean(axis=0)
    std = features.std(axis=0) + 1e-6
    x = torch.from_numpy(((features - mean) / std).astype(np.float32))
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        layer = nn.Linear(x.shape[1], num_classes)
    opt = torch.optim.AdamW(layer.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = F.cross_entropy(layer(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return layer, mean, std


def _accuracy(layer, features, mean, std, labels) -> float:
    with torch.no_grad():
        logits = layer(torch.from_numpy(((features - mean) / std).astype(np.float32)))
    return float((logits.argmax(-1).numpy() == labels).mean())


def linear_probe(model: MaskedVideoAutoencoder, train: synthgen.Corpus, test: synthgen.Corpus,
                 cfg: ProbeConfig | None = None, num_classes: int | None = None) -> ProbeResult:
    """Top-1 of a linear classifier trained on frozen mean-pooled features."""
    cfg = cfg or ProbeConfig()
    if train.labels is None or test.labels is None:
        raise ConfigError("the probe needs labels for both splits")
    num_classes = num_classes or max(train.num_classes, int(test.labels.max()) + 1)
    before = param_checksum(model)
    f_train = extract_features(model, train.videos, train.patch)
    f_test = extract_features(model, test.videos, test.patch)
    layer, mean, std = fit_linear(f_train, train.labels, num_classes, cfg)
    after = param_checksum(model)
    if before != after:
        raise FrozenParameterError("encoder parameters changed during the linear probe")
    return ProbeResult(_accuracy(layer, f_test, mean, std, test.labels),
                       _accuracy(layer, f_train, mean, std, train.labels), after)


def view_offsets(length: int, window: int, count: int) -> list[int]:
    if length < window:
        raise DimensionMismatchError(f"need at least {window} frames/pixels, got {length}")
    if count == 1:
        return [(length - window) // 2]
    return [int(round(x)) for x in np.linspace(0, length - window, count)]


def multiview_infer(forward: Callable[[torch.Tensor], torch.Tensor], video: np.ndarray,
                    views: ViewSpec, clip_shape, patch: PatchConfig) -> torch.Tensor:
    """Average logits over evenly spaced clips x left/centre/right crops.

    ``forward`` maps cubes ``[1, L, P]`` to logits and is called once per view.
    Spatial crops slide along the longer side; the other side is centred.
    """
    T, H, W = clip_shape
    Tv, Hv, Wv, _ = video.shape
    if Tv < T:
        raise DimensionMismatchError(f"video has {Tv} frames, the model needs {T}")
    starts = view_offsets(Tv, T, views.temporal_views)
    along_w = Wv - W >= Hv - H
    if along_w:
        xs, ys = view_offsets(Wv, W, views.spatial_views), [(Hv - H) // 2] * views.spatial_views
    else:
        ys, xs = view_offsets(Hv, H, views.spatial_views), [(Wv - W) // 2] * views.spatial_views
    logits = []
    for s in starts:
        for y, x in zip(ys, xs):
            clip = np.ascontiguousarray(video[s:s + T, y:y + H, x:x + W])
            logits.append(forward(to_cubes(torch.from_numpy(clip)[None], patch))[0])
    return torch.stack(logits).mean(dim=0)


def recall_at_k(sims: np.ndarray, query_keys, candidate_keys, ks=(1, 5)):
    """Recall@K where a query is satisfied by any candidate with the same key.

    Candidates are ordered by descending score, ties broken by lower index.
    Returns ``(recalls, ranks, tie_count)``.
    """
    sims = np.asarray(sims, dtype=np.float64)
    if sims.shape != (len(query_keys), len(candidate_keys)):
        raise DimensionMismatchError(f"score matrix {sims.shape} vs {len(query_keys)}x{len(candidate_keys)} keys")
    cand = np.asarray(candidate_keys, dtype=object)
    ranks = np.empty(len(query_keys), dtype=np.int64)
    ties = 0
    for q, key in enumerate(query_keys):
        order = np.lexsort((np.arange(len(cand)), -sims[q]))
        hits = np.flatnonzero(cand[order] == key)
        if len(hits) == 0:
            raise ValueError(f"query {q} has no matching candidate")
        ranks[q] = hits[0]
        matched = order[hits[0]]
        if np.count_nonzero(sims[q] == sims[q, matched]) > 1:
            ties += 1
    recalls = {k: float(np.mean(ranks < k)) for k in ks}
    return recalls, ranks, ties


@torch.no_grad()
def retrieve(model: MaskedVideoAutoencoder, corpus: synthgen.Corpus, use_projection: bool = True,
             ks=(1, 5)) -> RetrievalResult:
    """Zero-shot retrieval between clips and their canonical captions."""
    model.eval()
    feats = torch.from_numpy(extract_features(model, corpus.videos, corpus.patch))
    texts = [caps[0] for caps in corpus.captions]
    t = torch.tensor(np.stack([synthgen.embed_text(c) for c in texts]), dtype=torch.float32)
    if use_projection:
        if getattr(model, "proj_head", None) is None:
            raise ConfigError("retrieval needs a projection head")
        v = model.project(feats)
        t = model.project_text(t)
    else:
        if feats.shape[1] < t.shape[1]:
            raise DimensionMismatchError("raw features are narrower than text embeddings")
        v = F.normalize(feats, dim=-1)
        t = F.pad(t, (0, feats.shape[1] - t.shape[1]))
    sims = (v @ t.T).numpy()
    r_v2t, _, ties_v = recall_at_k(sims, texts, texts, ks)
    r_t2v, _, ties_t = recall_at_k(sims.T, texts, texts, ks)
    return RetrievalResult(r_v2t, r_t2v, sims, ties_v + ties_t,
                           {"n": len(texts), "unique_texts": len(set(texts))})


def mask_coverage(corpus: synthgen.Corpus, algorithms, gamma: float, seed: int = 0) -> dict[str, np.ndarray]:
    """Per-video saliency coverage of each masking algorithm on un-augmented clips.

    Every algorithm sees the same caption and similarity map for a given video.
    """
    from .trainer import build_mask

    if corpus.gt_masks is None:
        raise ConfigError("coverage needs ground-truth foreground masks")
    cfg = TrainConfig()
    out = {a: np.empty(len(corpus)) for a in algorithms}
    for i in range(len(corpus)):
        om = corpus.object_masks[i] if corpus.object_masks is not None else None
        for a in algorithms:
            rng = np.random.default_rng([seed, i])
            caption = synthgen.sample_caption(corpus.captions[i], rng, cfg.num_captions)
            mask = build_mask(corpus, i, corpus.videos[i], om, MaskSpec(a, gamma, seed), cfg, caption, rng)
            out[a][i] = saliency_coverage(mask, corpus.gt_masks[i])
    return out


def write_metrics(path, **metrics) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path
