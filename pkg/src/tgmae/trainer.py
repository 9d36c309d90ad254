"""Pretraining and finetuning loops, schedules and layer-wise lr decay.

All randomness for step ``s`` comes from ``numpy.random.default_rng([seed, s])``
so batch assembly never depends on execution order.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import synthgen
from .config import RunConfig, TrainConfig, write_run_config
from .errors import ConfigError, DimensionMismatchError, FrozenParameterError, TrainingDivergedError
from .losses import combine, masked_mse, symmetric_nce
from .masking import MaskSpec, batch_visible_indices, dump_mask, generate_mask
from .model import (MaskedVideoAutoencoder, ModelConfig, VideoClassifier, build_model,
                    load_checkpoint, save_checkpoint)
from .videocore import standardize_patches, to_cubes

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "l_mse", "l_nce", "nce_diagnostic", "lr", "wall_ms")


def effective_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule: ``base_lr * batch_size / 256``."""
    if batch_size <= 0:
        raise ValueError("batch size must be positive")
    return base_lr * batch_size / 256


def lr_at(step: int, peak_lr: float, warmup_steps: int, total_steps: int, min_lr: float = 0.0) -> float:
    """Linear warmup from 0, then half-cosine decay to ``min_lr`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return peak_lr
    progress = (step - warmup_steps) / span
    return min_lr + (peak_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def layer_multipliers(num_blocks: int, decay: float) -> list[float]:
    """Multiplier per depth ``d = 0..n+1``: patch embed, blocks, then head."""
    if not 0 < decay <= 1:
        raise ValueError("decay must lie in (0, 1]")
    n = num_blocks
    return [decay ** (n + 1 - d) for d in range(n + 2)]


def _layer_id(name: str, num_blocks: int) -> int:
    if name.startswith("backbone."):
        name = name[len("backbone."):]
    if name.startswith("patch_embed"):
        return 0
    if name.startswith("blocks."):
        return int(name.split(".")[1]) + 1
    return num_blocks + 1


def layerwise_lr_groups(model: torch.nn.Module, decay: float, weight_decay: float = 0.05) -> list[dict]:
    """Optimizer groups scaled by ``decay ** (n + 1 - depth)``.

    Biases and normalization weights are kept out of weight decay.
    """
    backbone = model.backbone if isinstance(model, VideoClassifier) else model
    n = len(backbone.blocks)
    mult = layer_multipliers(n, decay)
    groups: dict[tuple[int, bool], dict] = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if isinstance(model, VideoClassifier) and name.startswith("backbone.") and not (
                name.startswith(("backbone.patch_embed", "backbone.blocks", "backbone.norm"))):
            continue  # decoder and projection head are unused when classifying
        lid = _layer_id(name, n)
        no_decay = p.ndim < 2
        g = groups.setdefault((lid, no_decay), {
            "params": [], "names": [], "layer": lid, "lr_scale": mult[lid],
            "weight_decay": 0.0 if no_decay else weight_decay,
        })
        g["params"].append(p)
        g["names"].append(name)
    return [groups[k] for k in sorted(groups)]


def plain_groups(model: torch.nn.Module, weight_decay: float) -> list[dict]:
    decay, no_decay = [], []
    for p in model.parameters():
        if p.requires_grad:
            (no_decay if p.ndim < 2 else decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay, "lr_scale": 1.0},
            {"params": no_decay, "weight_decay": 0.0, "lr_scale": 1.0}]


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for g in optimizer.param_groups:
        g["lr"] = lr * g.get("lr_scale", 1.0)


# --------------------------------------------------------------------------
# batch assembly


def augment(video: np.ndarray, objmask: np.ndarray | None, cfg: TrainConfig,
            rng: np.random.Generator):
    """Multi-scale crop resized back to the input size, plus optional flip.

    The object mask follows the same geometry (as a float coverage map).
    """
    T, H, W, _ = video.shape
    lo, hi = cfg.crop_scale
    om = None if objmask is None else objmask.astype(np.float32)
    scale = float(rng.uniform(lo, hi)) if lo < hi else lo
    if scale < 1.0:
        ch, cw = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
        y0, x0 = int(rng.integers(0, H - ch + 1)), int(rng.integers(0, W - cw + 1))
        v = torch.from_numpy(np.ascontiguousarray(video[:, y0:y0 + ch, x0:x0 + cw])).permute(0, 3, 1, 2)
        video = F.interpolate(v, size=(H, W), mode="bilinear", align_corners=False).permute(0, 2, 3, 1).numpy()
        video = np.clip(video, 0.0, 1.0)
        if om is not None:
            m = torch.from_numpy(np.ascontiguousarray(om[:, None, y0:y0 + ch, x0:x0 + cw]))
            om = F.interpolate(m, size=(H, W), mode="bilinear", align_corners=False)[:, 0].numpy()
    if cfg.flip_enabled and rng.random() < 0.5:
        video = video[:, :, ::-1]
        if om is not None:
            om = om[:, :, ::-1]
    return np.ascontiguousarray(video, dtype=np.float32), om


@dataclass
class Batch:
    indices: np.ndarray
    patches: torch.Tensor  # [B, L, P] raw cubes
    masks: np.ndarray  # bool [B, T', H', W']
    visible_idx: torch.Tensor  # [B, L_v]
    masked: torch.Tensor  # bool [B, L]
    text: torch.Tensor  # [B, D_e]
    captions: list[str] = field(default_factory=list)


def build_mask(corpus: synthgen.Corpus, i: int, video: np.ndarray, om, spec: MaskSpec,
               cfg: TrainConfig, caption: str, rng: np.random.Generator) -> np.ndarray:
    grid = corpus.grid
    simmap = None
    if spec.algorithm.startswith("text"):
        if cfg.simmap_source == "imported":
            simmap = synthgen.import_similarity_map(corpus.simmap_path(i), grid)
        else:
            if corpus.scenes is None or om is None:
                raise ConfigError("toy similarity maps need scene metadata; use simmap_source = imported")
            scene = corpus.scenes[i]
            cells = synthgen.embed_cells(synthgen.cell_overlap(om, corpus.patch), scene,
                                         scene.noise_sigma, rng)
            simmap = synthgen.similarity_from_cells(cells, caption)
    return generate_mask(spec, grid, rng, video=video, simmap=simmap, cfg=corpus.patch)


def make_batch(corpus: synthgen.Corpus, indices, spec: MaskSpec, cfg: TrainConfig,
               rng: np.random.Generator, train: bool = True) -> Batch:
    videos, masks, texts, caps = [], [], [], []
    for i in indices:
        i = int(i)
        video = corpus.videos[i]
        om = corpus.object_masks[i] if corpus.object_masks is not None else None
        if train:
            if cfg.simmap_source == "imported" and spec.algorithm.startswith("text") and (
                    cfg.crop_scale[0] < 1.0 or cfg.flip_enabled):
                raise ConfigError("imported similarity maps cannot follow crop/flip; set crop_scale = 1,1")
            video, om = augment(video, om, cfg, rng)
        caption = synthgen.sample_caption(corpus.captions[i], rng, cfg.num_captions)
        masks.append(build_mask(corpus, i, video, om, spec, cfg, caption, rng))
        videos.append(video)
        texts.append(synthgen.embed_text(caption))
        caps.append(caption)
    masks = np.stack(masks)
    vis, _ = batch_visible_indices(masks)
    patches = to_cubes(torch.from_numpy(np.stack(videos)), corpus.patch)
    return Batch(np.asarray(indices), patches, masks, torch.from_numpy(vis),
                 torch.from_numpy(masks.reshape(len(masks), -1)),
                 torch.tensor(np.stack(texts), dtype=torch.float32), caps)


def reconstruction_targets(patches: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    if cfg.norm_targets:
        return standardize_patches(patches)[0]
    return patches


def step_losses(model: MaskedVideoAutoencoder, batch: Batch, cfg: TrainConfig):
    """Forward one batch; returns ``(LossReport, prediction)``."""
    pred, enc = model(batch.patches, batch.visible_idx)
    target = reconstruction_targets(batch.patches, cfg)
    l_mse = masked_mse(pred, target, batch.masked if cfg.mse_masked_only else None)
    pooled = enc.mean(dim=1)
    if cfg.contrastive:
        v = model.project(pooled)
        l_nce = symmetric_nce(v, model.project_text(batch.text), cfg.tau)
    elif len(batch.indices) >= 2:
        with torch.no_grad():
            v = model.project(pooled)
            l_nce = symmetric_nce(v, model.project_text(batch.text), cfg.tau)
    else:
        l_nce = torch.tensor(float("nan"))
    return combine(l_mse, l_nce, cfg.lam, cfg.contrastive), pred


# --------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    model: MaskedVideoAutoencoder
    model_cfg: ModelConfig
    checkpoint: Path | None
    loss_csv: Path | None
    rows: list[dict]


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 1 << 20, epoch]).permutation(n)


def batch_indices(seed: int, step: int, steps_per_epoch: int, batch: int, n: int) -> np.ndarray:
    epoch, k = divmod(step, steps_per_epoch)
    return _epoch_order(seed, epoch, n)[k * batch:(k + 1) * batch]


def pretrain(corpus: synthgen.Corpus, run: RunConfig, out_dir=None,
             model: MaskedVideoAutoencoder | None = None) -> PretrainResult:
    """Self-supervised pretraining with optional video-text contrastive loss."""
    cfg, spec = run.train, run.mask
    cfg.validate()
    model_cfg = run.model_config(corpus.videos.shape[1:4], (corpus.patch.t, corpus.patch.h, corpus.patch.w))
    B = min(cfg.batch_size, len(corpus))
    if cfg.contrastive and B < 2:
        raise ConfigError("contrastive training needs at least 2 videos per batch")
    if model is None:
        model = build_model(model_cfg, cfg.seed)
    embed_sum = synthgen.projection_checksum()

    spe = max(1, len(corpus) // B)
    total = cfg.epochs * spe
    warmup = cfg.resolved_warmup() * spe
    peak = effective_lr(cfg.resolved_base_lr(False), B)
    opt = torch.optim.AdamW(plain_groups(model, cfg.weight_decay), lr=peak,
                            betas=cfg.resolved_betas(False))

    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_run_config(out / "run_config.txt", run)
        fh = open(out / "loss.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)

    rows = []
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            for step in range(total):
                t0 = time.perf_counter()
                rng = np.random.default_rng([cfg.seed, step])
                idx = batch_indices(cfg.seed, step, spe, B, len(corpus))
                batch = make_batch(corpus, idx, spec, cfg, rng)
                lr = lr_at(step, peak, warmup, total, cfg.min_lr)
                set_lr(opt, lr)
                model.train()
                report, _ = step_losses(model, batch, cfg)
                if not math.isfinite(float(report.total.detach())):
                    _dump_divergence(out, step, report, batch)
                    raise TrainingDivergedError(f"non-finite loss at step {step}: {report.as_row()}")
                opt.zero_grad(set_to_none=True)
                report.total.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                row = {"step": step, **report.as_row(), "lr": lr,
                       "wall_ms": (time.perf_counter() - t0) * 1000.0}
                rows.append(row)
                if writer is not None:
                    writer.writerow([row[c] if c == "step" else repr(float(row[c])) for c in LOSS_COLUMNS])
                    if cfg.dump_masks and step in (0, total - 1):
                        for vid, m in zip(batch.indices, batch.masks):
                            dump_mask(m, out / "masks" / f"step_{step:06d}", int(vid))
                    if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                        save_checkpoint(out / f"checkpoint_{step + 1:06d}.pt", model, model_cfg,
                                        _manifest_extra(corpus, run, "pretrain"))
                if step % max(1, total // 10) == 0:
                    log.info("step %d/%d  mse %.4f  nce %.4f  lr %.2e", step, total,
                             report.l_mse, report.nce_diagnostic, lr)
    finally:
        if fh is not None:
            fh.close()
    if synthgen.projection_checksum() != embed_sum:
        raise FrozenParameterError("the frozen text/patch embedder changed during training")

    ckpt = None
    if out is not None:
        ckpt = save_checkpoint(out / "checkpoint.pt", model, model_cfg, _manifest_extra(corpus, run, "pretrain"))
    return PretrainResult(model, model_cfg, ckpt, out / "loss.csv" if out else None, rows)


def _manifest_extra(corpus, run: RunConfig, kind: str) -> dict:
    return {"kind": kind, "corpus_hash": corpus.content_hash(), "seed": run.train.seed,
            "mask.algorithm": run.mask.algorithm, "mask.gamma": run.mask.gamma,
            "contrastive": run.train.contrastive,
            "embedder_sha256": synthgen.projection_checksum()}


def _dump_divergence(out, step, report, batch) -> None:
    if out is None:
        return
    info = {"step": step, **report.as_row(), "videos": [int(i) for i in batch.indices],
            "captions": batch.captions}
    (out / "divergence.json").write_text(json.dumps(info, indent=1), encoding="utf-8")


@torch.no_grad()
def evaluate_reconstruction(model: MaskedVideoAutoencoder, corpus: synthgen.Corpus, run: RunConfig,
                            seed: int = 12345) -> float:
    """Masked MSE over the whole corpus, no augmentation, eval mode."""
    model.eval()
    total, count = 0.0, 0
    rng = np.random.default_rng(seed)
    for start in range(0, len(corpus), 64):
        idx = np.arange(start, min(start + 64, len(corpus)))
        batch = make_batch(corpus, idx, run.mask, run.train, rng, train=False)
        pred, _ = model(batch.patches, batch.visible_idx)
        target = reconstruction_targets(batch.patches, run.train)
        loss = masked_mse(pred, target, batch.masked)
        n = int(batch.masked.sum())
        total += float(loss) * n
        count += n
    return total / count


def read_loss_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "nce_diagnostic" not in reader.fieldnames:
            raise ValueError(f"{path}: not a loss log (missing nce_diagnostic column)")
        rows = []
        for n, r in enumerate(reader, 2):
            try:
                rows.append({k: float(v) for k, v in r.items()})
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{n}: malformed row {r}") from None
        return rows


# --------------------------------------------------------------------------
# finetuning


@dataclass
class FinetuneResult:
    model: VideoClassifier
    train_accuracy: float
    history: list[dict]
    checkpoint: Path | None
    groups: list[dict]


def finetune(backbone: MaskedVideoAutoencoder, corpus: synthgen.Corpus, run: RunConfig,
             out_dir=None, num_classes: int | None = None) -> FinetuneResult:
    """Supervised finetuning of the encoder plus a linear head."""
    cfg = run.train
    cfg.validate()
    if corpus.labels is None:
        raise ConfigError("finetuning needs a label file")
    num_classes = num_classes or corpus.num_classes
    if corpus.labels.max() >= num_classes or corpus.labels.min() < 0:
        raise DimensionMismatchError(f"labels outside [0, {num_classes})")
    if tuple(corpus.videos.shape[1:4]) != backbone.cfg.video_shape:
        raise DimensionMismatchError("corpus clip shape differs from the pretrained model input")

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = VideoClassifier(backbone, num_classes)
        backbone.set_drop_path(cfg.drop_path)
        groups = layerwise_lr_groups(model, cfg.layer_decay, cfg.weight_decay)
        B = min(cfg.batch_size, len(corpus))
        spe = max(1, len(corpus) // B)
        total = cfg.epochs * spe
        warmup = cfg.resolved_warmup() * spe
        peak = effective_lr(cfg.resolved_base_lr(True), B)
        opt = torch.optim.AdamW([{k: v for k, v in g.items() if k != "names"} for g in groups],
                                lr=peak, betas=cfg.resolved_betas(True))
        labels = torch.from_numpy(corpus.labels)
        history = []
        for step in range(total):
            rng = np.random.default_rng([cfg.seed, step])
            idx = batch_indices(cfg.seed, step, spe, B, len(corpus))
            clips = np.stack([augment(corpus.videos[i], None, cfg, rng)[0] for i in idx])
            patches = to_cubes(torch.from_numpy(clips), corpus.patch)
            set_lr(opt, lr_at(step, peak, warmup, total, cfg.min_lr))
            model.train()
            loss = F.cross_entropy(model(patches), labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite finetune loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            history.append({"step": step, "loss": loss.item()})
        backbone.set_drop_path(0.0)

    acc = classify_accuracy(model, corpus)
    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_run_config(out / "run_config.txt", run)
        extra = _manifest_extra(corpus, run, "finetune")
        extra.update(num_classes=num_classes, train_top1=acc)
        ckpt = save_checkpoint(out / "classifier.pt", model, backbone.cfg, extra)
    return FinetuneResult(model, acc, history, ckpt, groups)


@torch.no_grad()
def classify_accuracy(model: VideoClassifier, corpus: synthgen.Corpus) -> float:
    model.eval()
    correct = 0
    for start in range(0, len(corpus), 64):
        clips = torch.from_numpy(corpus.videos[start:start + 64])
        logits = model(to_cubes(clips, corpus.patch))
        correct += int((logits.argmax(-1) == torch.from_numpy(corpus.labels[start:start + 64])).sum())
    return correct / len(corpus)


def load_backbone(path, expect: dict | None = None, force: bool = False) -> MaskedVideoAutoencoder:
    model, _ = load_checkpoint(path, expect, force)
    return model.backbone if isinstance(model, VideoClassifier) else model
