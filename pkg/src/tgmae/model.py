"""Asymmetric masked video autoencoder with a contrastive projection head."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointMismatchError, ConfigError
from .videocore import PatchConfig, cell_index, grid_shape


@dataclass
class ModelConfig:
    video_shape: tuple = (8, 32, 32)  # T, H, W of the model input clip
    patch: tuple = (2, 8, 8)  # t, h, w
    D: int = 96
    depth: int = 4
    heads: int = 4
    decoder_D: int = 48
    decoder_depth: int = 2
    decoder_heads: int = 4
    mlp_ratio: float = 4.0
    D_proj: int = 32
    D_text: int = 16
    text_head: bool = False

    def __post_init__(self):
        self.video_shape = tuple(int(v) for v in self.video_shape)
        self.patch = tuple(int(v) for v in self.patch)
        if self.D % self.heads or self.decoder_D % self.decoder_heads:
            raise ConfigError("embedding widths must be divisible by their head counts")
        if self.D % 2 or self.decoder_D % 2 or min(self.D, self.decoder_D) < 6:
            raise ConfigError("embedding widths must be even and at least 6 for 3-D sin-cos positions")
        if not self.text_head and self.D_proj < self.D_text:
            raise ConfigError("D_proj must be >= D_text unless the text head is enabled")
        grid_shape(self.video_shape, self.patch_config)

    @property
    def patch_config(self) -> PatchConfig:
        return PatchConfig(*self.patch, D=self.D)

    @property
    def grid(self) -> tuple[int, int, int]:
        return grid_shape(self.video_shape, self.patch_config)

    @property
    def num_tokens(self) -> int:
        Tp, Hp, Wp = self.grid
        return Tp * Hp * Wp

    @property
    def patch_dim(self) -> int:
        return self.patch_config.patch_dim


def sincos_1d(n: int, dim: int) -> torch.Tensor:
    omega = 1.0 / 10000 ** (torch.arange(dim // 2, dtype=torch.float64) / (dim // 2))
    pos = torch.arange(n, dtype=torch.float64)[:, None] * omega[None]
    return torch.cat([pos.sin(), pos.cos()], dim=1)


def sincos_3d(grid, dim: int) -> torch.Tensor:
    """Fixed ``[L, dim]`` position table: separate sin-cos codes for time, rows, columns."""
    Tp, Hp, Wp = grid
    d_t = d_h = 2 * (dim // 6)
    d_w = dim - d_t - d_h
    et, eh, ew = sincos_1d(Tp, d_t), sincos_1d(Hp, d_h), sincos_1d(Wp, d_w)
    table = torch.cat([
        et[:, None, None].expand(Tp, Hp, Wp, d_t),
        eh[None, :, None].expand(Tp, Hp, Wp, d_h),
        ew[None, None, :].expand(Tp, Hp, Wp, d_w),
    ], dim=-1)
    return table.reshape(Tp * Hp * Wp, dim).float()


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        mask = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
        return x * mask / keep


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.record = False
        self.last_attn = None
        self.last_shape = None  # (B, heads, L_q, L_k) of the latest call

    def forward(self, x):
        B, N, C = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        self.last_shape = tuple(attn.shape)
        if self.record:
            self.last_attn = attn.detach()
        return self.proj((attn @ v).transpose(1, 2).reshape(B, N, C))


class Block(nn.Module):
    """Pre-norm transformer block with joint space-time attention."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.drop_path = DropPath()

    def forward(self, x):
        x = x + self.drop_path(self.attn(self.norm1(x)))
        return x + self.drop_path(self.mlp(self.norm2(x)))


class ProjectionHead(nn.Module):
    """linear -> batch norm -> GELU -> linear, then l2 normalization."""

    def __init__(self, dim, out_dim):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim, bias=False)  # batch norm cancels a bias here
        self.bn = nn.BatchNorm1d(dim)
        self.fc2 = nn.Linear(dim, out_dim)

    def forward(self, x):
        if self.training and x.shape[0] < 2:
            raise ValueError("batch statistics need at least 2 samples in training mode")
        return F.normalize(self.fc2(F.gelu(self.bn(self.fc1(x)))), dim=-1)


def _gather(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(x, 1, idx[..., None].expand(-1, -1, x.shape[-1]))


class MaskedVideoAutoencoder(nn.Module):
    """Encoder sees visible cubes only; decoder fills the full grid with mask tokens.

    Inputs are raw flattened cubes ``[B, L, t*h*w*C]`` and visible token
    indices ``[B, L_v]`` (sorted, equal length across the batch).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        P, L = cfg.patch_dim, cfg.num_tokens
        self.patch_embed = nn.Linear(P, cfg.D)
        self.register_buffer("pos_embed", sincos_3d(cfg.grid, cfg.D), persistent=False)
        self.blocks = nn.ModuleList(Block(cfg.D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.D) if cfg.depth else nn.Identity()

        self.decoder_embed = nn.Linear(cfg.D, cfg.decoder_D)
        self.mask_token = nn.Parameter(torch.zeros(cfg.decoder_D))
        self.register_buffer("decoder_pos_embed", sincos_3d(cfg.grid, cfg.decoder_D), persistent=False)
        self.decoder_blocks = nn.ModuleList(
            Block(cfg.decoder_D, cfg.decoder_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth))
        self.decoder_norm = nn.LayerNorm(cfg.decoder_D) if cfg.decoder_depth else nn.Identity()
        self.head = nn.Linear(cfg.decoder_D, P)

        self.proj_head = ProjectionHead(cfg.D, cfg.D_proj)
        self.text_head = nn.Linear(cfg.D_text, cfg.D_proj) if cfg.text_head else None
        self.apply(self._init_weights)
        assert L == self.pos_embed.shape[0]

    @staticmethod
    def _init_weights(m):
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    def encoder_modules(self):
        return [self.patch_embed, *self.blocks, self.norm]

    def set_drop_path(self, rate: float) -> None:
        rates = np.linspace(0.0, rate, len(self.blocks)) if len(self.blocks) else []
        for blk, r in zip(self.blocks, rates):
            blk.drop_path.p = float(r)

    def all_indices(self, batch: int, device=None) -> torch.Tensor:
        return torch.arange(self.cfg.num_tokens, device=device).expand(batch, -1)

    def encode(self, patches: torch.Tensor, visible_idx: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(_gather(patches, visible_idx)) + self.pos_embed[visible_idx]
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def decode(self, enc: torch.Tensor, visible_idx: torch.Tensor) -> torch.Tensor:
        B = enc.shape[0]
        x = self.mask_token.expand(B, self.cfg.num_tokens, -1).clone()
        vis = self.decoder_embed(enc)
        x = x.scatter(1, visible_idx[..., None].expand(-1, -1, vis.shape[-1]), vis)
        x = x + self.decoder_pos_embed
        for blk in self.decoder_blocks:
            x = blk(x)
        return self.head(self.decoder_norm(x))

    def forward(self, patches, visible_idx):
        enc = self.encode(patches, visible_idx)
        return self.decode(enc, visible_idx), enc

    def project(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.proj_head(pooled)

    def project_text(self, text: torch.Tensor) -> torch.Tensor:
        """Map frozen text embeddings into the projection space.

        Without a text head the vectors are zero-padded, which keeps their
        norm and all pairwise cosines.
        """
        if self.text_head is not None:
            return F.normalize(self.text_head(text), dim=-1)
        return F.pad(text, (0, self.cfg.D_proj - text.shape[-1]))

    def features(self, patches: torch.Tensor) -> torch.Tensor:
        """Mean-pooled encoder output over the full, unmasked clip."""
        idx = self.all_indices(patches.shape[0], patches.device)
        return self.encode(patches, idx).mean(dim=1)

    def center_query_index(self) -> int:
        Tp, Hp, Wp = self.cfg.grid
        return cell_index(Tp // 2, Hp // 2, Wp // 2, self.cfg.grid)

    @torch.no_grad()
    def attention_map(self, patches: torch.Tensor, layer: int, head: int):
        """Attention of the centre cube of the centre slice over the full clip.

        ``patches`` is a single clip ``[1, L, P]`` or ``[L, P]``. Returns the
        query row reshaped to the token grid and the full ``[L, L]`` head map.
        """
        if not 0 <= layer < len(self.blocks):
            raise IndexError(f"layer {layer} out of range for depth {len(self.blocks)}")
        if not 0 <= head < self.cfg.heads:
            raise IndexError(f"head {head} out of range for {self.cfg.heads} heads")
        if patches.ndim == 2:
            patches = patches[None]
        attn_mod = self.blocks[layer].attn
        attn_mod.record = True
        try:
            self.encode(patches, self.all_indices(1, patches.device))
            weights = attn_mod.last_attn[0, head]
        finally:
            attn_mod.record = False
            attn_mod.last_attn = None
        row = weights[self.center_query_index()]
        return row.reshape(self.cfg.grid), weights


class VideoClassifier(nn.Module):
    """Linear classifier over mean-pooled encoder features of the full clip."""

    def __init__(self, backbone: MaskedVideoAutoencoder, num_classes: int):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(backbone.cfg.D, num_classes)
        nn.init.zeros_(self.head.bias)
        nn.init.normal_(self.head.weight, std=0.02)

    def forward(self, patches):
        return self.head(self.backbone.features(patches))


def build_model(cfg: ModelConfig, seed: int = 0) -> MaskedVideoAutoencoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MaskedVideoAutoencoder(cfg)


def param_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def config_to_manifest(cfg: ModelConfig) -> dict[str, str]:
    return {f"model.{k}": _format_value(v) for k, v in asdict(cfg).items()}


def config_from_manifest(entries: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        raw = entries.get(f"model.{f.name}")
        if raw is None:
            continue
        if f.name in ("video_shape", "patch"):
            kwargs[f.name] = tuple(int(x) for x in raw.split(","))
        elif f.name == "text_head":
            kwargs[f.name] = raw.lower() in ("1", "true", "yes")
        elif f.name == "mlp_ratio":
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = int(raw)
    return ModelConfig(**kwargs)


def read_manifest(path) -> dict[str, str]:
    entries = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def save_checkpoint(path, model: nn.Module, cfg: ModelConfig, extra: dict | None = None) -> Path:
    """Write the parameter blob and a ``key = value`` sidecar manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    entries = config_to_manifest(cfg)
    entries["params_sha256"] = param_checksum(model)
    entries["config_hash"] = hashlib.sha256(
        "\n".join(f"{k}={v}" for k, v in sorted(entries.items()) if k.startswith("model.")).encode()
    ).hexdigest()
    for k, v in (extra or {}).items():
        entries[k] = _format_value(v)
    manifest_path(path).write_text("".join(f"{k} = {v}\n" for k, v in entries.items()), encoding="utf-8")
    return path


def load_checkpoint(path, expect: dict | None = None, force: bool = False):
    """Load ``(model, manifest)``; classifier checkpoints come back as VideoClassifier.

    ``expect`` maps manifest keys to required values (e.g. ``corpus_hash``).
    """
    path = Path(path)
    manifest = read_manifest(manifest_path(path))
    problems = [f"{k}: checkpoint has {manifest.get(k)!r}, expected {_format_value(v)!r}"
                for k, v in (expect or {}).items() if manifest.get(k) != _format_value(v)]
    cfg = config_from_manifest(manifest)
    model = MaskedVideoAutoencoder(cfg)
    if "num_classes" in manifest:
        model = VideoClassifier(model, int(manifest["num_classes"]))
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    if param_checksum(model) != manifest.get("params_sha256"):
        problems.append("parameter checksum does not match the manifest")
    if problems and not force:
        raise CheckpointMismatchError("; ".join(problems))
    return model, manifest


def count_attention_tokens(module: nn.Module) -> list[tuple[int, int]]:
    """``(L_q, L_k)`` seen by each attention layer in its most recent call."""
    return [(m.last_shape[2], m.last_shape[3]) for m in module.modules()
            if isinstance(m, Attention) and m.last_shape is not None]


def encoder_attention_pairs(model: MaskedVideoAutoencoder) -> int:
    """Token pairs scored by the encoder's attention in the last forward pass."""
    return sum(math.prod(m.attn.last_shape[2:]) for m in model.blocks if m.attn.last_shape)
