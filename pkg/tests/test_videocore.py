import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tgmae.errors import DimensionMismatchError, FormatError
from tgmae.videocore import (
    PatchConfig, PatchTarget, VideoClip, cell_index, from_cubes, grid_shape, normalize_targets,
    patchify, raw_targets, read_video, standardize_patches, to_cubes, unpatchify, write_video,
)


def random_clip(rng, T, H, W):
    return VideoClip(rng.random((T, H, W, 3), dtype=np.float32))


def test_token_count_for_standard_geometry():
    cfg = PatchConfig(2, 16, 16, D=8)
    video = VideoClip(np.zeros((16, 224, 224, 3), dtype=np.float32))
    embed = torch.zeros(cfg.patch_dim, 8)
    seq = patchify(video, cfg, embed)
    assert seq.grid == (8, 14, 14)
    assert seq.tokens.shape == (1568, 8)


def test_token_count_small_geometry():
    assert grid_shape((16, 64, 64), PatchConfig(2, 8, 8)) == (8, 8, 8)


def test_identity_embedding_round_trip_is_exact():
    rng = np.random.default_rng(0)
    cfg = PatchConfig(2, 4, 4, D=96)
    clip = random_clip(rng, 4, 8, 12)
    seq = patchify(clip, cfg, torch.eye(cfg.patch_dim))
    back = unpatchify(PatchTarget(seq.tokens), seq.grid, cfg)
    assert np.array_equal(back.data, clip.data)


def test_standardized_round_trip():
    rng = np.random.default_rng(1)
    cfg = PatchConfig(2, 4, 4)
    clip = random_clip(rng, 4, 8, 8)
    target = normalize_targets(clip, cfg)
    back = unpatchify(target, grid_shape(clip.shape, cfg), cfg)
    assert np.abs(back.data - clip.data).max() < 1e-5


def test_zero_prediction_gives_patch_means():
    rng = np.random.default_rng(2)
    cfg = PatchConfig(2, 4, 4)
    clip = random_clip(rng, 2, 8, 8)
    target = normalize_targets(clip, cfg)
    pred = PatchTarget(torch.zeros_like(target.values), "standardized", target.mean, target.std)
    back = unpatchify(pred, grid_shape(clip.shape, cfg), cfg)
    cubes = to_cubes(torch.from_numpy(back.data), cfg)
    assert torch.allclose(cubes, target.mean.expand_as(cubes), atol=1e-6)


def test_constant_patch_hits_std_floor():
    cfg = PatchConfig(2, 4, 4)
    clip = VideoClip(np.full((2, 4, 4, 3), 0.5, dtype=np.float32))
    target = normalize_targets(clip, cfg)
    assert torch.count_nonzero(target.values) == 0
    assert target.std.item() == pytest.approx(1e-6)


def test_standardized_rows_have_zero_mean_unit_variance():
    rng = np.random.default_rng(3)
    cfg = PatchConfig(2, 4, 4)
    target = normalize_targets(random_clip(rng, 4, 16, 16), cfg)
    v = target.values.double()
    assert v.mean(dim=1).abs().max() < 1e-6
    assert (v.var(dim=1, unbiased=False) - 1).abs().max() < 1e-5


def test_uniform_noise_targets_have_unit_mean_square():
    rng = np.random.default_rng(4)
    cfg = PatchConfig(2, 8, 8)
    target = normalize_targets(random_clip(rng, 16, 64, 64), cfg)
    assert abs(float((target.values.double() ** 2).mean()) - 1.0) < 1e-3


def test_standardization_is_idempotent_without_floor():
    rng = np.random.default_rng(5)
    p = torch.from_numpy(rng.random((10, 96))).double()
    once, _, _ = standardize_patches(p, eps=0)
    twice, _, _ = standardize_patches(once, eps=0)
    assert torch.allclose(once, twice, atol=1e-12)


def test_token_order_is_temporal_major():
    rng = np.random.default_rng(6)
    cfg = PatchConfig(2, 4, 4)
    clip = random_clip(rng, 6, 8, 12)
    grid = grid_shape(clip.shape, cfg)
    cubes = to_cubes(torch.from_numpy(clip.data), cfg)
    seen = set()
    for tau in range(grid[0]):
        for i in range(grid[1]):
            for j in range(grid[2]):
                idx = cell_index(tau, i, j, grid)
                assert idx == tau * grid[1] * grid[2] + i * grid[2] + j
                seen.add(idx)
                block = clip.data[tau * 2:tau * 2 + 2, i * 4:i * 4 + 4, j * 4:j * 4 + 4]
                assert np.array_equal(cubes[idx].numpy(), block.reshape(-1))
    assert seen == set(range(cubes.shape[0]))


@settings(max_examples=40, deadline=None)
@given(t=st.integers(1, 3), h=st.integers(1, 4), w=st.integers(1, 4),
       a=st.integers(1, 3), b=st.integers(1, 3), c=st.integers(1, 3), batch=st.integers(0, 2))
def test_cube_round_trip_property(t, h, w, a, b, c, batch):
    cfg = PatchConfig(t, h, w)
    shape = (batch,) * (batch > 0) + (a * t, b * h, c * w, 3)
    x = torch.rand(shape)
    grid = grid_shape(shape[-4:], cfg)
    assert torch.equal(from_cubes(to_cubes(x, cfg), grid, cfg), x)


def test_divisibility_error():
    with pytest.raises(DimensionMismatchError):
        grid_shape((15, 64, 64), PatchConfig(2, 8, 8))
    with pytest.raises(DimensionMismatchError):
        patchify(VideoClip(np.zeros((2, 10, 8, 3), np.float32)), PatchConfig(2, 4, 4), torch.eye(96))


def test_unpatchify_shape_mismatch():
    cfg = PatchConfig(2, 4, 4)
    with pytest.raises(DimensionMismatchError):
        unpatchify(PatchTarget(torch.zeros(3, cfg.patch_dim)), (1, 2, 2), cfg)


def test_video_clip_validation():
    with pytest.raises(ValueError):
        VideoClip(np.full((1, 2, 2, 3), 1.5, np.float32))
    with pytest.raises(DimensionMismatchError):
        VideoClip(np.zeros((1, 2, 2, 4), np.float32))


def test_tgmv_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    pixels = rng.integers(0, 256, size=(3, 5, 7, 3), dtype=np.uint8)
    clip = VideoClip.from_uint8(pixels)
    write_video(tmp_path / "v.tgmv", clip)
    raw = (tmp_path / "v.tgmv").read_bytes()
    assert raw[:4] == b"TGMV" and len(raw) == 20 + pixels.size
    assert np.array_equal(read_video(tmp_path / "v.tgmv").to_uint8(), pixels)


def test_tgmv_rejects_bad_files(tmp_path):
    (tmp_path / "bad.tgmv").write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(FormatError):
        read_video(tmp_path / "bad.tgmv")
    clip = VideoClip(np.zeros((1, 2, 2, 3), np.float32))
    write_video(tmp_path / "t.tgmv", clip)
    (tmp_path / "t.tgmv").write_bytes((tmp_path / "t.tgmv").read_bytes()[:-1])
    with pytest.raises(FormatError):
        read_video(tmp_path / "t.tgmv")


def test_raw_targets_match_cubes():
    rng = np.random.default_rng(8)
    cfg = PatchConfig(2, 4, 4)
    clip = random_clip(rng, 2, 4, 4)
    assert raw_targets(clip, cfg).normalization == "raw"
    assert torch.equal(raw_targets(clip, cfg).values, to_cubes(torch.from_numpy(clip.data), cfg))
