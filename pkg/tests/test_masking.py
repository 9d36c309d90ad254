import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tgmae.errors import DimensionMismatchError
from tgmae.masking import (
    ALGORITHMS, MaskSpec, batch_visible_indices, dump_mask, generate_mask, mask_count,
    motion_mask, motion_scores, partition, random_mask, saliency_coverage, text_mask, tube_mask,
)
from tgmae.netpbm import read_pnm
from tgmae.videocore import PatchConfig


def oracle_topk(scores, k, largest):
    """Full sort with explicit (score, index) keys."""
    out = np.zeros(scores.shape, dtype=bool)
    for tau in range(scores.shape[0]):
        flat = scores[tau].reshape(-1)
        keyed = sorted(range(len(flat)), key=lambda i: (-flat[i] if largest else flat[i], i))
        out[tau].reshape(-1)[keyed[:k]] = True
    return out


@pytest.mark.parametrize("gamma,cells,expected", [
    (0.75, 196, 147), (0.6, 196, 118), (0.0, 196, 0), (0.9, 196, 176), (0.5, 15, 8), (0.7, 15, 11),
    (0.75, 16, 12), (0.6, 16, 10),
])
def test_mask_count(gamma, cells, expected):
    grid = (1, 1, cells) if cells == 15 else (1, 14, 14) if cells == 196 else (1, 4, 4)
    assert mask_count(gamma, grid) == expected


def test_mask_count_rejects_bad_gamma():
    with pytest.raises(ValueError):
        mask_count(1.0, (1, 4, 4))
    with pytest.raises(ValueError):
        MaskSpec("tube", -0.1)
    with pytest.raises(ValueError):
        MaskSpec("checkerboard", 0.5)


def test_tube_identical_slices_and_count():
    grid = (8, 14, 14)
    m = tube_mask(MaskSpec("tube", 0.75), grid, np.random.default_rng(0))
    assert (m == m[0]).all()
    assert m[0].sum() == 147


def test_tube_cell_frequency_is_uniform():
    grid = (1, 8, 8)
    spec = MaskSpec("tube", 0.75)
    rng = np.random.default_rng(123)
    freq = sum(tube_mask(spec, grid, rng)[0].astype(int) for _ in range(10_000)) / 10_000
    assert np.abs(freq - 0.75).max() < 0.02


def test_random_mask_slices_differ():
    spec = MaskSpec("random", 0.5)
    differing = 0
    for seed in range(100):
        m = random_mask(spec, (4, 8, 8), np.random.default_rng(seed))
        assert (m.reshape(4, -1).sum(axis=1) == 32).all()
        differing += any(not np.array_equal(m[0], m[t]) for t in range(1, 4))
    assert differing >= 99


def test_zero_ratio_gives_empty_masks():
    spec = MaskSpec("random", 0.0)
    assert not random_mask(spec, (2, 4, 4), np.random.default_rng(0)).any()
    assert not tube_mask(MaskSpec("tube", 0.0), (2, 4, 4), np.random.default_rng(0)).any()


def test_static_video_motion_ties_break_to_low_index():
    cfg = PatchConfig(2, 4, 4)
    video = np.full((4, 16, 16, 3), 0.3, dtype=np.float32)
    assert not motion_scores(video, cfg).any()
    m = motion_mask(video, MaskSpec("motion", 0.25), cfg)
    for sl in m:
        assert np.array_equal(np.flatnonzero(sl.reshape(-1)), np.arange(4))


def test_motion_mask_follows_moving_square():
    cfg = PatchConfig(2, 4, 4)
    video = np.zeros((4, 16, 16, 3), dtype=np.float32)
    for f in range(4):
        video[f, 4:8, 2 + 2 * f:6 + 2 * f] = 1.0
    scores = motion_scores(video, cfg)
    m = motion_mask(video, MaskSpec("motion", 0.125), cfg)
    assert (scores[m] > 0).all()


def test_motion_scores_last_frame_repeats_difference():
    cfg = PatchConfig(1, 2, 2)
    rng = np.random.default_rng(0)
    video = rng.random((3, 2, 2, 3))
    s = motion_scores(video, cfg)
    d = np.abs(np.diff(video, axis=0)).mean(axis=(1, 2, 3))
    assert s[:, 0, 0] == pytest.approx([d[0], d[1], d[1]])


def test_text_mask_on_increasing_map():
    sims = np.arange(196, dtype=np.float64).reshape(1, 14, 14)
    m = text_mask(sims, MaskSpec("text-top", 0.75))
    assert np.array_equal(np.flatnonzero(m), np.arange(49, 196))
    bottom = text_mask(sims, MaskSpec("text-bottom", 0.75))
    assert np.array_equal(np.flatnonzero(bottom), np.arange(147))


def test_flat_map_masks_first_cells():
    m = text_mask(np.zeros((2, 4, 4)), MaskSpec("text-top", 0.5))
    for sl in m:
        assert np.array_equal(np.flatnonzero(sl.reshape(-1)), np.arange(8))


def test_top_and_bottom_partition_at_half():
    rng = np.random.default_rng(3)
    sims = rng.permutation(64).reshape(1, 8, 8).astype(float)
    top = text_mask(sims, MaskSpec("text-top", 0.5))
    bottom = text_mask(sims, MaskSpec("text-bottom", 0.5))
    assert not (top & bottom).any() and (top | bottom).all()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), gamma=st.floats(0.05, 0.95))
def test_text_mask_invariant_under_monotone_transform(seed, gamma):
    rng = np.random.default_rng(seed)
    sims = rng.integers(-3, 4, size=(2, 4, 5)).astype(float) / 3
    spec = MaskSpec("text-top", gamma)
    assert np.array_equal(text_mask(sims, spec), text_mask(np.exp(3 * sims) + 7, spec))


def test_text_mask_grid_mismatch():
    with pytest.raises(DimensionMismatchError):
        text_mask(np.zeros((2, 4, 4)), MaskSpec("text-top", 0.5), grid=(2, 4, 5))


def test_top_k_matches_oracle_with_ties():
    rng = np.random.default_rng(11)
    for case in range(50):
        sims = rng.integers(0, 4, size=(2, 3, 5)).astype(float)
        for alg in ("text-top", "text-bottom"):
            spec = MaskSpec(alg, float(rng.uniform(0, 0.95)))
            k = spec.k_per_slice(sims.shape)
            assert np.array_equal(text_mask(sims, spec), oracle_topk(sims, k, alg == "text-top"))


def test_generate_mask_dispatch_and_requirements():
    grid = (2, 4, 4)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        generate_mask(MaskSpec("motion", 0.5), grid, rng)
    with pytest.raises(ValueError):
        generate_mask(MaskSpec("text-top", 0.5), grid, rng)
    for alg in ALGORITHMS:
        m = generate_mask(MaskSpec(alg, 0.5), grid, np.random.default_rng(1), simmap=np.zeros(grid),
                          video=np.zeros((4, 16, 16, 3)), cfg=PatchConfig(2, 4, 4))
        assert (m.reshape(2, -1).sum(axis=1) == 8).all()


def test_generators_are_deterministic():
    grid = (4, 6, 6)
    for alg in ("tube", "random"):
        a = generate_mask(MaskSpec(alg, 0.6), grid, np.random.default_rng(5))
        b = generate_mask(MaskSpec(alg, 0.6), grid, np.random.default_rng(5))
        assert np.array_equal(a, b)


def test_partition_properties():
    rng = np.random.default_rng(4)
    assert len(partition(None, np.zeros((2, 3, 3), bool)).visible_idx) == 18
    for seed in range(20):
        m = random_mask(MaskSpec("random", 0.6), (2, 5, 5), np.random.default_rng(seed))
        p = partition(None, m)
        both = np.concatenate([p.visible_idx, p.masked_idx])
        assert sorted(both.tolist()) == list(range(50))
        assert len(p.visible_idx) == 50 - 2 * 15
    m = tube_mask(MaskSpec("tube", 0.9), (3, 4, 4), rng)
    assert len(partition(None, m).visible_idx) == 48 - 3 * mask_count(0.9, (4, 4))


def test_batch_visible_indices():
    masks = np.stack([random_mask(MaskSpec("random", 0.5), (2, 4, 4), np.random.default_rng(s))
                      for s in range(3)])
    vis, hid = batch_visible_indices(masks)
    assert vis.shape == (3, 16) and hid.shape == (3, 16)
    for b in range(3):
        assert np.array_equal(vis[b], np.flatnonzero(~masks[b].reshape(-1)))
    uneven = masks.copy()
    uneven[0, 0, 0, 0] = ~uneven[0, 0, 0, 0]
    with pytest.raises(DimensionMismatchError):
        batch_visible_indices(uneven)


def test_saliency_coverage_cases():
    gt = np.zeros((1, 4, 4), bool)
    gt[0, :2] = True
    assert saliency_coverage(gt, gt) == 1.0
    assert saliency_coverage(~gt, gt) == 0.0
    with pytest.raises(ValueError):
        saliency_coverage(np.zeros_like(gt), gt)


def test_tube_coverage_expectation():
    gt = np.random.default_rng(9).random((4, 6, 6)) < 0.3
    spec = MaskSpec("tube", 0.5)
    cov = [saliency_coverage(tube_mask(spec, gt.shape, np.random.default_rng(s)), gt) for s in range(1000)]
    assert abs(np.mean(cov) - gt.mean()) < 0.02


def test_dump_mask(tmp_path):
    m = tube_mask(MaskSpec("tube", 0.5), (2, 3, 4), np.random.default_rng(0))
    paths = dump_mask(m, tmp_path, 7)
    assert [p.name for p in paths] == ["mask_7_0.pgm", "mask_7_1.pgm"]
    assert np.array_equal(read_pnm(paths[1]) == 255, m[1])
