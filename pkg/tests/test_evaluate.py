import numpy as np
import pytest
import torch

from tgmae import evaluate, synthgen
from tgmae.config import RunConfig
from tgmae.errors import ConfigError, DimensionMismatchError, FrozenParameterError
from tgmae.evaluate import (
    ProbeConfig, ViewSpec, fit_linear, linear_probe, mask_coverage, multiview_infer, recall_at_k, retrieve,
    view_offsets, write_metrics,
)
from tgmae.model import build_model, param_checksum
from tgmae.videocore import PatchConfig

SMALL_MODEL = {"D": 24, "depth": 1, "heads": 2, "decoder_D": 12, "decoder_depth": 1, "decoder_heads": 2,
               "D_proj": 16}


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    return synthgen.generate_dataset(tmp_path_factory.mktemp("eval"), 16, seed=4)


def small_model(corpus, seed=0, **over):
    run = RunConfig(model={**SMALL_MODEL, **over})
    return build_model(run.model_config(corpus.videos.shape[1:4], (2, 8, 8)), seed)


def test_fit_linear_separates_two_classes():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 20)
    feats = rng.normal(size=(40, 6)).astype(np.float32)
    feats[:, 2] += np.where(labels == 1, 4.0, -4.0)
    layer, mean, std = fit_linear(feats, labels, 2, ProbeConfig(epochs=50, lr=0.05))
    assert evaluate._accuracy(layer, feats, mean, std, labels) == 1.0


def test_probe_keeps_encoder_frozen(small_corpus, monkeypatch):
    model = small_model(small_corpus)
    before = param_checksum(model)
    train, test = small_corpus.subset(np.arange(12)), small_corpus.subset(np.arange(12, 16))
    res = linear_probe(model, train, test, ProbeConfig(epochs=5))
    assert res.checksum == before == param_checksum(model)
    assert 0.0 <= res.top1 <= 1.0 and 0.0 <= res.train_top1 <= 1.0

    real = evaluate.extract_features

    def tampering(m, *args, **kw):
        with torch.no_grad():
            m.patch_embed.weight.add_(1.0)
        return real(m, *args, **kw)

    monkeypatch.setattr(evaluate, "extract_features", tampering)
    with pytest.raises(FrozenParameterError):
        linear_probe(model, train, test, ProbeConfig(epochs=1))


def test_probe_needs_labels(small_corpus):
    unlabeled = small_corpus.subset(np.arange(4))
    unlabeled.labels = None
    with pytest.raises(ConfigError):
        linear_probe(small_model(small_corpus), unlabeled, unlabeled)


@pytest.mark.slow
def test_pretraining_beats_random_init_probe(pretrained, toy_split):
    """Full method (text-guided masking + contrastive) vs a randomly initialised encoder, three seeds.

    Pure-MAE probes are printed for reference; at this corpus scale they sit near random init.
    """
    train, test = toy_split
    wins = []
    for seed in range(3):
        joint = pretrained.get("text-top", True, seed)
        random_init = linear_probe(build_model(joint.model_cfg, seed), train, test).top1
        trained = linear_probe(joint.model, train, test).top1
        mae = linear_probe(pretrained.get("text-top", False, seed).model, train, test).top1
        print(f"seed {seed}: joint {trained:.4f} pure-mae {mae:.4f} random-init {random_init:.4f}")
        wins.append(trained >= random_init)
    assert sum(wins) >= 2


def test_view_offsets():
    assert view_offsets(16, 8, 1) == [4]
    assert view_offsets(16, 8, 3) == [0, 4, 8]
    assert view_offsets(8, 8, 5) == [0] * 5
    with pytest.raises(DimensionMismatchError):
        view_offsets(7, 8, 1)


def _sum_forward(calls):
    def forward(cubes):
        calls.append(cubes.clone())
        return cubes.sum(dim=(1, 2))[:, None].repeat(1, 3)
    return forward


def test_single_view_is_one_centered_forward():
    patch = PatchConfig(2, 8, 8)
    video = np.random.default_rng(0).random((8, 32, 48, 3), dtype=np.float32)
    calls = []
    out = multiview_infer(_sum_forward(calls), video, ViewSpec(1, 1), (8, 32, 32), patch)
    assert len(calls) == 1
    centre = torch.from_numpy(np.ascontiguousarray(video[:, :, 8:40]))
    assert torch.allclose(out, centre.sum().repeat(3), rtol=1e-5)


def test_fifteen_views_and_constant_video():
    patch = PatchConfig(2, 8, 8)
    video = np.full((20, 32, 40, 3), 0.25, dtype=np.float32)
    calls = []
    out = multiview_infer(_sum_forward(calls), video, ViewSpec(5, 3), (8, 32, 32), patch)
    assert len(calls) == 15
    assert all(torch.equal(c, calls[0]) for c in calls)
    assert torch.allclose(out, calls[0].sum().repeat(3))
    with pytest.raises(DimensionMismatchError):
        multiview_infer(_sum_forward([]), video[:6], ViewSpec(1, 1), (8, 32, 32), patch)
    with pytest.raises(ValueError):
        ViewSpec(0, 1)


def test_spatial_views_slide_along_longer_side():
    patch = PatchConfig(2, 8, 8)
    video = np.zeros((8, 48, 32, 3), dtype=np.float32)
    video[:, :16] = 1.0  # only the top crop sees the bright band
    calls = []
    multiview_infer(_sum_forward(calls), video, ViewSpec(1, 3), (8, 32, 32), patch)
    sums = [float(c.sum()) for c in calls]
    assert sums[0] > sums[1] > sums[2] == 0.0


def test_recall_identical_embeddings():
    emb = np.linalg.qr(np.random.default_rng(0).normal(size=(10, 10)))[0]
    keys = [f"c{i}" for i in range(10)]
    recalls, ranks, ties = recall_at_k(emb @ emb.T, keys, keys, ks=(1, 5, 10))
    assert recalls == {1: 1.0, 5: 1.0, 10: 1.0} and ties == 0 and (ranks == 0).all()


def test_recall_chance_level_and_monotone():
    rng = np.random.default_rng(5)
    keys = list(range(100))
    r1 = []
    for _ in range(200):
        recalls, _, _ = recall_at_k(rng.normal(size=(100, 100)), keys, keys, ks=(1, 5, 10, 100))
        assert recalls[1] <= recalls[5] <= recalls[10] <= recalls[100] == 1.0
        r1.append(recalls[1])
    assert abs(np.mean(r1) - 0.01) < 0.003


def test_recall_ties_and_duplicate_keys():
    sims = np.array([[0.5, 0.5, 0.1], [0.2, 0.9, 0.9], [0.0, 0.1, 0.3]])
    # lower index wins a tie, so query 1 is ranked behind candidate 1 for key "c"
    recalls, ranks, ties = recall_at_k(sims, ["a", "c", "c"], ["a", "b", "c"], ks=(1, 2))
    assert ranks.tolist() == [0, 1, 0] and ties == 2
    assert recalls == {1: pytest.approx(2 / 3), 2: 1.0}
    # duplicate captions: any candidate with the same text counts
    recalls, ranks, _ = recall_at_k(sims, ["x", "x", "y"], ["x", "x", "y"], ks=(1,))
    assert ranks.tolist() == [0, 0, 0]
    with pytest.raises(DimensionMismatchError):
        recall_at_k(sims, ["a"], ["a", "b", "c"])


def test_retrieve_modes(small_corpus):
    model = small_model(small_corpus)
    res = retrieve(model, small_corpus)
    assert res.sims.shape == (16, 16)
    assert set(res.r_at) == {1, 5} and res.r_at[1] <= res.r_at[5]
    assert res.meta["n"] == 16
    raw = retrieve(model, small_corpus, use_projection=False)
    assert np.all(np.abs(raw.sims) <= 1 + 1e-5)
    model.proj_head = None
    with pytest.raises(ConfigError):
        retrieve(model, small_corpus)


def test_mask_coverage_shapes(small_corpus):
    cov = mask_coverage(small_corpus, ["tube", "text-top"], 0.75)
    assert set(cov) == {"tube", "text-top"} and all(v.shape == (16,) for v in cov.values())
    assert all(((v >= 0) & (v <= 1)).all() for v in cov.values())
    again = mask_coverage(small_corpus, ["tube", "text-top"], 0.75)
    assert all(np.array_equal(cov[a], again[a]) for a in cov)
    stripped = small_corpus.subset(np.arange(4))
    stripped.gt_masks = None
    with pytest.raises(ConfigError):
        mask_coverage(stripped, ["tube"], 0.75)


def test_write_metrics(tmp_path):
    import json
    path = write_metrics(tmp_path / "sub" / "m.json", top1=0.5, views="1x1")
    assert json.loads(path.read_text()) == {"top1": 0.5, "views": "1x1"}
