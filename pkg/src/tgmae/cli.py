"""``tgm`` command line: data generation, training, evaluation and figures.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, synthgen
from .config import RunConfig, load_run_config, write_run_config
from .errors import CheckpointMismatchError, ConfigError, TGMError
from .evaluate import (ProbeConfig, ViewSpec, linear_probe, mask_coverage, multiview_infer, retrieve,
                       write_metrics)
from .masking import ALGORITHMS, dump_mask
from .model import VideoClassifier, load_checkpoint
from .netpbm import write_pgm, write_ppm
from .trainer import augment, build_mask, finetune, load_backbone, pretrain
from .videocore import PatchConfig, PatchTarget, from_cubes, to_cubes, unpatchify

log = logging.getLogger("tgmae")

COMMANDS = ("gen-data", "pretrain", "finetune", "probe", "retrieve", "mask-stats", "visualize")


class UsageError(Exception):
    pass


def _ints(text: str, n: int, name: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"{name} must be {n} comma-separated integers, got {text!r}") from None
    if len(vals) != n:
        raise UsageError(f"{name} must have {n} values, got {text!r}")
    return vals


def _views(text: str) -> ViewSpec:
    t, s = _ints(text.lower().replace("x", ","), 2, "--views")
    try:
        return ViewSpec(t, s)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, argv, run: RunConfig | None = None, **extra) -> Path:
    """Everything needed to repeat the invocation, as ``key = value`` lines."""
    entries = {
        "command": command,
        "argv": " ".join(argv),
        "tgmae_version": __version__,
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "embedder_sha256": synthgen.projection_checksum(),
    }
    entries.update({k: v for k, v in extra.items() if v is not None})
    if run is not None:
        entries.update({f"config.{k}": v for k, v in run.to_entries().items()})
    path = out / f"manifest_{command}.txt"
    path.write_text("".join(f"{k} = {v}\n" for k, v in entries.items()), encoding="utf-8")
    return path


def _run_config(args) -> RunConfig:
    return load_run_config(args.config, args.set)


def _corpus(path) -> synthgen.Corpus:
    if path is None:
        raise UsageError("--data is required")
    return synthgen.load_corpus(path)


def _split(corpus: synthgen.Corpus, test_data, test_fraction: float):
    if test_data:
        return corpus, synthgen.load_corpus(test_data)
    if not 0 < test_fraction < 1:
        raise UsageError("--test-fraction must lie in (0, 1)")
    n_test = max(1, int(round(len(corpus) * test_fraction)))
    idx = np.arange(len(corpus))
    return corpus.subset(idx[:-n_test]), corpus.subset(idx[-n_test:])


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, out: Path) -> int:
    patch = PatchConfig(*_ints(args.patch, 3, "--patch"))
    shape = _ints(args.video_shape, 3, "--video-shape")
    dist = synthgen.SceneDistribution(noise_sigma=args.sigma)
    corpus = synthgen.generate_dataset(out, args.n, args.seed, shape, patch, dist, args.label_by)
    if args.simmaps:
        (out / "simmaps").mkdir(exist_ok=True)
        for i in range(len(corpus)):
            rng = np.random.default_rng([args.seed, i, 7])
            smap = synthgen.compute_similarity_map(corpus.sample(i), corpus.captions[i][0], patch, rng=rng)
            synthgen.write_similarity_map(corpus.simmap_path(i), smap)
    write_manifest(out, "gen-data", args.argv, corpus_hash=corpus.content_hash())
    print(f"videos\t{len(corpus)}\ngrid\t{'x'.join(map(str, corpus.grid))}\nout\t{out}")
    return 0


def cmd_pretrain(args, out: Path) -> int:
    run = _run_config(args)
    corpus = _corpus(args.data)
    result = pretrain(corpus, run, out)
    write_manifest(out, "pretrain", args.argv, run, data=Path(args.data).resolve(),
                   corpus_hash=corpus.content_hash(), checkpoint_sha256=file_sha256(result.checkpoint))
    from .plotting import plot_losses

    plot_losses([result.loss_csv], out / f"loss.{args.fig_format}", ["run"])
    last = result.rows[-1]
    print(f"steps\t{len(result.rows)}\nl_mse\t{last['l_mse']:.6f}\nnce_diagnostic\t{last['nce_diagnostic']:.6f}"
          f"\ncheckpoint\t{result.checkpoint}")
    return 0


def cmd_finetune(args, out: Path) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    run = _run_config(args)
    train, test = _split(_corpus(args.data), args.test_data, args.test_fraction)
    backbone = load_backbone(args.checkpoint, force=args.force)
    result = finetune(backbone, train, run, out, max(train.num_classes, int(test.labels.max()) + 1))
    views = _views(args.views)
    model = result.model.eval()
    clip_shape = backbone.cfg.video_shape
    with torch.no_grad():
        preds = [int(multiview_infer(model, v, views, clip_shape, test.patch).argmax())
                 for v in test.videos]
    top1 = float(np.mean(np.asarray(preds) == test.labels))
    metrics = write_metrics(out / "metrics.json", top1=top1, train_top1=result.train_accuracy,
                            views=f"{views.temporal_views}x{views.spatial_views}", seed=run.train.seed,
                            checkpoint=file_sha256(args.checkpoint),
                            classifier=file_sha256(result.checkpoint))
    write_manifest(out, "finetune", args.argv, run, checkpoint_sha256=file_sha256(args.checkpoint))
    print(f"top1\t{top1:.4f}\ntrain_top1\t{result.train_accuracy:.4f}\nmetrics\t{metrics}")
    return 0


def cmd_probe(args, out: Path) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    run = _run_config(args)
    train, test = _split(_corpus(args.data), args.test_data, args.test_fraction)
    model = load_backbone(args.checkpoint, force=args.force)
    cfg = ProbeConfig(epochs=args.probe_epochs, seed=run.train.seed)
    result = linear_probe(model, train, test, cfg)
    metrics = write_metrics(out / "metrics.json", top1=result.top1, train_top1=result.train_top1,
                            views="1x1", seed=run.train.seed, checkpoint=file_sha256(args.checkpoint),
                            encoder_sha256=result.checksum)
    write_manifest(out, "probe", args.argv, run, checkpoint_sha256=file_sha256(args.checkpoint))
    print(f"top1\t{result.top1:.4f}\ntrain_top1\t{result.train_top1:.4f}\nmetrics\t{metrics}")
    return 0


def cmd_retrieve(args, out: Path) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    corpus = _corpus(args.data)
    model = load_backbone(args.checkpoint, force=args.force)
    result = retrieve(model, corpus, use_projection=not args.raw_features)
    np.save(out / "similarity.npy", result.sims)
    metrics = write_metrics(out / "metrics.json", r_at_1=result.r_at[1], r_at_5=result.r_at[5],
                            t2v_r_at_1=result.r_at_t2v[1], t2v_r_at_5=result.r_at_t2v[5],
                            ties=result.ties, views="1x1", seed=args.seed,
                            checkpoint=file_sha256(args.checkpoint), **result.meta)
    write_manifest(out, "retrieve", args.argv, checkpoint_sha256=file_sha256(args.checkpoint))
    print("direction\tr_at_1\tr_at_5")
    print(f"v2t\t{result.r_at[1]:.4f}\t{result.r_at[5]:.4f}")
    print(f"t2v\t{result.r_at_t2v[1]:.4f}\t{result.r_at_t2v[5]:.4f}")
    print(f"metrics\t{metrics}")
    return 0


def cmd_mask_stats(args, out: Path) -> int:
    algorithms = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    unknown = [a for a in algorithms if a not in ALGORITHMS]
    if unknown or not algorithms:
        raise UsageError(f"unknown algorithm(s) {unknown}; choose from {', '.join(ALGORITHMS)}")
    if args.data:
        corpus = synthgen.load_corpus(args.data)
        if corpus.gt_masks is None:
            raise ConfigError(f"{args.data} has no gt_masks.npy; generate it with tgm gen-data")
    else:
        corpus = synthgen.generate_dataset(out / "corpus", args.n, args.seed)
    cov = mask_coverage(corpus, algorithms, args.gamma, args.seed)
    lines = ["algorithm\tmean_coverage\tstd\tn"]
    lines += [f"{a}\t{cov[a].mean():.6f}\t{cov[a].std():.6f}\t{len(cov[a])}" for a in algorithms]
    table = "\n".join(lines) + "\n"
    (out / "coverage.tsv").write_text(table, encoding="utf-8")
    from .plotting import plot_coverage

    plot_coverage({a: float(cov[a].mean()) for a in algorithms}, out / f"coverage.{args.fig_format}",
                  f"saliency coverage, gamma={args.gamma}")
    write_manifest(out, "mask-stats", args.argv, corpus_hash=corpus.content_hash())
    sys.stdout.write(table)
    return 0


def cmd_visualize(args, out: Path) -> int:
    from .plotting import heatmap_to_image, plot_losses, plot_montage

    if not args.checkpoint and not args.loss_csv:
        raise UsageError("give --checkpoint (with --data) and/or --loss-csv")
    run = _run_config(args)
    written = []
    if args.checkpoint:
        corpus = _corpus(args.data)
        if not 0 <= args.video < len(corpus):
            raise UsageError(f"--video must lie in [0, {len(corpus)})")
        model = load_backbone(args.checkpoint, force=args.force).eval()
        i = args.video
        rng = np.random.default_rng([run.train.seed, i])
        video = corpus.videos[i]
        om = corpus.object_masks[i] if corpus.object_masks is not None else None
        caption = synthgen.sample_caption(corpus.captions[i], rng, run.train.num_captions)
        mask = build_mask(corpus, i, video, om, run.mask, run.train, caption, rng)
        written += dump_mask(mask, out / "masks", i)

        grid, patch = corpus.grid, corpus.patch
        cubes = to_cubes(torch.from_numpy(video)[None], patch)
        flat = mask.reshape(-1)
        vis = torch.from_numpy(np.flatnonzero(~flat))[None]
        with torch.no_grad():
            pred, _ = model(cubes, vis)
        pred = pred[0]
        if run.train.norm_targets:
            from .videocore import standardize_patches

            _, mean, std = standardize_patches(cubes[0])
            recon = unpatchify(PatchTarget(pred, "standardized", mean, std), grid, patch).data
        else:
            recon = unpatchify(PatchTarget(pred), grid, patch).data
        # visible cubes show the input, masked cubes the prediction
        keep = torch.from_numpy(~flat)[:, None]
        shown = from_cubes(torch.where(keep, cubes[0], torch.from_numpy(
            np.ascontiguousarray(to_cubes(torch.from_numpy(recon), patch).numpy()))), grid, patch).numpy()
        (out / "recon").mkdir(exist_ok=True)
        for f in range(len(shown)):
            p = out / "recon" / f"recon_{i}_{f}.ppm"
            write_ppm(p, shown[f])
            written.append(p)

        layer = args.layer if args.layer >= 0 else len(model.blocks) + args.layer
        row, _ = model.attention_map(cubes, layer, args.head)
        row = row.numpy()
        scale = patch.h
        heat = heatmap_to_image(row[grid[0] // 2], scale)
        p = out / f"attention_{i}.pgm"
        write_pgm(p, heat)
        written.append(p)

        masked_frames = np.repeat(np.repeat(mask, patch.t, 0), patch.h, 1).repeat(patch.w, 2)
        written.append(plot_montage({
            "input": video, "mask": masked_frames.astype(np.float32),
            "reconstruction": shown,
            "attention": np.stack([heatmap_to_image(r, scale) for r in row]),
        }, out / f"panel_{i}.{args.fig_format}"))
    if args.loss_csv:
        path, _ = plot_losses(args.loss_csv, out / f"losses.{args.fig_format}", args.label or None)
        written.append(path)
    write_manifest(out, "visualize", args.argv, run,
                   checkpoint_sha256=file_sha256(args.checkpoint) if args.checkpoint else None)
    for p in written:
        print(p)
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "probe": cmd_probe,
    "retrieve": cmd_retrieve, "mask-stats": cmd_mask_stats, "visualize": cmd_visualize,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration entry (repeatable)")
    common.add_argument("--out-dir", default=os.environ.get("TGM_OUT_DIR"),
                        help="output directory (default: $TGM_OUT_DIR)")
    common.add_argument("--fig-format", choices=("png", "svg"), default="png")
    common.add_argument("--force", action="store_true", help="load checkpoints despite manifest mismatches")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tgm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic moving-shapes corpus")
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--video-shape", default="8,32,32", help="T,H,W")
    p.add_argument("--patch", default="2,8,8", help="t,h,w")
    p.add_argument("--sigma", type=float, default=0.1, help="noise of the toy patch embedder")
    p.add_argument("--label-by", choices=synthgen.LABEL_KEYS, default="direction")
    p.add_argument("--simmaps", action="store_true", help="also export similarity maps")

    p = sub.add_parser("pretrain", parents=[common], help="masked autoencoder pretraining")
    p.add_argument("--data")

    for name, text in (("finetune", "supervised finetuning"), ("probe", "linear probe on frozen features")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data")
        p.add_argument("--checkpoint")
        p.add_argument("--test-data", help="held-out corpus (default: tail of --data)")
        p.add_argument("--test-fraction", type=float, default=0.2)
        if name == "finetune":
            p.add_argument("--views", default="1x1", help="temporal x spatial test views, e.g. 2x3")
        else:
            p.add_argument("--probe-epochs", type=int, default=100)

    p = sub.add_parser("retrieve", parents=[common], help="zero-shot video-text retrieval")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--raw-features", action="store_true", help="skip the projection head")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("mask-stats", parents=[common], help="saliency coverage per masking algorithm")
    p.add_argument("--data", help="corpus with ground-truth masks (default: generate one)")
    p.add_argument("--algorithms", default="tube,random,motion,text-top,text-bottom")
    p.add_argument("--gamma", type=float, default=0.75)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("visualize", parents=[common], help="mask, reconstruction, attention and loss figures")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--video", type=int, default=0)
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--loss-csv", action="append", default=[])
    p.add_argument("--label", action="append", default=[], help="legend label per --loss-csv")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.argv = ["tgm", *argv]
    if not args.out_dir:
        parser.print_usage(sys.stderr)
        print("tgm: error: --out-dir is required (or set TGM_OUT_DIR)", file=sys.stderr)
        return 2
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](args, out)
    except (UsageError, ConfigError) as exc:
        print(f"tgm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TGMError, ValueError, OSError, RuntimeError, CheckpointMismatchError) as exc:
        print(f"tgm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
