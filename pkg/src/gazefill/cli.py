"""Command-line entry point.

Subcommands: toy-data, preprocess, pretrain, train, correct, animate,
evaluate. Failures print ``error[<category>]: <message>`` on stderr and exit
with a category-specific status; argparse keeps status 2 for usage errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, pam
from .checkpoint import save_checkpoint
from .config import TrainConfig, apply_overrides, load_config
from .data_pipeline import (Domain, ImageSample, collate, generate_toy_dataset,
                            load_dataset, save_dataset, _from_uint8)
from .errors import ConfigError, DataError, GazefillError
from .evaluation import (background_preservation, identity_preservation,
                         latent_stats, write_content_moments_csv,
                         write_latent_scatter_csv)
from .gcm import correct_gaze, correct_sample
from .inference import animate, emit_grid
from .networks import build_bundle
from .training import load_bundle, run_training

_EXIT_CODES = {"config": 3, "data": 4, "shape": 5, "io": 6, "training": 7}


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _build_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {key: getattr(args, key, None) for key in (
        "seed", "resolution", "batch_size", "lr_pam", "lr_main",
        "warm_iterations", "total_iterations", "pam_iterations",
        "checkpoint_every", "sample_every", "out_dir", "data_root")}
    return apply_overrides(cfg, overrides)


def _load_data(root: str, split_file=None):
    if not root:
        raise ConfigError("no dataset directory given (set data_root)")
    result = load_dataset(Path(root),
                          split_file=Path(split_file) if split_file else None)
    return result.samples, result.split


def _load_single_sample(image_path: Path, landmarks_path: Path) -> ImageSample:
    from PIL import Image

    image_path, landmarks_path = Path(image_path), Path(landmarks_path)
    if not image_path.exists():
        raise DataError(f"input image not found: {image_path}")
    if not landmarks_path.exists():
        raise DataError(f"landmark file not found: {landmarks_path}")
    with Image.open(image_path) as im:
        pixels = _from_uint8(np.asarray(im.convert("RGB")))
    sid = image_path.stem
    points = None
    with open(landmarks_path) as fh:
        text = fh.read().strip()
    if text.startswith("["):
        points = np.asarray(json.loads(text), dtype=np.float64)
    else:
        for line in text.splitlines():
            rec = json.loads(line)
            if str(rec.get("id")) == sid:
                points = np.asarray(rec["points"], dtype=np.float64)
                break
    if points is None:
        raise DataError(f"no landmark record for id {sid!r}")
    return ImageSample(pixels=pixels, domain=Domain.Y, landmarks=points,
                       id=sid)


def cmd_toy_data(args) -> int:
    dataset = generate_toy_dataset(args.n_x, args.n_y, args.seed,
                                   image_size=args.size)
    save_dataset(dataset, Path(args.out))
    print(f"wrote {args.n_x}+{args.n_y} toy samples to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    result = load_dataset(Path(args.data))
    boxes = None
    for sample in result.samples.values():
        batch = collate([sample])
        boxes = (batch.specs[0].left.height, batch.specs[0].left.width)
    summary = {
        "samples": len(result.samples),
        "train_x": len(result.split.train_x),
        "train_y": len(result.split.train_y),
        "test_x": len(result.split.test_x),
        "test_y": len(result.split.test_y),
        "skipped_missing_landmarks": result.skipped_missing_landmarks,
        "eye_box_hw": boxes,
    }
    text = json.dumps(summary, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _build_config(args)
    samples, split = _load_data(args.data or cfg.data_root)
    torch.manual_seed(cfg.seed)
    bundle = build_bundle(cfg.arch(), seed=cfg.seed)
    pam_cfg = pam.PretrainConfig(iterations=cfg.pam_iterations,
                                 batch_size=cfg.batch_size, lr=cfg.lr_pam,
                                 seed=cfg.seed)
    losses = pam.pretrain(bundle.g_pre, [samples[i] for i in split.train_y],
                          pam_cfg)
    out = Path(args.out or Path(cfg.out_dir) / "pam.pt")
    save_checkpoint(out, {"g_pre": bundle.g_pre},
                    {"iteration": 0, "resolution": cfg.resolution,
                     "config_digest": cfg.digest(),
                     "power_iterations": cfg.power_iterations})
    curve = out.with_suffix(".losses.jsonl")
    with open(curve, "w") as fh:
        for i, value in enumerate(losses):
            fh.write(json.dumps({"iteration": i + 1, "l_pre": value}) + "\n")
    print(f"pretrained {cfg.pam_iterations} iterations -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args)
    samples, split = _load_data(args.data or cfg.data_root)
    result = run_training(
        cfg, samples, split,
        resume_from=Path(args.resume) if args.resume else None,
        pam_checkpoint=Path(args.pam_checkpoint)
        if args.pam_checkpoint else None)
    print(f"trained to iteration {result.final_iteration}; "
          f"checkpoints in {result.paths.checkpoints}")
    return 0


def cmd_correct(args) -> int:
    sample = _load_single_sample(args.input, args.landmarks)
    bundle, _ = load_bundle(Path(args.checkpoint),
                            expected_resolution=sample.image_size[0])
    corrected = correct_sample(sample, bundle)
    emit_grid([corrected], Path(args.out))
    print(f"wrote {args.out}")
    return 0


def cmd_animate(args) -> int:
    sample = _load_single_sample(args.input, args.landmarks)
    bundle, _ = load_bundle(Path(args.checkpoint),
                            expected_resolution=sample.image_size[0])
    if args.frames < 1:
        raise ConfigError("--frames must be >= 1")
    if args.frames == 1:
        ts = [args.t_min]
    else:
        step = (args.t_max - args.t_min) / (args.frames - 1)
        ts = [args.t_min + k * step for k in range(args.frames)]
    frames = animate(sample, bundle, ts)
    emit_grid(frames, Path(args.out))
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


def _corrected_in_chunks(batch, bundle, chunk: int = 16) -> torch.Tensor:
    pieces = []
    with torch.no_grad():
        for i in range(0, batch.pixels.shape[0], chunk):
            pieces.append(correct_gaze(batch.pixels[i:i + chunk],
                                       batch.mask[i:i + chunk],
                                       batch.specs[i:i + chunk], bundle))
    return torch.cat(pieces)


def cmd_evaluate(args) -> int:
    samples, split = _load_data(args.data, split_file=args.split)
    bundle, meta = load_bundle(Path(args.checkpoint))
    test_y = [samples[i] for i in split.test_y]
    test_x = [samples[i] for i in split.test_x]
    if not test_y or not test_x:
        raise DataError("evaluate needs non-empty test_x and test_y splits")
    resolution = test_y[0].image_size[0]
    if meta.get("resolution") != resolution:
        raise ConfigError(
            f"checkpoint resolution {meta.get('resolution')} does not match "
            f"dataset resolution {resolution}")

    weights_path = Path(args.weights) if args.weights else None
    backend = args.backend
    if backend == "external":
        from .evaluation import ExternalPerceptualDistance

        backend = ExternalPerceptualDistance.load(weights_path) \
            if weights_path else None
        if backend is None:
            raise ConfigError("--backend external requires --weights")

    ckpt_digest = _file_digest(args.checkpoint)
    batch_y = collate(test_y)
    corrected = _corrected_in_chunks(batch_y, bundle)
    background = background_preservation(
        batch_y.pixels, corrected, batch_y.specs, ids=batch_y.ids,
        backend=backend, metadata={"split": "test_y",
                                   "checkpoint": ckpt_digest})

    batch_x = collate(test_x)
    recon_x = _corrected_in_chunks(batch_x, bundle)
    identity = identity_preservation(
        batch_x.pixels, recon_x, batch_x.specs, ids=batch_x.ids,
        backend=backend, metadata={"split": "test_x",
                                   "checkpoint": ckpt_digest})

    stats = latent_stats(bundle, test_x, test_y)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_latent_scatter_csv(stats, out.with_suffix(".latent.csv"))
    write_content_moments_csv(stats, out.with_suffix(".moments.csv"))
    report = {
        "checkpoint": ckpt_digest,
        "background": background.to_dict(),
        "eye_region": identity.to_dict(),
        "latent": {"content_diff_mean": stats.content_diff_mean,
                   "content_diff_var": stats.content_diff_var},
    }
    out.write_text(json.dumps(report, indent=1, sort_keys=True))
    print(json.dumps({"background_msssim": background.msssim_mean,
                      "background_perceptual": background.perceptual_mean,
                      "eye_msssim": identity.msssim_mean,
                      "eye_perceptual": identity.perceptual_mean},
                     indent=1))
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out-dir", dest="out_dir", help="run output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-pam", dest="lr_pam", type=float)
    p.add_argument("--lr-main", dest="lr_main", type=float)
    p.add_argument("--warm-iterations", dest="warm_iterations", type=int)
    p.add_argument("--total-iterations", dest="total_iterations", type=int)
    p.add_argument("--pam-iterations", dest="pam_iterations", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--sample-every", dest="sample_every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gazefill",
        description="Gaze correction and animation by eye-region in-painting")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy-data", help="generate the procedural toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-x", type=int, default=64)
    p.add_argument("--n-y", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_toy_data)

    p = sub.add_parser("preprocess",
                       help="validate a dataset directory and report stats")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the JSON summary here as well")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", help="run mirror pretraining only")
    _add_config_flags(p)
    p.add_argument("--out", help="checkpoint path (default <out_dir>/pam.pt)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="full two-phase training")
    _add_config_flags(p)
    p.add_argument("--resume", help="continue from a training checkpoint")
    p.add_argument("--pam-checkpoint", dest="pam_checkpoint",
                   help="reuse a pretrained autoencoder checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("correct", help="correct one image's gaze")
    p.add_argument("--input", required=True)
    p.add_argument("--landmarks", required=True,
                   help="68-point JSON array or a landmarks.jsonl")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("animate", help="write an interpolation strip")
    p.add_argument("--input", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", type=int, default=7)
    p.add_argument("--t-min", dest="t_min", type=float, default=0.0)
    p.add_argument("--t-max", dest="t_max", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("evaluate", help="run the metric protocol")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="split file (default <data>/split.json)")
    p.add_argument("--backend", choices=("proxy", "external"),
                   default="proxy")
    p.add_argument("--weights", help="external perceptual weights file")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except GazefillError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return _EXIT_CODES.get(exc.category, 1)


if __name__ == "__main__":
    sys.exit(main())
