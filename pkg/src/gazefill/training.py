"""The two-phase training loop: pretraining, then joint adversarial training.

Phase 1 pretrains the mirror autoencoder on domain Y and freezes its encoder.
Phase 2 alternates one correction step and one animation step per iteration
on fresh batches. Batch composition is a pure function of (seed, iteration),
so a run resumed from a checkpoint continues bit-exactly.

Training state is exactly what a checkpoint holds: the iteration counter,
every network's parameters and buffers, and the Adam moments; restoring it
reproduces the following steps bit-for-bit on the same platform.

Loss rows go to ``loss_log.jsonl`` (one JSON object per iteration, no wall
times, so two seeded runs produce byte-identical logs); timings go to a
separate file. Checkpoints are atomic and keep the optimizer state; when a
loss turns non-finite the run aborts and the last periodic checkpoint is
left in place.
"""

from __future__ import annotations

import json
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import pam
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig, lr_schedule
from .data_pipeline import DatasetSplit, ImageSample, collate
from .errors import ConfigError, TrainingDivergedError
from .gam import train_step_gam
from .gcm import correct_gaze, train_step_gcm
from .inference import emit_grid
from .networks import NetworkBundle, build_bundle

# batch-sampling stream tags (tags 0/1 belong to the toy-data generator,
# tag 2 to pretraining)
_STREAM_GCM_X = 3
_STREAM_GCM_Y = 4
_STREAM_GAM_Y = 5


@dataclass
class OptimizerSet:
    g_x: torch.optim.Optimizer
    d_x: torch.optim.Optimizer
    g_y: torch.optim.Optimizer  # owns the animation generator + angle encoder
    d_y: torch.optim.Optimizer

    def named(self) -> dict[str, torch.optim.Optimizer]:
        return {"g_x": self.g_x, "d_x": self.d_x,
                "g_y": self.g_y, "d_y": self.d_y}

    def set_lr(self, lr: float) -> None:
        for opt in self.named().values():
            for group in opt.param_groups:
                group["lr"] = lr


@dataclass
class RunPaths:
    out_dir: Path

    @property
    def loss_log(self) -> Path:
        return self.out_dir / "loss_log.jsonl"

    @property
    def timing_log(self) -> Path:
        return self.out_dir / "timings.jsonl"

    @property
    def checkpoints(self) -> Path:
        return self.out_dir / "checkpoints"

    @property
    def samples(self) -> Path:
        return self.out_dir / "samples"

    @property
    def pam_checkpoint(self) -> Path:
        return self.checkpoints / "pam.pt"

    @property
    def latest_checkpoint(self) -> Path:
        return self.checkpoints / "latest.pt"

    def iter_checkpoint(self, iteration: int) -> Path:
        return self.checkpoints / f"iter_{iteration:06d}.pt"


@dataclass
class RunResult:
    paths: RunPaths
    bundle: NetworkBundle
    final_iteration: int


def build_optimizers(bundle: NetworkBundle, cfg: TrainConfig) -> OptimizerSet:
    betas = (cfg.beta1, cfg.beta2)
    return OptimizerSet(
        g_x=torch.optim.Adam(bundle.g_x.parameters(), lr=cfg.lr_main,
                             betas=betas),
        d_x=torch.optim.Adam(bundle.d_x.parameters(), lr=cfg.lr_main,
                             betas=betas),
        g_y=torch.optim.Adam(list(bundle.g_y.parameters())
                             + list(bundle.e_r.parameters()),
                             lr=cfg.lr_main, betas=betas),
        d_y=torch.optim.Adam(bundle.d_y.parameters(), lr=cfg.lr_main,
                             betas=betas),
    )


def sample_batch(samples: list[ImageSample], seed: int, iteration: int,
                 stream: int, k: int) -> list[ImageSample]:
    """Reproducible with-replacement batch choice keyed by iteration."""
    rng = np.random.default_rng([seed, stream, iteration])
    return [samples[i] for i in rng.integers(0, len(samples), size=k)]


def _checkpoint_metadata(cfg: TrainConfig, iteration: int) -> dict:
    return {"iteration": iteration, "resolution": cfg.resolution,
            "config_digest": cfg.digest(),
            "power_iterations": cfg.power_iterations}


def save_train_checkpoint(path: Path, bundle: NetworkBundle,
                          opts: OptimizerSet | None, cfg: TrainConfig,
                          iteration: int) -> None:
    save_checkpoint(path, bundle.named_nets(),
                    _checkpoint_metadata(cfg, iteration),
                    optimizers=opts.named() if opts else None)


def load_bundle(checkpoint: Path | Checkpoint,
                expected_resolution: int | None = None) -> tuple[NetworkBundle, dict]:
    """Rebuild a bundle from a checkpoint at its stored resolution."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) \
        else load_checkpoint(checkpoint)
    meta = ckpt.metadata
    if expected_resolution is not None \
            and meta.get("resolution") != expected_resolution:
        raise ConfigError(
            f"checkpoint resolution {meta.get('resolution')} does not match "
            f"requested resolution {expected_resolution}")
    from .networks import ArchitectureConfig

    arch = ArchitectureConfig(
        resolution=int(meta["resolution"]),
        power_iterations=int(meta.get("power_iterations", 1)))
    bundle = build_bundle(arch, seed=0)
    for name, net in bundle.named_nets().items():
        net.load_state_dict(ckpt.net_state(name))
    pam.freeze(bundle.g_pre)
    return bundle, meta


def _probe_samples(samples: dict[str, ImageSample],
                   split: DatasetSplit) -> list[ImageSample]:
    ids = (split.test_y or split.train_y)[:4]
    return [samples[i] for i in ids]


def run_training(cfg: TrainConfig, samples: dict[str, ImageSample],
                 split: DatasetSplit,
                 resume_from: Path | None = None,
                 pam_checkpoint: Path | None = None) -> RunResult:
    """Run both phases and write logs, checkpoints, and sample grids."""
    cfg.validate()
    paths = RunPaths(Path(cfg.out_dir))
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    paths.samples.mkdir(parents=True, exist_ok=True)

    train_x = [samples[i] for i in split.train_x]
    train_y = [samples[i] for i in split.train_y]
    if not train_x or not train_y:
        raise ConfigError("training needs non-empty train_x and train_y")

    torch.manual_seed(cfg.seed)
    bundle = build_bundle(cfg.arch(), seed=cfg.seed)
    opts = build_optimizers(bundle, cfg)
    start_iteration = 0

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.metadata.get("config_digest") != cfg.digest():
            raise ConfigError(
                "resume checkpoint was written under a different config")
        for name, net in bundle.named_nets().items():
            net.load_state_dict(ckpt.net_state(name))
        for name, opt in opts.named().items():
            opt.load_state_dict(ckpt.optimizer_state(name))
        pam.freeze(bundle.g_pre)
        start_iteration = int(ckpt.metadata["iteration"])
    else:
        # phase 1: mirror pretraining (or adopt an existing autoencoder)
        if pam_checkpoint is not None:
            pam_ckpt = load_checkpoint(pam_checkpoint)
            bundle.g_pre.load_state_dict(pam_ckpt.net_state("g_pre"))
        else:
            pam_cfg = pam.PretrainConfig(iterations=cfg.pam_iterations,
                                         batch_size=cfg.batch_size,
                                         lr=cfg.lr_pam, seed=cfg.seed)
            pam.pretrain(bundle.g_pre, train_y, pam_cfg)
        pam.freeze(bundle.g_pre)
        save_checkpoint(paths.pam_checkpoint, {"g_pre": bundle.g_pre},
                        _checkpoint_metadata(cfg, 0))

    probe = _probe_samples(samples, split)
    log_mode = "a" if start_iteration else "w"
    with open(paths.loss_log, log_mode) as log_fh, \
            open(paths.timing_log, log_mode) as time_fh:
        for it in range(start_iteration, cfg.total_iterations):
            t0 = time.perf_counter()
            opts.set_lr(lr_schedule(it, cfg))

            batch_x = collate(sample_batch(train_x, cfg.seed, it,
                                           _STREAM_GCM_X, cfg.batch_size))
            batch_y = collate(sample_batch(train_y, cfg.seed, it,
                                           _STREAM_GCM_Y, cfg.batch_size))
            report = train_step_gcm(batch_x, batch_y, bundle, cfg.weights,
                                    opts.g_x, opts.d_x)
            batch_y2 = collate(sample_batch(train_y, cfg.seed, it,
                                            _STREAM_GAM_Y, cfg.batch_size))
            report.update(train_step_gam(batch_y2, bundle, cfg.weights,
                                         opts.g_y, opts.d_y))

            iteration = it + 1
            if not all(np.isfinite(v) for v in report.values()):
                raise TrainingDivergedError(
                    f"non-finite loss at iteration {iteration}: {report}; "
                    f"last good checkpoint kept in {paths.checkpoints}")

            row = {"iteration": iteration,
                   "lr": lr_schedule(it, cfg), **report}
            log_fh.write(json.dumps(row, sort_keys=True) + "\n")
            time_fh.write(json.dumps(
                {"iteration": iteration,
                 "seconds": time.perf_counter() - t0}) + "\n")

            if iteration % cfg.checkpoint_every == 0 \
                    or iteration == cfg.total_iterations:
                save_train_checkpoint(paths.iter_checkpoint(iteration),
                                      bundle, opts, cfg, iteration)
                shutil.copyfile(paths.iter_checkpoint(iteration),
                                paths.latest_checkpoint)
            if probe and (iteration % cfg.sample_every == 0
                          or iteration == cfg.total_iterations):
                batch = collate(probe)
                with torch.no_grad():
                    corrected = correct_gaze(batch.pixels, batch.mask,
                                             batch.specs, bundle)
                emit_grid(list(corrected),
                          paths.samples / f"iter_{iteration:06d}.png")

    final_iteration = max(start_iteration, cfg.total_iterations)
    if cfg.total_iterations == 0 and not paths.latest_checkpoint.exists():
        save_train_checkpoint(paths.latest_checkpoint, bundle, opts, cfg, 0)
    return RunResult(paths=paths, bundle=bundle,
                     final_iteration=final_iteration)
