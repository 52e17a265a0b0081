"""Mirror-learning pretraining of the eye autoencoder.

The autoencoder must reconstruct a composite from itself and from its
horizontal flip. Because a composite is ``[left | right]`` and its flip is
``[flip(right) | flip(left)]``, the two composite terms expand to exactly
four per-eye reconstructions (each eye from itself and from the mirrored
other eye), which drives the bottleneck toward angle invariance. The
encoder is frozen afterwards and serves as the content encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data_pipeline import ImageSample, batch_composites, collate, hflip
from .errors import TrainingDivergedError
from .networks import MirrorAutoencoder


def mean_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """L1 averaged over all elements (keeps loss weights scale-free)."""
    return (a - b).abs().mean()


def mirror_loss(g_pre: MirrorAutoencoder,
                composites: torch.Tensor) -> torch.Tensor:
    """Reconstruction from the composite plus from its mirror image."""
    _, recon = g_pre(composites)
    _, recon_mirror = g_pre(hflip(composites))
    return mean_l1(recon, composites) + mean_l1(recon_mirror, composites)


@dataclass
class PretrainConfig:
    """Pretraining recipe: initial rate 5e-4, held for ``warm_iterations``,
    then decayed linearly to zero by the final iteration (mirroring the
    main-phase schedule)."""

    iterations: int = 10000
    batch_size: int = 8
    lr: float = 5e-4
    warm_iterations: int = 0
    betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0

    def lr_at(self, iteration: int) -> float:
        if iteration >= self.iterations:
            return 0.0
        if iteration < self.warm_iterations:
            return self.lr
        span = self.iterations - self.warm_iterations
        return self.lr * (self.iterations - iteration) / span


def _sample_indices(seed: int, iteration: int, n: int, k: int) -> np.ndarray:
    # pure function of (seed, iteration): resume-safe and worker-independent
    rng = np.random.default_rng([seed, 2, iteration])
    return rng.integers(0, n, size=k)


def pretrain(g_pre: MirrorAutoencoder, train_samples: list[ImageSample],
             cfg: PretrainConfig) -> list[float]:
    """Run Adam on the mirror loss over domain-Y composites.

    Mutates ``g_pre`` in place and returns the per-iteration loss curve.
    Aborts on a non-finite loss.
    """
    if not train_samples:
        raise TrainingDivergedError("pretraining needs a non-empty train set")
    opt = torch.optim.Adam(g_pre.parameters(), lr=cfg.lr, betas=cfg.betas)
    losses: list[float] = []
    g_pre.train()
    for it in range(cfg.iterations):
        for group in opt.param_groups:
            group["lr"] = cfg.lr_at(it)
        idx = _sample_indices(cfg.seed, it, len(train_samples), cfg.batch_size)
        batch = collate([train_samples[i] for i in idx])
        comps = batch_composites(batch.pixels, batch.specs)
        loss = mirror_loss(g_pre, comps)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"mirror loss became non-finite at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


def extract_content(g_pre: MirrorAutoencoder,
                    composite: torch.Tensor) -> torch.Tensor:
    """Content code of a composite with the encoder frozen."""
    with torch.no_grad():
        return g_pre.encode(composite)


def freeze(g_pre: MirrorAutoencoder) -> MirrorAutoencoder:
    """Content encoder stays fixed during the in-painting stages."""
    for p in g_pre.parameters():
        p.requires_grad_(False)
    return g_pre.eval()
