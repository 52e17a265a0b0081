"""Gaze correction: trains the correction generator on domain X.

Sign convention for the adversarial values: ``adv_loss_x`` is the literal
objective (a sum of log-probabilities, always <= 0 up to the epsilon guard).
The discriminator maximizes it, so its optimizer minimizes the negation; the
generator minimizes it directly (no non-saturating trick).

Discriminator power iteration runs once per discriminator update: the
real/fake inputs are batched into a single training-mode forward, and
generator-side passes through a discriminator run in eval mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .data_pipeline import (Batch, apply_mask, batch_composites,
                            collate, composite_back)
from .networks import NetworkBundle
from .pam import mean_l1

LOG_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """The five loss coefficients; all default to 1."""

    recon_x: float = 1.0       # weight 1: correction reconstruction
    adv_synth: float = 1.0     # weight 2: correction-adversarial term on y_hat
    recon_y: float = 1.0       # weight 3: animation reconstruction
    recon_synth: float = 1.0   # weight 4: synthetic-pair reconstruction
    latent: float = 1.0        # weight 5: angle-code reconstruction

    def validate(self) -> None:
        for name in ("recon_x", "adv_synth", "recon_y", "recon_synth",
                     "latent"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def log_d(logits: torch.Tensor) -> torch.Tensor:
    """Mean log D with an epsilon guard against log(0)."""
    return torch.log(torch.sigmoid(logits).clamp_min(LOG_EPS)).mean()


def log_one_minus_d(logits: torch.Tensor) -> torch.Tensor:
    return torch.log((1.0 - torch.sigmoid(logits)).clamp_min(LOG_EPS)).mean()


def recon_loss_x(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    """Pixel-wise L1 between a domain-X image and its in-painted version."""
    return mean_l1(x, x_rec)


def adv_loss_x(real_logits: torch.Tensor, fake_logits: torch.Tensor,
               synth_logits: torch.Tensor | None = None) -> torch.Tensor:
    """Correction-side adversarial objective.

    ``E[log D(x)] + E[log(1 - D(x_rec))]`` plus, when the animation stage is
    co-training, ``E[log(1 - D(y_hat))]`` for its synthetic reconstruction.
    """
    value = log_d(real_logits) + log_one_minus_d(fake_logits)
    if synth_logits is not None:
        value = value + log_one_minus_d(synth_logits)
    return value


def correct_gaze(pixels: torch.Tensor, mask: torch.Tensor,
                 specs, bundle: NetworkBundle) -> torch.Tensor:
    """In-paint camera-staring eyes and composite over the input.

    Pixels outside the mask are returned bit-exactly (``torch.where``).
    """
    masked = apply_mask(pixels, mask)
    content = bundle.g_pre.encode(batch_composites(pixels, specs))
    generated = bundle.g_x(masked, content)
    return composite_back(generated, pixels, mask)


def correct_sample(sample, bundle: NetworkBundle) -> torch.Tensor:
    """Single-image convenience wrapper around :func:`correct_gaze`."""
    batch = collate([sample])
    with torch.no_grad():
        out = correct_gaze(batch.pixels, batch.mask, batch.specs, bundle)
    return out[0]


def synthesize_corrected(batch_y: Batch, bundle: NetworkBundle):
    """Build the synthetic corrected batch and its animation reconstruction.

    Everything is gradient-stopped: the corrected samples act as data, not
    as a differentiable path.
    """
    with torch.no_grad():
        y_corr = correct_gaze(batch_y.pixels, batch_y.mask, batch_y.specs,
                              bundle)
        comp_corr = batch_composites(y_corr, batch_y.specs)
        r_corr = bundle.e_r(comp_corr)
        c_corr = bundle.g_pre.encode(comp_corr)
        y_hat = bundle.g_y(apply_mask(y_corr, batch_y.mask), c_corr, r_corr)
    return y_corr, y_hat


def train_step_gcm(batch_x: Batch, batch_y: Batch | None,
                   bundle: NetworkBundle, weights: LossWeights,
                   opt_g: torch.optim.Optimizer, opt_d: torch.optim.Optimizer,
                   ) -> dict[str, float]:
    """One correction-stage update: discriminator first, then the generator.

    ``batch_y`` feeds the synthetic third adversarial term; pass ``None``
    to train the correction stage standalone (the term is then omitted).
    """
    g_x, d_x = bundle.g_x, bundle.d_x
    pixels, mask, specs = batch_x.pixels, batch_x.mask, batch_x.specs

    masked = apply_mask(pixels, mask)
    comp_real = batch_composites(pixels, specs)
    with torch.no_grad():
        content = bundle.g_pre.encode(comp_real)
    x_rec = g_x(masked, content)

    fake_pixels = x_rec.detach()
    comp_fake = batch_composites(fake_pixels, specs)
    if batch_y is not None:
        _, y_hat = synthesize_corrected(batch_y, bundle)
        comp_hat = batch_composites(y_hat, batch_y.specs)
        faces = torch.cat([pixels, fake_pixels, y_hat])
        comps = torch.cat([comp_real, comp_fake, comp_hat])
    else:
        faces = torch.cat([pixels, fake_pixels])
        comps = torch.cat([comp_real, comp_fake])

    d_x.train()
    logits = d_x(faces, comps)
    n = pixels.shape[0]
    real_logits, fake_logits = logits[:n], logits[n:n + n]
    synth_logits = logits[2 * n:] if batch_y is not None else None
    adv_value = adv_loss_x(real_logits, fake_logits, synth_logits)
    opt_d.zero_grad()
    (-adv_value).backward()
    opt_d.step()

    d_x.eval()
    recon = recon_loss_x(pixels, x_rec)
    gen_adv = log_one_minus_d(d_x(x_rec, batch_composites(x_rec, specs)))
    total = gen_adv + weights.recon_x * recon
    opt_g.zero_grad()
    total.backward()
    opt_g.step()
    d_x.train()

    return {
        "l_x_adv": float(adv_value.detach()),
        "l_x_recon": float(recon.detach()),
        "l_x_gen_adv": float(gen_adv.detach()),
        "l_x_total": float(total.detach()),
    }
