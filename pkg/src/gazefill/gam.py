"""Gaze animation: trains the animation generator and the angle encoder.

One update folds both stages together: the plain domain-Y reconstruction and
the synthesis-as-training pass, where the frozen correction path produces a
synthetic camera-staring partner for each sample. Reconstructing both from
the same masked context forces the 2-d angle code to carry the gaze
direction. The synthetic partner is gradient-stopped (training data, not a
differentiable path), and the content encoder stays frozen throughout.
"""

from __future__ import annotations

import torch

from .data_pipeline import Batch, apply_mask, batch_composites
from .gcm import LossWeights, correct_gaze, log_d, log_one_minus_d
from .networks import NetworkBundle
from .pam import mean_l1


def recon_loss_y(y: torch.Tensor, y_rec: torch.Tensor) -> torch.Tensor:
    """Pixel-wise L1 between a domain-Y image and its in-painted version."""
    return mean_l1(y, y_rec)


def recon_loss_synth(y_corr: torch.Tensor,
                     y_hat: torch.Tensor) -> torch.Tensor:
    """Pixel-wise L1 between the synthetic corrected sample and its
    animation-generator reconstruction."""
    return mean_l1(y_corr, y_hat)


def latent_recon_loss(r_input: torch.Tensor, r_recon: torch.Tensor,
                      r_corr: torch.Tensor,
                      r_corr_recon: torch.Tensor) -> torch.Tensor:
    """Angle-code consistency across both reconstructions.

    Arguments are the angle codes of: the input, its reconstruction, the
    synthetic corrected sample, and that sample's reconstruction.
    """
    return mean_l1(r_input, r_recon) + mean_l1(r_corr, r_corr_recon)


def adv_loss_y(real_logits: torch.Tensor,
               fake_logits: torch.Tensor) -> torch.Tensor:
    """Animation-side adversarial objective: ``E[log D(y)] + E[log(1 - D(y_rec))]``."""
    return log_d(real_logits) + log_one_minus_d(fake_logits)


def train_step_gam(batch_y: Batch, bundle: NetworkBundle,
                   weights: LossWeights,
                   opt_g: torch.optim.Optimizer,
                   opt_d: torch.optim.Optimizer,
                   use_correction_critic: bool = True) -> dict[str, float]:
    """One animation-stage update (discriminator, then generator + encoder).

    ``opt_g`` must own both the animation generator and the angle encoder.
    ``use_correction_critic`` adds the correction discriminator's term on the
    synthetic reconstruction (weight 2) to the generator objective.
    """
    g_y, e_r, d_y, d_x = bundle.g_y, bundle.e_r, bundle.d_y, bundle.d_x
    pixels, mask, specs = batch_y.pixels, batch_y.mask, batch_y.specs

    # stage 1: reconstruct the original domain-Y sample
    comp_y = batch_composites(pixels, specs)
    r_y = e_r(comp_y)
    with torch.no_grad():
        c_y = bundle.g_pre.encode(comp_y)
    y_rec = g_y(apply_mask(pixels, mask), c_y, r_y)
    l_recon_y = recon_loss_y(pixels, y_rec)

    # stage 2: reconstruct the gradient-stopped synthetic corrected sample
    with torch.no_grad():
        y_corr = correct_gaze(pixels, mask, specs, bundle)
    comp_corr = batch_composites(y_corr, specs)
    r_corr = e_r(comp_corr)
    with torch.no_grad():
        c_corr = bundle.g_pre.encode(comp_corr)
    y_hat = g_y(apply_mask(y_corr, mask), c_corr, r_corr)
    l_recon_synth = recon_loss_synth(y_corr, y_hat)

    comp_rec = batch_composites(y_rec, specs)
    comp_hat = batch_composites(y_hat, specs)
    l_fp = latent_recon_loss(r_y, e_r(comp_rec), r_corr, e_r(comp_hat))

    # discriminator update on real vs stage-1 reconstruction
    d_y.train()
    n = pixels.shape[0]
    fake_pixels = y_rec.detach()
    logits = d_y(torch.cat([pixels, fake_pixels]),
                 torch.cat([comp_y, batch_composites(fake_pixels, specs)]))
    adv_value = adv_loss_y(logits[:n], logits[n:])
    opt_d.zero_grad()
    (-adv_value).backward()
    opt_d.step()

    # joint generator + angle-encoder update
    d_y.eval()
    gen_adv = log_one_minus_d(d_y(y_rec, comp_rec))
    total = (gen_adv + weights.recon_y * l_recon_y
             + weights.recon_synth * l_recon_synth + weights.latent * l_fp)
    gen_adv_corr = None
    if use_correction_critic:
        d_x_mode = d_x.training
        d_x.eval()
        gen_adv_corr = log_one_minus_d(d_x(y_hat, comp_hat))
        total = total + weights.adv_synth * gen_adv_corr
        d_x.train(d_x_mode)
    opt_g.zero_grad()
    total.backward()
    opt_g.step()
    d_y.train()

    report = {
        "l_y_adv": float(adv_value.detach()),
        "l_y_recon": float(l_recon_y.detach()),
        "l_synth_recon": float(l_recon_synth.detach()),
        "l_fp": float(l_fp.detach()),
        "l_y_gen_adv": float(gen_adv.detach()),
        "l_y_total": float(total.detach()),
    }
    if gen_adv_corr is not None:
        report["l_x_adv_synth"] = float(gen_adv_corr.detach())
    return report
