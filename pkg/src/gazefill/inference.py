"""User-facing correction and animation over frozen weights.

Animation decodes a sweep of angle codes linearly interpolated (or
extrapolated, for t outside [0, 1]) between the input's code and the code of
its corrected version. The content code is taken once from the original
input, so identity is held fixed across all frames, and every frame is
composited over the input: the background never changes, bit for bit.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data_pipeline import (ImageSample, apply_mask, batch_composites,
                            collate, composite_back)
from .gcm import correct_gaze
from .networks import NetworkBundle


def interpolate_angle(r_a: torch.Tensor, r_b: torch.Tensor,
                      t: float) -> torch.Tensor:
    """Affine blend ``(1 - t) * r_a + t * r_b``; t outside [0, 1] extrapolates."""
    return (1.0 - t) * r_a + t * r_b


def default_sweep(n_frames: int = 7) -> list[float]:
    """Evenly spaced t values from 0 to 1 inclusive."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if n_frames == 1:
        return [0.0]
    return [k / (n_frames - 1) for k in range(n_frames)]


def animate(sample: ImageSample, bundle: NetworkBundle,
            t_values: list[float]) -> list[torch.Tensor]:
    """Decode one composited frame per t value.

    ``t = 0`` targets the input's own gaze, ``t = 1`` the corrected gaze.
    """
    if not t_values:
        raise ValueError("t_values must not be empty")
    batch = collate([sample])
    with torch.no_grad():
        comp = batch_composites(batch.pixels, batch.specs)
        r_in = bundle.e_r(comp)
        content = bundle.g_pre.encode(comp)
        corrected = correct_gaze(batch.pixels, batch.mask, batch.specs,
                                 bundle)
        r_corr = bundle.e_r(batch_composites(corrected, batch.specs))
        masked = apply_mask(batch.pixels, batch.mask)
        frames = []
        for t in t_values:
            angle = interpolate_angle(r_in, r_corr, t)
            generated = bundle.g_y(masked, content, angle)
            frames.append(composite_back(generated, batch.pixels,
                                         batch.mask)[0])
    return frames


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    arr = ((image.detach().clamp(-1, 1) + 1.0) * 127.5).round().byte().numpy()
    return np.transpose(arr, (1, 2, 0))


def emit_grid(frames: list[torch.Tensor], path: Path) -> Path:
    """Write frames as one horizontal PNG strip (deterministic bytes)."""
    if not frames:
        raise ValueError("no frames to write")
    strip = np.concatenate([to_uint8(f) for f in frames], axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(strip).save(path, format="PNG")
    return path
