"""Image-quality metrics and the evaluation protocol.

Two scores: multi-scale structural similarity and a perceptual distance.
Images are mapped to [0, 1] before either metric (dynamic range 1). The
perceptual backend is pluggable: the default is a deterministic multi-scale
gradient-feature proxy built in; an LPIPS-like external backend can be
loaded from a weights file. Reports always name the backend used.

On images too small for the full five-scale pyramid, the scale count is
reduced to what the size supports and the remaining weights are
renormalized; at the full five scales the standard weights are used as-is.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data_pipeline import (ImageSample, apply_mask, batch_composites,
                            collate, MaskSpec)
from .errors import MissingWeightsError, ShapeMismatchError
from .gcm import correct_gaze
from .networks import NetworkBundle

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _to_unit(image: torch.Tensor, input_range: str) -> torch.Tensor:
    if input_range == "unit":
        return image
    if input_range == "signed":
        return (image + 1.0) / 2.0
    raise ValueError(f"unknown input_range {input_range!r}")


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def _blur(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    kernel = window.expand(c, 1, *window.shape)
    return F.conv2d(x, kernel, groups=c)


def _ssim_and_cs(a: torch.Tensor, b: torch.Tensor, window: torch.Tensor,
                 k1: float, k2: float) -> tuple[torch.Tensor, torch.Tensor]:
    c1, c2 = k1 ** 2, k2 ** 2  # dynamic range is 1 after unit mapping
    mu_a = _blur(a, window)
    mu_b = _blur(b, window)
    var_a = _blur(a * a, window) - mu_a * mu_a
    var_b = _blur(b * b, window) - mu_b * mu_b
    cov = _blur(a * b, window) - mu_a * mu_b
    luminance = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    return (luminance * cs).mean(), cs.mean()


def _halve(x: torch.Tensor) -> torch.Tensor:
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    return F.avg_pool2d(x[..., :h, :w], kernel_size=2)


def msssim_scales(image_size: tuple[int, int], window_size: int = SSIM_WINDOW,
                  max_scales: int = len(MS_SSIM_WEIGHTS)) -> int:
    """Number of dyadic scales the image supports (window must fit)."""
    n = 0
    s = min(image_size)
    while n < max_scales and s >= window_size:
        n += 1
        s //= 2
    if n == 0:
        raise ShapeMismatchError(
            f"image {image_size} smaller than the {window_size}px window")
    return n


def msssim(a: torch.Tensor, b: torch.Tensor, *, input_range: str = "signed",
           window_size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
           k1: float = SSIM_K1, k2: float = SSIM_K2) -> float:
    """Multi-scale structural similarity of one image pair.

    Standard five-scale formulation: per-scale contrast-structure means are
    combined with the luminance term at the coarsest scale, each raised to
    its pinned weight (negative means are clamped to zero before the power).
    """
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    x = _to_unit(a, input_range).unsqueeze(0).double()
    y = _to_unit(b, input_range).unsqueeze(0).double()
    n_scales = msssim_scales(tuple(x.shape[-2:]), window_size)
    if n_scales == len(MS_SSIM_WEIGHTS):
        weights = list(MS_SSIM_WEIGHTS)
    else:
        partial = MS_SSIM_WEIGHTS[:n_scales]
        weights = [w / sum(partial) for w in partial]
    window = _gaussian_window(window_size, sigma, x.dtype, x.device)
    score = torch.ones((), dtype=x.dtype)
    for level in range(n_scales):
        ssim_mean, cs_mean = _ssim_and_cs(x, y, window, k1, k2)
        if level < n_scales - 1:
            score = score * cs_mean.clamp_min(0.0) ** weights[level]
            x, y = _halve(x), _halve(y)
        else:
            score = score * ssim_mean.clamp_min(0.0) ** weights[level]
    return float(score)


class GradientFeatureDistance:
    """Built-in perceptual proxy: squared differences of multi-scale
    finite-difference gradient features plus a coarse low-pass term.

    Zero exactly iff the images are identical; symmetric; nonnegative.
    """

    name = "proxy"

    def __init__(self, levels: int = 3):
        self.levels = levels

    def __call__(self, a: torch.Tensor, b: torch.Tensor,
                 input_range: str = "signed") -> float:
        if a.shape != b.shape:
            raise ShapeMismatchError(f"{tuple(a.shape)} vs {tuple(b.shape)}")
        x = _to_unit(a, input_range).double()
        y = _to_unit(b, input_range).double()
        terms = []
        for level in range(self.levels):
            gxa = x[..., :, 1:] - x[..., :, :-1]
            gxb = y[..., :, 1:] - y[..., :, :-1]
            gya = x[..., 1:, :] - x[..., :-1, :]
            gyb = y[..., 1:, :] - y[..., :-1, :]
            terms.append(((gxa - gxb) ** 2).mean()
                         + ((gya - gyb) ** 2).mean())
            if level < self.levels - 1 and min(x.shape[-2:]) >= 4:
                x, y = _halve(x), _halve(y)
        terms.append(((x - y) ** 2).mean())
        return float(sum(terms) / len(terms))


PERCEPTUAL_FORMAT = "gazefill-perceptual-v1"


class ExternalPerceptualDistance:
    """LPIPS-style distance over an ingested feature network.

    The weights file is a torch archive holding ``format``, a list of conv
    kernels (applied stride 2 with ReLU), and one nonnegative per-channel
    weight vector per layer used to score unit-normalized feature
    differences.
    """

    name = "external"

    def __init__(self, conv_weights: list[torch.Tensor],
                 layer_weights: list[torch.Tensor]):
        if len(conv_weights) != len(layer_weights):
            raise MissingWeightsError("conv/layer weight count mismatch")
        self.conv_weights = [w.double() for w in conv_weights]
        self.layer_weights = [w.double() for w in layer_weights]

    @classmethod
    def load(cls, path: Path) -> "ExternalPerceptualDistance":
        path = Path(path)
        if not path.exists():
            raise MissingWeightsError(
                f"perceptual weights file not found: {path}")
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if payload.get("format") != PERCEPTUAL_FORMAT:
            raise MissingWeightsError(
                f"{path}: not a {PERCEPTUAL_FORMAT} archive")
        return cls(payload["conv_weights"], payload["layer_weights"])

    def save(self, path: Path) -> None:
        torch.save({"format": PERCEPTUAL_FORMAT,
                    "conv_weights": self.conv_weights,
                    "layer_weights": self.layer_weights}, path)

    def _features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for w in self.conv_weights:
            x = F.relu(F.conv2d(x, w, stride=2, padding=w.shape[-1] // 2))
            feats.append(x)
        return feats

    def __call__(self, a: torch.Tensor, b: torch.Tensor,
                 input_range: str = "signed") -> float:
        x = _to_unit(a, input_range).unsqueeze(0).double()
        y = _to_unit(b, input_range).unsqueeze(0).double()
        total = 0.0
        for fa, fb, w in zip(self._features(x), self._features(y),
                             self.layer_weights):
            na = fa / torch.sqrt((fa * fa).sum(1, keepdim=True) + 1e-10)
            nb = fb / torch.sqrt((fb * fb).sum(1, keepdim=True) + 1e-10)
            diff = (na - nb) ** 2
            total += float((diff * w.view(1, -1, 1, 1)).sum(1).mean())
        return total / len(self.conv_weights)


def get_backend(backend, weights_path: Path | None = None) -> Callable:
    """Resolve a backend name ('proxy' / 'external') or pass through a callable."""
    if callable(backend):
        return backend
    if backend == "proxy":
        return GradientFeatureDistance()
    if backend == "external":
        if weights_path is None:
            raise MissingWeightsError(
                "external backend requested without a weights file")
        return ExternalPerceptualDistance.load(weights_path)
    raise MissingWeightsError(f"unknown perceptual backend {backend!r}")


def perceptual_distance(a: torch.Tensor, b: torch.Tensor,
                        backend="proxy",
                        weights_path: Path | None = None,
                        input_range: str = "signed") -> float:
    """Perceptual distance under the chosen backend (0 for identical inputs)."""
    fn = get_backend(backend, weights_path)
    return fn(a, b, input_range=input_range)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class PairScore:
    id: str
    msssim: float
    perceptual: float


@dataclass
class MetricReport:
    pairs: list[PairScore]
    msssim_mean: float
    perceptual_mean: float
    count: int
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, pairs: list[PairScore],
                   metadata: dict | None = None) -> "MetricReport":
        n = len(pairs)
        return cls(pairs=pairs,
                   msssim_mean=sum(p.msssim for p in pairs) / n,
                   perceptual_mean=sum(p.perceptual for p in pairs) / n,
                   count=n, metadata=metadata or {})

    def to_dict(self) -> dict:
        return {"msssim_mean": self.msssim_mean,
                "perceptual_mean": self.perceptual_mean,
                "count": self.count,
                "metadata": self.metadata,
                "pairs": [{"id": p.id, "msssim": p.msssim,
                           "perceptual": p.perceptual} for p in self.pairs]}


def background_preservation(inputs: torch.Tensor, outputs: torch.Tensor,
                            specs: Sequence[MaskSpec],
                            ids: Sequence[str] | None = None,
                            backend="proxy",
                            metadata: dict | None = None) -> MetricReport:
    """Scores on the faces with the eye boxes zeroed out of both images."""
    fn = get_backend(backend)
    ids = ids or [str(i) for i in range(len(specs))]
    pairs = []
    for i, spec in enumerate(specs):
        keep = 1.0 - spec.mask
        a = _to_unit(inputs[i], "signed") * keep
        b = _to_unit(outputs[i], "signed") * keep
        pairs.append(PairScore(
            id=ids[i],
            msssim=msssim(a, b, input_range="unit"),
            perceptual=fn(a, b, input_range="unit")))
    meta = {"backend": getattr(fn, "name", "custom"), "kind": "background"}
    meta.update(metadata or {})
    return MetricReport.from_pairs(pairs, meta)


def identity_preservation(inputs: torch.Tensor, outputs: torch.Tensor,
                          specs: Sequence[MaskSpec],
                          ids: Sequence[str] | None = None,
                          backend="proxy",
                          metadata: dict | None = None) -> MetricReport:
    """Scores on the eye composites only (used for ablation comparisons)."""
    fn = get_backend(backend)
    ids = ids or [str(i) for i in range(len(specs))]
    pairs = []
    for i, spec in enumerate(specs):
        a = batch_composites(inputs[i:i + 1], [spec])[0]
        b = batch_composites(outputs[i:i + 1], [spec])[0]
        pairs.append(PairScore(
            id=ids[i],
            msssim=msssim(a, b),
            perceptual=fn(a, b)))
    meta = {"backend": getattr(fn, "name", "custom"), "kind": "eye-region"}
    meta.update(metadata or {})
    return MetricReport.from_pairs(pairs, meta)


# ---------------------------------------------------------------------------
# Latent statistics
# ---------------------------------------------------------------------------

@dataclass
class LatentStats:
    ids_x: list[str]
    ids_y: list[str]
    r_x: np.ndarray          # (Nx, 2) angle codes of real domain-X samples
    r_y: np.ndarray          # (Ny, 2) angle codes of real domain-Y samples
    r_corrected: np.ndarray  # (Ny, 2) angle codes of corrected samples
    content_diffs: np.ndarray    # (Ny, code_dim) reconstruction code deltas
    content_moments: np.ndarray  # (Ny, 2): per-sample mean/var of code diffs
    content_diff_mean: float     # grand mean over all diff elements
    content_diff_var: float      # grand population variance


def _chunks(items: list, size: int = 16):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def latent_stats(bundle: NetworkBundle, samples_x: list[ImageSample],
                 samples_y: list[ImageSample]) -> LatentStats:
    """Angle-code scatter groups plus content-code difference moments.

    The corrected group runs the correction path over domain Y; the content
    differences compare each domain-Y reconstruction's code with its input's
    code (population variance, ddof 0).
    """
    r_x, r_y, r_corr, diffs = [], [], [], []
    with torch.no_grad():
        for chunk in _chunks(samples_x):
            batch = collate(chunk)
            comp = batch_composites(batch.pixels, batch.specs)
            r_x.append(bundle.e_r(comp).numpy())
        for chunk in _chunks(samples_y):
            batch = collate(chunk)
            comp = batch_composites(batch.pixels, batch.specs)
            r = bundle.e_r(comp)
            c = bundle.g_pre.encode(comp)
            r_y.append(r.numpy())
            corrected = correct_gaze(batch.pixels, batch.mask, batch.specs,
                                     bundle)
            r_corr.append(
                bundle.e_r(batch_composites(corrected, batch.specs)).numpy())
            recon = bundle.g_y(apply_mask(batch.pixels, batch.mask), c, r)
            c_recon = bundle.g_pre.encode(
                batch_composites(recon, batch.specs))
            diffs.append((c_recon - c).double().numpy())
    diff = np.concatenate(diffs) if diffs else np.zeros((0, 1))
    moments = np.stack([diff.mean(axis=1), diff.var(axis=1)], axis=1) \
        if diff.size else np.zeros((0, 2))
    return LatentStats(
        ids_x=[s.id for s in samples_x],
        ids_y=[s.id for s in samples_y],
        r_x=np.concatenate(r_x) if r_x else np.zeros((0, 2)),
        r_y=np.concatenate(r_y) if r_y else np.zeros((0, 2)),
        r_corrected=np.concatenate(r_corr) if r_corr else np.zeros((0, 2)),
        content_diffs=diff,
        content_moments=moments,
        content_diff_mean=float(diff.mean()) if diff.size else 0.0,
        content_diff_var=float(diff.var()) if diff.size else 0.0,
    )


def write_latent_scatter_csv(stats: LatentStats, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "id", "r0", "r1"])
        for group, ids, pts in (("x", stats.ids_x, stats.r_x),
                                ("y", stats.ids_y, stats.r_y),
                                ("corrected", stats.ids_y,
                                 stats.r_corrected)):
            for sid, p in zip(ids, pts):
                writer.writerow([group, sid, repr(float(p[0])),
                                 repr(float(p[1]))])


def write_content_moments_csv(stats: LatentStats, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "mean", "var"])
        for sid, (m, v) in zip(stats.ids_y, stats.content_moments):
            writer.writerow([sid, repr(float(m)), repr(float(v))])
