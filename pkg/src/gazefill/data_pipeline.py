"""Dataset ingestion, eye masks and crops, flips, and the procedural toy set.

Conventions used across the package:
  * image tensors are channels-first float32 ``(3, H, W)`` (or batched
    ``(B, 3, H, W)``) with pixel values in ``[-1, 1]``;
  * landmarks are ``(68, 2)`` float arrays of ``(x, y)`` pixel coordinates,
    with pixel ``(row i, col j)`` covering ``[j, j+1) x [i, i+1)``;
  * rectangles are integer, half-open, and never shrink: clamping shifts
    them back inside the image so the eye boxes keep their exact size.

Samples are immutable after construction; preprocessing may run in parallel
workers as long as batch order is derived from ``(seed, iteration)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DataError, MalformedLandmarksError, ShapeMismatchError

log = logging.getLogger(__name__)

# 68-point landmark convention: these indices bound each eye.
LEFT_EYE_INDICES = tuple(range(36, 42))
RIGHT_EYE_INDICES = tuple(range(42, 48))

# Eye box size at the canonical 256x256 resolution; scaled for other sizes.
CANONICAL_RESOLUTION = 256
EYE_BOX_HEIGHT = 30
EYE_BOX_WIDTH = 50


class Domain(Enum):
    """X: eyes staring at the camera. Y: eyes staring somewhere else."""

    X = "x"
    Y = "y"


@dataclass(frozen=True)
class Rect:
    """Half-open integer rectangle ``[x0, x0+width) x [y0, y0+height)``."""

    x0: int
    y0: int
    width: int
    height: int

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.width / 2.0, self.y0 + self.height / 2.0)

    def slices(self) -> tuple[slice, slice]:
        return (slice(self.y0, self.y0 + self.height),
                slice(self.x0, self.x0 + self.width))


@dataclass(frozen=True)
class MaskSpec:
    """The two per-eye boxes plus the assembled binary mask ``(1, H, W)``."""

    left: Rect
    right: Rect
    mask: torch.Tensor


@dataclass(frozen=True)
class ImageSample:
    """A face image with its domain tag and 68 landmarks."""

    pixels: torch.Tensor  # (3, H, W) float32 in [-1, 1]
    domain: Domain
    landmarks: np.ndarray  # (68, 2) float64
    id: str

    @property
    def image_size(self) -> tuple[int, int]:
        return (int(self.pixels.shape[-2]), int(self.pixels.shape[-1]))


@dataclass
class DatasetSplit:
    train_x: list[str] = field(default_factory=list)
    train_y: list[str] = field(default_factory=list)
    test_x: list[str] = field(default_factory=list)
    test_y: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if set(self.train_x) & set(self.test_x):
            raise DataError("train_x and test_x overlap")
        if set(self.train_y) & set(self.test_y):
            raise DataError("train_y and test_y overlap")


@dataclass
class Batch:
    """A stacked mini-batch with per-sample mask geometry."""

    pixels: torch.Tensor  # (B, 3, H, W)
    mask: torch.Tensor  # (B, 1, H, W)
    specs: list[MaskSpec]
    ids: list[str]


def eye_box_size(image_size: tuple[int, int]) -> tuple[int, int]:
    """(height, width) of one eye box, scaled from the canonical 30x50."""
    h, w = image_size
    bh = max(2, int(math.floor(EYE_BOX_HEIGHT * h / CANONICAL_RESOLUTION + 0.5)))
    bw = max(2, int(math.floor(EYE_BOX_WIDTH * w / CANONICAL_RESOLUTION + 0.5)))
    return (bh, bw)


def _centered_rect(cx: float, cy: float, box_hw: tuple[int, int],
                   image_size: tuple[int, int]) -> Rect:
    bh, bw = box_hw
    h, w = image_size
    # round-half-up keeps the box centered; clamping shifts, never shrinks
    x0 = int(math.floor(cx - bw / 2.0 + 0.5))
    y0 = int(math.floor(cy - bh / 2.0 + 0.5))
    x0 = min(max(x0, 0), w - bw)
    y0 = min(max(y0, 0), h - bh)
    return Rect(x0=x0, y0=y0, width=bw, height=bh)


def compute_eye_masks(landmarks: np.ndarray, image_size: tuple[int, int],
                      box_hw: tuple[int, int] | None = None) -> MaskSpec:
    """Build the two eye boxes and their union mask from 68 landmarks.

    Each eye box is centered on the arithmetic mean of that eye's six
    landmark points and has the fixed (resolution-scaled) box size.
    """
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.ndim != 2 or landmarks.shape[0] < 48 or landmarks.shape[1] != 2:
        raise MalformedLandmarksError(
            f"expected (68, 2) landmarks, got {landmarks.shape}")
    h, w = image_size
    if box_hw is None:
        box_hw = eye_box_size(image_size)
    if box_hw[0] > h or box_hw[1] > w:
        raise ShapeMismatchError(
            f"eye box {box_hw} does not fit inside image {image_size}")

    left_c = landmarks[list(LEFT_EYE_INDICES)].mean(axis=0)
    right_c = landmarks[list(RIGHT_EYE_INDICES)].mean(axis=0)
    left = _centered_rect(left_c[0], left_c[1], box_hw, image_size)
    right = _centered_rect(right_c[0], right_c[1], box_hw, image_size)

    mask = torch.zeros(1, h, w)
    for rect in (left, right):
        ys, xs = rect.slices()
        mask[:, ys, xs] = 1.0
    return MaskSpec(left=left, right=right, mask=mask)


def apply_mask(image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Erase the eye region (fill 0 = mid-gray) and append the mask channel.

    Works on ``(3, H, W)`` or ``(B, 3, H, W)`` with a matching
    ``(1, H, W)`` / ``(B, 1, H, W)`` mask; output gains one channel.
    """
    if image.shape[-2:] != mask.shape[-2:]:
        raise ShapeMismatchError(
            f"image {tuple(image.shape)} vs mask {tuple(mask.shape)}")
    erased = image * (1.0 - mask)
    return torch.cat([erased, mask.expand(*image.shape[:-3], 1, *image.shape[-2:])],
                     dim=-3)


def hflip(t: torch.Tensor) -> torch.Tensor:
    """Horizontal mirror along the width axis (an involution)."""
    return torch.flip(t, dims=[-1])


def extract_eye_composite(image: torch.Tensor, spec: MaskSpec) -> torch.Tensor:
    """Crop both eye boxes and resample them into one (3, H/2, W/2) tile.

    The left box maps to the left half ``(H/2, W/4)``, the right box to the
    right half, so flipping the composite swaps and mirrors the two eyes.
    Resampling is bilinear with the corner-aligned convention.
    """
    h, w = int(image.shape[-2]), int(image.shape[-1])
    out_h, half_w = h // 2, w // 4
    halves = []
    for rect in (spec.left, spec.right):
        ys, xs = rect.slices()
        crop = image[..., ys, xs]
        unbatched = crop.dim() == 3
        if unbatched:
            crop = crop.unsqueeze(0)
        resized = F.interpolate(crop, size=(out_h, half_w), mode="bilinear",
                                align_corners=True)
        halves.append(resized.squeeze(0) if unbatched else resized)
    return torch.cat(halves, dim=-1)


def composite_back(generated: torch.Tensor, original: torch.Tensor,
                   mask: torch.Tensor) -> torch.Tensor:
    """Generated pixels inside the mask, original pixels outside, bit-exact."""
    return torch.where(mask > 0.5, generated, original)


def collate(samples: Sequence[ImageSample],
            box_hw: tuple[int, int] | None = None) -> Batch:
    """Stack samples into a batch, computing each sample's mask."""
    specs = [compute_eye_masks(s.landmarks, s.image_size, box_hw) for s in samples]
    return Batch(
        pixels=torch.stack([s.pixels for s in samples]),
        mask=torch.stack([m.mask for m in specs]),
        specs=specs,
        ids=[s.id for s in samples],
    )


def batch_composites(pixels: torch.Tensor, specs: Sequence[MaskSpec]) -> torch.Tensor:
    """Per-sample eye composites for a batch.

    Rect positions differ per sample but their size is fixed, so crops are
    stacked and each side resampled in one call; the result matches
    :func:`extract_eye_composite` applied per sample.
    """
    h, w = int(pixels.shape[-2]), int(pixels.shape[-1])
    out_h, half_w = h // 2, w // 4
    halves = []
    for side in ("left", "right"):
        crops = []
        for i, spec in enumerate(specs):
            ys, xs = getattr(spec, side).slices()
            crops.append(pixels[i, :, ys, xs])
        halves.append(F.interpolate(torch.stack(crops), size=(out_h, half_w),
                                    mode="bilinear", align_corners=True))
    return torch.cat(halves, dim=-1)


# ---------------------------------------------------------------------------
# Procedural toy dataset
# ---------------------------------------------------------------------------

# Toy face geometry as fractions of the image side. Gaze is encoded by the
# iris offset inside the sclera; domain X keeps it at (0, 0).
_TOY = {
    "head_rx": 0.36, "head_ry": 0.42,
    "eye_dx": 0.165, "eye_dy": -0.10,
    "sclera_rx": 0.085, "sclera_ry": 0.050,
    "iris_r": 0.032,
    "gaze_max_dx": 0.040, "gaze_max_dy": 0.010,
    "gaze_min_frac": 0.5,
}


@dataclass
class ToyDataset:
    samples: dict[str, ImageSample]
    split: DatasetSplit
    gaze_offsets: dict[str, tuple[float, float]]  # true iris offsets, px

    def get(self, ids: Iterable[str]) -> list[ImageSample]:
        return [self.samples[i] for i in ids]


def _soft_ellipse(xx, yy, cx, cy, rx, ry):
    """Coverage map of an ellipse with roughly one-pixel soft edges."""
    d = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    return np.clip((1.0 - d) * min(rx, ry) + 0.5, 0.0, 1.0)


def _paint(canvas, coverage, color):
    return canvas * (1.0 - coverage) + color * coverage


def toy_gaze_offset(rng: np.random.Generator, size: int) -> tuple[float, float]:
    """Domain-Y iris offset: area-uniform in an annulus of the gaze disc."""
    phi = rng.uniform(0.0, 2.0 * np.pi)
    lo = _TOY["gaze_min_frac"] ** 2
    u = math.sqrt(rng.uniform(lo, 1.0))
    return (u * math.cos(phi) * _TOY["gaze_max_dx"] * size,
            u * math.sin(phi) * _TOY["gaze_max_dy"] * size)


def _toy_landmarks(size, cx, cy, head_rx, head_ry, eyes, sclera_rx, sclera_ry):
    """Deterministic 68-point layout; only indices 36-47 carry meaning."""
    pts = np.zeros((68, 2))
    # jaw 0-16 along the lower head boundary
    for k in range(17):
        th = math.pi * (1.0 - k / 16.0)
        pts[k] = (cx + head_rx * math.cos(th), cy + head_ry * abs(math.sin(th)))
    # brows 17-26 above each eye
    for side, base in ((0, 17), (1, 22)):
        ex, ey = eyes[side]
        for k in range(5):
            pts[base + k] = (ex + sclera_rx * (k - 2) / 2.0,
                             ey - 0.105 * size)
    # nose 27-35
    for k in range(4):
        pts[27 + k] = (cx, cy - 0.05 * size + k * 0.035 * size)
    for k in range(5):
        pts[31 + k] = (cx + (k - 2) * 0.02 * size, cy + 0.10 * size)
    # eyes 36-47: six points per eye, evenly spaced on the sclera ellipse
    # so their arithmetic mean is exactly the eye center
    for side, base in ((0, 36), (1, 42)):
        ex, ey = eyes[side]
        for k in range(6):
            th = math.pi * k / 3.0
            pts[base + k] = (ex + sclera_rx * math.cos(th),
                             ey + sclera_ry * math.sin(th))
    # mouth 48-67: outer ring of 12, inner ring of 8
    mx, my = cx, cy + 0.22 * size
    for k in range(12):
        th = 2.0 * math.pi * k / 12.0
        pts[48 + k] = (mx + 0.10 * size * math.cos(th),
                       my + 0.035 * size * math.sin(th))
    for k in range(8):
        th = 2.0 * math.pi * k / 8.0
        pts[60 + k] = (mx + 0.06 * size * math.cos(th),
                       my + 0.02 * size * math.sin(th))
    return pts


def _render_toy_face(rng: np.random.Generator, size: int, domain: Domain):
    s = float(size)
    cx = s / 2.0 + rng.uniform(-0.01, 0.01) * s
    cy = s / 2.0 + rng.uniform(-0.01, 0.01) * s
    head_rx = s * (_TOY["head_rx"] + rng.uniform(-0.02, 0.02))
    head_ry = s * (_TOY["head_ry"] + rng.uniform(-0.02, 0.02))
    eye_off = s * (_TOY["eye_dx"] + rng.uniform(-0.008, 0.008))
    eye_y = cy + s * (_TOY["eye_dy"] + rng.uniform(-0.01, 0.01))
    # identity lives mostly in the eyes: wide per-sample variation in iris
    # shade/size and sclera shade/shape, so erasing the boxes removes real
    # identity information that only the content code can restore
    sclera_rx = s * (_TOY["sclera_rx"] + rng.uniform(-0.012, 0.012))
    sclera_ry = s * (_TOY["sclera_ry"] + rng.uniform(-0.008, 0.008))
    iris_r = s * (_TOY["iris_r"] + rng.uniform(-0.006, 0.006))

    bg = -0.7 + rng.uniform(-0.05, 0.05)
    skin = 0.25 + rng.uniform(-0.15, 0.15)
    sclera_col = 0.75 + rng.uniform(-0.15, 0.15)
    iris_col = -0.65 + rng.uniform(-0.3, 0.3)
    brow_col = -0.15 + rng.uniform(-0.08, 0.08)
    lip_col = -0.10 + rng.uniform(-0.10, 0.10)

    if domain is Domain.X:
        gaze = (0.0, 0.0)
    else:
        gaze = toy_gaze_offset(rng, size)

    eyes = [(cx - eye_off, eye_y), (cx + eye_off, eye_y)]
    jj, ii = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)

    img = np.full((size, size), bg)
    img = _paint(img, _soft_ellipse(jj, ii, cx, cy, head_rx, head_ry), skin)
    for ex, ey in eyes:
        img = _paint(img, _soft_ellipse(jj, ii, ex, ey - 0.105 * s,
                                        sclera_rx, 0.013 * s), brow_col)
        img = _paint(img, _soft_ellipse(jj, ii, ex, ey, sclera_rx, sclera_ry),
                     sclera_col)
        img = _paint(img, _soft_ellipse(jj, ii, ex + gaze[0], ey + gaze[1],
                                        iris_r, iris_r), iris_col)
    img = _paint(img, _soft_ellipse(jj, ii, cx, cy + 0.06 * s,
                                    0.012 * s, 0.08 * s), skin * 0.6)
    img = _paint(img, _soft_ellipse(jj, ii, cx, cy + 0.22 * s,
                                    0.10 * s, 0.035 * s), lip_col)

    # mild per-identity channel tint so the three channels are not identical
    tint = rng.uniform(-0.04, 0.04, size=3)
    pixels = np.clip(img[None, :, :] + tint[:, None, None], -1.0, 1.0)
    lm = _toy_landmarks(size, cx, cy, head_rx, head_ry, eyes,
                        sclera_rx, sclera_ry)
    return pixels.astype(np.float32), lm, gaze


def generate_toy_dataset(n_x: int, n_y: int, seed: int,
                         image_size: int = 64,
                         test_fraction: float = 0.25) -> ToyDataset:
    """Deterministic procedural faces for desk-scale training and tests.

    Same ``seed`` yields bit-identical datasets. Domain X irises are
    centered; domain Y irises carry a seeded offset (see
    :func:`toy_gaze_offset`).
    """
    if n_x < 1 or n_y < 1:
        raise DataError("toy dataset needs at least one sample per domain")
    samples: dict[str, ImageSample] = {}
    offsets: dict[str, tuple[float, float]] = {}
    ids = {Domain.X: [], Domain.Y: []}
    for domain, count, tag in ((Domain.X, n_x, 0), (Domain.Y, n_y, 1)):
        for i in range(count):
            rng = np.random.default_rng([seed, tag, i])
            pixels, lm, gaze = _render_toy_face(rng, image_size, domain)
            sid = f"{domain.value}{i:04d}"
            samples[sid] = ImageSample(pixels=torch.from_numpy(pixels),
                                       domain=domain, landmarks=lm, id=sid)
            offsets[sid] = gaze
            ids[domain].append(sid)

    n_test_x = max(1, int(n_x * test_fraction)) if n_x > 1 else 0
    n_test_y = max(1, int(n_y * test_fraction)) if n_y > 1 else 0
    split = DatasetSplit(
        train_x=ids[Domain.X][n_test_x:],
        train_y=ids[Domain.Y][n_test_y:],
        test_x=ids[Domain.X][:n_test_x],
        test_y=ids[Domain.Y][:n_test_y],
    )
    split.validate()
    return ToyDataset(samples=samples, split=split, gaze_offsets=offsets)


def estimate_iris_offset(pixels: torch.Tensor, rect: Rect,
                         center: tuple[float, float],
                         dark_fraction: float = 0.25):
    """Centroid-of-dark-pixels iris locator, relative to the eye center.

    Thresholds at ``min + dark_fraction * (max - min)`` of the in-box
    luminance, so it tolerates blurry synthesized irises. Returns ``(dx, dy)``
    in pixels, or ``None`` when the box has no contrast at all.
    """
    ys, xs = rect.slices()
    luma = pixels[..., ys, xs].mean(dim=-3)
    lo, hi = float(luma.min()), float(luma.max())
    if hi - lo < 1e-6:
        return None
    dark = luma <= lo + dark_fraction * (hi - lo)
    idx = dark.nonzero(as_tuple=False).double()
    cy = float(idx[:, 0].mean()) + rect.y0 + 0.5
    cx = float(idx[:, 1].mean()) + rect.x0 + 0.5
    return (cx - center[0], cy - center[1])


# ---------------------------------------------------------------------------
# On-disk layout: <root>/x/*.png, <root>/y/*.png, landmarks.jsonl, split.json
# ---------------------------------------------------------------------------

LANDMARKS_FILENAME = "landmarks.jsonl"
SPLIT_FILENAME = "split.json"


@dataclass
class LoadResult:
    samples: dict[str, ImageSample]
    split: DatasetSplit
    skipped_missing_landmarks: int


def _to_uint8(pixels: torch.Tensor) -> np.ndarray:
    arr = ((pixels.clamp(-1, 1) + 1.0) * 127.5).round().byte().numpy()
    return np.transpose(arr, (1, 2, 0))


def _from_uint8(arr: np.ndarray) -> torch.Tensor:
    t = torch.from_numpy(np.transpose(arr, (2, 0, 1)).astype(np.float32))
    return t / 127.5 - 1.0


def save_dataset(dataset: ToyDataset, root: Path) -> None:
    """Materialize a toy dataset in the documented on-disk layout."""
    root = Path(root)
    for domain in Domain:
        (root / domain.value).mkdir(parents=True, exist_ok=True)
    with open(root / LANDMARKS_FILENAME, "w") as fh:
        for sid in sorted(dataset.samples):
            s = dataset.samples[sid]
            Image.fromarray(_to_uint8(s.pixels)).save(
                root / s.domain.value / f"{sid}.png")
            fh.write(json.dumps({"id": sid,
                                 "points": s.landmarks.tolist()}) + "\n")
    with open(root / SPLIT_FILENAME, "w") as fh:
        json.dump({"train_x": dataset.split.train_x,
                   "train_y": dataset.split.train_y,
                   "test_x": dataset.split.test_x,
                   "test_y": dataset.split.test_y}, fh, indent=1)


def _read_landmarks_file(path: Path) -> dict[str, np.ndarray]:
    records = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                pts = np.asarray(rec["points"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise MalformedLandmarksError(
                    f"{path}:{line_no}: bad landmark record: {exc}") from exc
            records[str(rec["id"])] = pts
    return records


def load_dataset(root: Path, landmarks_file: Path | None = None,
                 split_file: Path | None = None, seed: int = 0,
                 canonical_test_sizes: tuple[int, int] = (100, 300)) -> LoadResult:
    """Load images + landmarks from disk; normalize to [-1, 1].

    Samples without a landmark record are skipped (counted, warned once).
    When no split file exists, a seeded split is generated: test sizes are
    the canonical (100 X, 300 Y) capped at 20% of each domain.
    """
    root = Path(root)
    landmarks_file = landmarks_file or root / LANDMARKS_FILENAME
    if not landmarks_file.exists():
        raise DataError(f"landmark file not found: {landmarks_file}")
    landmarks = _read_landmarks_file(landmarks_file)

    samples: dict[str, ImageSample] = {}
    ids = {Domain.X: [], Domain.Y: []}
    skipped = 0
    for domain in Domain:
        folder = root / domain.value
        if not folder.is_dir():
            raise DataError(f"missing domain directory: {folder}")
        for img_path in sorted(folder.iterdir()):
            if img_path.suffix.lower() not in (".png", ".jpg", ".jpeg"):
                continue
            sid = img_path.stem
            if sid not in landmarks:
                skipped += 1
                continue
            try:
                with Image.open(img_path) as im:
                    arr = np.asarray(im.convert("RGB"))
            except OSError as exc:
                raise DataError(f"unreadable image {img_path}: {exc}") from exc
            pixels = _from_uint8(arr)
            lm = landmarks[sid]
            if lm.shape != (68, 2):
                raise MalformedLandmarksError(
                    f"{sid}: expected 68 points, got {lm.shape}")
            samples[sid] = ImageSample(pixels=pixels, domain=domain,
                                       landmarks=lm, id=sid)
            ids[domain].append(sid)
    if skipped:
        log.warning("skipped %d image(s) without landmark records", skipped)

    split_file = split_file or root / SPLIT_FILENAME
    if split_file.exists():
        with open(split_file) as fh:
            raw = json.load(fh)
        split = DatasetSplit(train_x=raw["train_x"], train_y=raw["train_y"],
                             test_x=raw["test_x"], test_y=raw["test_y"])
    else:
        rng = np.random.default_rng(seed)
        split = DatasetSplit()
        for domain, (train_key, test_key), canonical in (
                (Domain.X, ("train_x", "test_x"), canonical_test_sizes[0]),
                (Domain.Y, ("train_y", "test_y"), canonical_test_sizes[1])):
            pool = list(ids[domain])
            n_test = min(canonical, len(pool) // 5)
            order = rng.permutation(len(pool))
            test = [pool[i] for i in order[:n_test]]
            train = [pool[i] for i in order[n_test:]]
            setattr(split, test_key, sorted(test))
            setattr(split, train_key, sorted(train))
    split.validate()
    return LoadResult(samples=samples, split=split,
                      skipped_missing_landmarks=skipped)
