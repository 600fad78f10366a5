"""Point-annotated crowd samples: parsing, validation, crop-pair augmentation.

Annotation files are UTF-8 JSON lines, one image per line:

    {"image": "rel/path.jpg", "points": [[x, y], ...], "weather": "haze"}

Image paths resolve relative to the annotation file's directory. Pixel
values are kept in [0, 1]; per-channel standardization happens inside the
model so that raw arrays remain the data-layer interface.

Loading and augmentation are pure functions of (descriptor, random
source); `derive_rng(master_seed, index)` hands every sample its own
stream, so samples may be prepared concurrently without losing
reproducibility.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .exceptions import AnnotationError, DataError

WEATHER_TAGS = ("clear", "haze", "rain", "snow", "unknown")
ADVERSE_TAGS = ("haze", "rain", "snow")


@dataclass
class CrowdSample:
    """An image, its head-point annotations, and an optional weather tag.

    `image` is H x W x 3 float32 in [0, 1]; `points` is (L, 2) float64 with
    columns (x, y) satisfying 0 <= x < W and 0 <= y < H.
    """

    image_id: str
    image: np.ndarray
    points: np.ndarray
    weather_tag: str = "unknown"

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def validate(self) -> "CrowdSample":
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"{self.image_id}: image must be HxWx3, got {self.image.shape}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise DataError(f"{self.image_id}: pixel values must lie in [0, 1]")
        if self.weather_tag not in WEATHER_TAGS:
            raise DataError(f"{self.image_id}: unknown weather tag {self.weather_tag!r}")
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        h, w = self.image.shape[:2]
        bad = (pts[:, 0] < 0) | (pts[:, 0] >= w) | (pts[:, 1] < 0) | (pts[:, 1] >= h)
        if bad.any():
            idx = int(np.argmax(bad))
            raise DataError(
                f"{self.image_id}: point {tuple(pts[idx])} outside image bounds {w}x{h}"
            )
        return self


@dataclass
class CropPair:
    """An anchor crop (with transformed points) and an overlapping positive crop."""

    anchor: CrowdSample
    positive: CrowdSample
    overlap_factor: float
    flipped: bool = False


@dataclass
class SampleDescriptor:
    """Lazily-loaded annotation record; `load` resolves and validates the image."""

    image_id: str
    image_path: Path
    points: np.ndarray
    weather_tag: str = "unknown"

    def load(self, crop_size: int | None = None) -> CrowdSample:
        """Read the image, validate points, and apply the resize guard.

        When `crop_size` is given and either image side is smaller, the image
        is upscaled (bilinear, aspect preserved) so the shorter side equals
        `crop_size`; points are scaled with it.
        """
        if not self.image_path.exists():
            raise DataError(f"image file not found: {self.image_path}")
        try:
            with Image.open(self.image_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except DataError:
            raise
        except Exception as exc:  # noqa: BLE001 - surface the offending path
            raise DataError(f"failed to read image {self.image_path}: {exc}") from exc
        sample = CrowdSample(self.image_id, arr, np.array(self.points, copy=True),
                             self.weather_tag).validate()
        if crop_size is not None:
            sample = resize_guard(sample, crop_size)
        return sample


def _normalize_tag(raw, image_id: str) -> str:
    if raw is None:
        return "unknown"
    tag = str(raw).lower()
    if tag not in WEATHER_TAGS:
        warnings.warn(f"{image_id}: unrecognized weather tag {raw!r}, using 'unknown'")
        return "unknown"
    return tag


def parse_annotations(path) -> list[SampleDescriptor]:
    """Parse a JSON-lines annotation file into lazy sample descriptors."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"annotation file not found: {path}")
    root = path.parent
    descriptors = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(record, dict) or "image" not in record:
                raise AnnotationError(f"{path}:{lineno}: expected an object with an 'image' key")
            raw_points = record.get("points", [])
            try:
                points = np.asarray(raw_points, dtype=np.float64).reshape(-1, 2)
            except (TypeError, ValueError) as exc:
                raise AnnotationError(f"{path}:{lineno}: points must be [[x, y], ...]") from exc
            image_rel = str(record["image"])
            descriptors.append(SampleDescriptor(
                image_id=image_rel,
                image_path=root / image_rel,
                points=points,
                weather_tag=_normalize_tag(record.get("weather"), image_rel),
            ))
    return descriptors


def resize_guard(sample: CrowdSample, crop_size: int) -> CrowdSample:
    """Upscale so the shorter side equals `crop_size`; scale points to match."""
    h, w = sample.height, sample.width
    if min(h, w) >= crop_size:
        return sample
    scale = crop_size / min(h, w)
    new_h = crop_size if h <= w else max(crop_size, int(round(h * scale)))
    new_w = crop_size if w <= h else max(crop_size, int(round(w * scale)))
    img = torch.from_numpy(sample.image).permute(2, 0, 1).unsqueeze(0)
    resized = torch.nn.functional.interpolate(
        img, size=(new_h, new_w), mode="bilinear", align_corners=False
    )
    arr = resized.squeeze(0).permute(1, 2, 0).clamp(0.0, 1.0).numpy()
    pts = np.array(sample.points, copy=True).reshape(-1, 2)
    if len(pts):
        pts[:, 0] *= new_w / w
        pts[:, 1] *= new_h / h
    return CrowdSample(sample.image_id, arr, pts, sample.weather_tag).validate()


def transform_points(points, crop_origin, crop_size: int, flipped: bool = False) -> np.ndarray:
    """Re-express points in crop coordinates, keeping those inside the crop.

    A point survives iff its crop-local coordinates lie in [0, crop_size);
    the horizontal flip x' = crop_size - x is applied afterwards.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return pts.copy()
    ox, oy = crop_origin
    local = pts - np.array([ox, oy], dtype=np.float64)
    keep = (
        (local[:, 0] >= 0) & (local[:, 0] < crop_size)
        & (local[:, 1] >= 0) & (local[:, 1] < crop_size)
    )
    local = local[keep]
    if flipped:
        local[:, 0] = crop_size - local[:, 0]
    return local


def derive_rng(master_seed: int, index: int) -> np.random.Generator:
    """Per-sample random source; pure function of (master seed, index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([master_seed, index])))


def _crop_image(image: np.ndarray, ox: int, oy: int, crop_size: int) -> np.ndarray:
    return image[oy:oy + crop_size, ox:ox + crop_size].copy()


def sample_crop_pair(
    sample: CrowdSample,
    crop_size: int,
    rng: np.random.Generator,
    u_min: float = 0.5,
    flip_prob: float = 0.5,
) -> CropPair:
    """Draw the anchor/positive crop pair used during training.

    The anchor position is uniform over valid origins and horizontally
    flipped with probability `flip_prob`. The positive crop is shifted along
    one randomly chosen axis so that intersection area / crop area equals an
    overlap factor drawn from Uniform(u_min, 1). The positive keeps no point
    annotations: it only feeds the weather branch.
    """
    h, w = sample.height, sample.width
    if crop_size > min(h, w):
        raise ValueError(
            f"crop_size {crop_size} exceeds image {w}x{h}; resize guard missing"
        )
    if not 0.0 < u_min <= 1.0:
        raise ValueError(f"u_min must lie in (0, 1], got {u_min}")

    limit_x, limit_y = w - crop_size, h - crop_size
    ax = int(rng.integers(0, limit_x + 1))
    ay = int(rng.integers(0, limit_y + 1))
    flipped = bool(rng.random() < flip_prob)
    factor = float(rng.uniform(u_min, 1.0))
    axis = int(rng.integers(0, 2))  # 0: shift along x, 1: along y

    shift = int(math.floor(crop_size * (1.0 - factor)))
    origin, limit = (ax, limit_x) if axis == 0 else (ay, limit_y)
    candidates = []
    if origin - shift >= 0:
        candidates.append(-shift)
    if origin + shift <= limit:
        candidates.append(shift)
    if candidates:
        delta = candidates[int(rng.integers(0, len(candidates)))] if len(candidates) > 1 \
            else candidates[0]
    else:
        # Anchor too close to both borders for the sampled shift: take the
        # largest feasible displacement, which can only raise the overlap.
        left, right = origin, limit - origin
        delta = -min(shift, left) if left >= right else min(shift, right)
    px, py = (ax + delta, ay) if axis == 0 else (ax, ay + delta)
    achieved = (crop_size - abs(delta)) / crop_size

    anchor_pts = transform_points(sample.points, (ax, ay), crop_size, flipped)
    anchor_img = _crop_image(sample.image, ax, ay, crop_size)
    if flipped:
        anchor_img = anchor_img[:, ::-1].copy()
    anchor = CrowdSample(sample.image_id, anchor_img, anchor_pts, sample.weather_tag)
    positive = CrowdSample(
        sample.image_id,
        _crop_image(sample.image, px, py, crop_size),
        np.zeros((0, 2), dtype=np.float64),
        sample.weather_tag,
    )
    return CropPair(anchor=anchor, positive=positive, overlap_factor=achieved, flipped=flipped)
