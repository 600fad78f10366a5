"""Counting metrics, whole-image inference, and the weather-query probe.

MAE is the mean absolute count error; MSE here follows the counting
literature's convention and is the ROOT mean squared error, so MAE <= MSE
always holds. Images are processed whole, zero-padded on the right/bottom
to the next output-stride multiple.

Density files: magic ``AWCCDMAP``, two little-endian u32 dims (rows, cols),
then row-major little-endian float32 cells.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import ADVERSE_TAGS, SampleDescriptor, parse_annotations
from .exceptions import DataError
from .model import CrowdCounter, DensityMap

DENSITY_MAGIC = b"AWCCDMAP"
_DENSITY_HEADER = struct.Struct("<8sII")


def mae_mse(gts, preds) -> tuple[float, float]:
    """Mean absolute error and root-mean-squared error of the counts."""
    gts = np.asarray(gts, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if gts.size == 0:
        raise ValueError("cannot compute metrics over zero images")
    if gts.shape != preds.shape:
        raise ValueError(f"length mismatch: {gts.shape} ground truths vs {preds.shape} predictions")
    diff = gts - preds
    return float(np.abs(diff).mean()), float(math.sqrt((diff ** 2).mean()))


def infer_count(model: CrowdCounter, image) -> tuple[float, DensityMap]:
    """Whole-image prediction; pads right/bottom to an output-stride multiple.

    The padded region contributes to the count (a documented, negligible
    bias at stride 8)."""
    arr = np.asarray(image, dtype=np.float32)
    stride = model.config.output_stride
    h, w = arr.shape[:2]
    pad_h = (stride - h % stride) % stride
    pad_w = (stride - w % stride) % stride
    if pad_h or pad_w:
        arr = np.pad(arr, ((0, pad_h), (0, pad_w), (0, 0)))
    model.eval()
    with torch.no_grad():
        result = model(arr)
    return result.density.count, result.density


@dataclass
class SubsetMetrics:
    mae: float
    mse: float
    num_images: int

    def to_dict(self) -> dict:
        return {"mae": self.mae, "mse": self.mse, "num_images": self.num_images}


@dataclass
class EvalReport:
    overall: SubsetMetrics
    per_subset: dict = field(default_factory=dict)
    per_image: list = field(default_factory=list)  # (image_id, gt, pred)

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "subsets": {name: m.to_dict() for name, m in self.per_subset.items()},
            "per_image": [
                {"image_id": iid, "gt": gt, "pred": pred}
                for iid, gt, pred in self.per_image
            ],
        }


def _subset_name(tag: str) -> str:
    if tag == "clear":
        return "clear"
    if tag in ADVERSE_TAGS:
        return "adverse"
    return "unknown"


def evaluate_dataset(model: CrowdCounter, annotations, subset_key: str | None = None) -> EvalReport:
    """Per-image counts and aggregate metrics, optionally split by weather tag.

    With subset_key="weather", images group into "clear" (tag clear) and
    "adverse" (haze/rain/snow); anything else lands in "unknown" with a
    warning. Aggregation order follows the annotation file.
    """
    if isinstance(annotations, (str, Path)):
        descriptors = parse_annotations(annotations)
    else:
        descriptors = list(annotations)
    if not descriptors:
        raise DataError("no images to evaluate")

    per_image = []
    tags = []
    for desc in descriptors:
        sample = desc.load() if isinstance(desc, SampleDescriptor) else desc
        count, _ = infer_count(model, sample.image)
        per_image.append((sample.image_id, float(len(sample.points)), count))
        tags.append(sample.weather_tag)

    gts = [gt for _, gt, _ in per_image]
    preds = [pred for _, _, pred in per_image]
    mae, mse = mae_mse(gts, preds)
    report = EvalReport(SubsetMetrics(mae, mse, len(per_image)), per_image=per_image)

    if subset_key is not None:
        groups: dict[str, list[int]] = {}
        for i, tag in enumerate(tags):
            groups.setdefault(_subset_name(tag), []).append(i)
        if "unknown" in groups:
            warnings.warn(f"{len(groups['unknown'])} image(s) with unknown weather "
                          f"tag grouped under 'unknown'")
        for name in ("clear", "adverse", "unknown"):
            idxs = groups.get(name)
            if not idxs:
                continue
            sub_mae, sub_mse = mae_mse([gts[i] for i in idxs], [preds[i] for i in idxs])
            report.per_subset[name] = SubsetMetrics(sub_mae, sub_mse, len(idxs))
    return report


# -- weather-query probe -------------------------------------------------------


@dataclass
class QueryGallery:
    """Flattened weather-query vectors for a set of images."""

    entries: list  # (image_id, vector, weather_tag)

    def __post_init__(self):
        dims = {len(vec) for _, vec, _ in self.entries}
        if len(dims) > 1:
            raise ValueError(f"gallery vectors disagree on dimension: {sorted(dims)}")

    def ids(self) -> list:
        return [iid for iid, _, _ in self.entries]


def build_query_gallery(model: CrowdCounter, annotations) -> QueryGallery:
    """Run the weather branch over every image and collect flattened queries."""
    if isinstance(annotations, (str, Path)):
        descriptors = parse_annotations(annotations)
    else:
        descriptors = list(annotations)
    entries = []
    model.eval()
    for desc in descriptors:
        sample = desc.load() if isinstance(desc, SampleDescriptor) else desc
        arr = np.asarray(sample.image, dtype=np.float32)
        stride = model.config.output_stride
        pad_h = (stride - arr.shape[0] % stride) % stride
        pad_w = (stride - arr.shape[1] % stride) % stride
        if pad_h or pad_w:
            arr = np.pad(arr, ((0, pad_h), (0, pad_w), (0, 0)))
        with torch.no_grad():
            queries = model.weather_queries(arr)
        entries.append((
            sample.image_id,
            queries.tokens.reshape(-1).numpy().astype(np.float64),
            sample.weather_tag,
        ))
    return QueryGallery(entries)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(a) * np.linalg.norm(b)), 1e-12)
    return 1.0 - float(np.dot(a, b)) / denom


def probe_weather_neighbors(gallery: QueryGallery, query_id: str, k: int) -> list:
    """The k gallery entries nearest to `query_id` by cosine distance.

    Returns (image_id, distance) pairs ascending; the query itself is
    excluded. Ties break by gallery order."""
    ids = gallery.ids()
    if query_id not in ids:
        raise ValueError(f"query id {query_id!r} not present in the gallery")
    if not 1 <= k <= len(gallery.entries) - 1:
        raise ValueError(
            f"k must lie in [1, {len(gallery.entries) - 1}] "
            f"(gallery size minus the query itself), got {k}"
        )
    q_index = ids.index(query_id)
    q_vec = gallery.entries[q_index][1]
    scored = [
        (cosine_distance(q_vec, vec), i, iid)
        for i, (iid, vec, _) in enumerate(gallery.entries)
        if i != q_index
    ]
    scored.sort(key=lambda t: (t[0], t[1]))
    return [(iid, dist) for dist, _, iid in scored[:k]]


# -- density-map files ---------------------------------------------------------


def export_density(density, path) -> None:
    """Write the bit-exact binary grid format (row-major float32 LE)."""
    grid = density.numpy() if isinstance(density, DensityMap) else np.asarray(density)
    if grid.ndim != 2 or grid.size == 0:
        raise ValueError(f"density grid must be a non-empty 2-D array, got shape {grid.shape}")
    rows, cols = grid.shape
    payload = np.ascontiguousarray(grid, dtype="<f4").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_DENSITY_HEADER.pack(DENSITY_MAGIC, rows, cols))
        fh.write(payload)


def load_density(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _DENSITY_HEADER.size:
        raise DataError(f"{path}: truncated density file")
    magic, rows, cols = _DENSITY_HEADER.unpack(raw[:_DENSITY_HEADER.size])
    if magic != DENSITY_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}; not a density file")
    expected = rows * cols * 4
    body = raw[_DENSITY_HEADER.size:]
    if len(body) != expected:
        raise DataError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).copy()


def render_density(density, path) -> None:
    """Colorized raster of the grid for human inspection."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    grid = density.numpy() if isinstance(density, DensityMap) else np.asarray(density)
    plt.imsave(path, grid, cmap="jet")
