import json
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from awcc.model import ModelConfig, init_model

TAG_CYCLE = ("clear", "haze", "rain", "snow")


def make_blob_image(points, h=128, w=128, base=0.25, blob_sigma=5.0,
                    amplitude=0.7, noise_seed=0):
    """Gray canvas with a bright Gaussian bump at every head point."""
    rng = np.random.default_rng(noise_seed)
    img = np.full((h, w, 3), base, dtype=np.float32)
    img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
    yy, xx = np.mgrid[0:h, 0:w]
    tint = np.array([amplitude, amplitude * 0.9, amplitude * 0.8], dtype=np.float32)
    for (px, py) in points:
        bump = np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * blob_sigma ** 2))
        img += bump.astype(np.float32)[:, :, None] * tint
    return np.clip(img, 0.0, 1.0)


def write_synthetic_dataset(root: Path, n_images=8, min_points=5, max_points=30,
                            h=128, w=128, seed=7) -> Path:
    """PNG images plus a JSON-lines annotation file; returns the latter's path."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n_images):
        n = int(rng.integers(min_points, max_points + 1))
        pts = np.stack([rng.uniform(10, w - 10, n), rng.uniform(10, h - 10, n)], axis=1)
        img = make_blob_image(pts, h=h, w=w, noise_seed=100 + i)
        Image.fromarray((img * 255).astype(np.uint8)).save(root / f"img{i}.png")
        lines.append(json.dumps({
            "image": f"img{i}.png",
            "points": [[float(x), float(y)] for x, y in pts],
            "weather": TAG_CYCLE[i % len(TAG_CYCLE)],
        }))
    ann = root / "train.jsonl"
    ann.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ann


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    return write_synthetic_dataset(root)


@pytest.fixture()
def tiny_model():
    return init_model(ModelConfig.tiny(), seed=0)


@pytest.fixture()
def tiny_model_f64():
    return init_model(ModelConfig.tiny(), seed=0).double()


def zero_biases(model: torch.nn.Module):
    """Make a 'zero-bias model': zero input leads to zero output.

    Zeroes every *.bias parameter plus the prototype bank (the bank is an
    input-independent additive parameter; non-zero prototypes would feed the
    feature stream through cross-attention even on a zero image).
    """
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith("bias") or name.endswith("prototypes"):
                param.zero_()
    return model
