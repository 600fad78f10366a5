"""Training objectives.

Three terms drive optimization:

* a point-supervised counting loss: per-cell posteriors over the annotated
  points (plus a dummy background hypothesis) turn the density grid into
  per-point expected counts, each pulled toward 1 (background toward 0);
* an InfoNCE-style contrastive loss tying the anchor's query tokens to the
  overlapping positive crop's tokens against queued negatives;
* a compactness penalty summing |cosine| over all ordered prototype pairs.

The composite objective is  count_loss + w_cp * compact + w_con * contrast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import ConfigError, NumericalError
from .model import DensityMap

_EPS = 1e-12


@dataclass
class LossConfig:
    compact_weight: float = 1.0       # scale on the prototype-compactness term
    contrast_weight: float = 1.0      # scale on the contrastive term
    temperature: float = 0.2
    queue_size: int = 64              # negatives retained for the contrastive term
    sigma: float = 8.0                # Gaussian width of the point likelihoods, px
    background_margin: float | None = None  # dummy-background distance, px; None -> 15% of side
    background_enabled: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.queue_size < 1:
            raise ConfigError(f"queue_size must be >= 1, got {self.queue_size}")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")

    def resolve_margin(self, side_px: float) -> float:
        return self.background_margin if self.background_margin is not None else 0.15 * side_px

    def to_dict(self) -> dict:
        return {
            "compact_weight": self.compact_weight,
            "contrast_weight": self.contrast_weight,
            "temperature": self.temperature,
            "queue_size": self.queue_size,
            "sigma": self.sigma,
            "background_margin": self.background_margin,
            "background_enabled": self.background_enabled,
        }


@dataclass
class PosteriorField:
    """Column-stochastic posteriors, rows = (background, point 1..L), cols = cells.

    Row 0 is identically zero when the background hypothesis is disabled.
    Cell k is centered at stride * (col + 0.5, row + 0.5).
    """

    posteriors: torch.Tensor  # (L+1, K)
    grid_shape: tuple
    sigma: float
    background_margin: float
    background_enabled: bool

    @property
    def num_points(self) -> int:
        return self.posteriors.shape[0] - 1


def build_posterior_field(points, grid_shape, output_stride: int,
                          config: LossConfig, dtype=torch.float32) -> PosteriorField:
    """Per-cell posteriors over annotated points plus a dummy background.

    The likelihood of point i at cell k is exp(-||c_k - z_i||^2 / (2 sigma^2));
    the background likelihood is exp(-(d - m_k)^2 / (2 sigma^2)) with m_k the
    distance from the cell center to its nearest point and d the margin.
    Posteriors normalize the likelihoods per cell (computed in log space, so
    distant cells never divide by zero).
    """
    if config.sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {config.sigma}")
    rows, cols = int(grid_shape[0]), int(grid_shape[1])
    if rows <= 0 or cols <= 0:
        raise ValueError(f"grid dims must be positive, got {grid_shape}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    num_points = len(pts)
    if num_points == 0 and not config.background_enabled:
        raise ValueError(
            "at least one annotated point is required when the background "
            "hypothesis is disabled (the loss degenerates otherwise)"
        )
    margin = config.resolve_margin(min(rows, cols) * output_stride)

    k = rows * cols
    if num_points == 0:
        posteriors = torch.ones(1, k, dtype=dtype)
        return PosteriorField(posteriors, (rows, cols), config.sigma, margin, True)

    cy = (np.arange(rows, dtype=np.float64) + 0.5) * output_stride
    cx = (np.arange(cols, dtype=np.float64) + 0.5) * output_stride
    gx, gy = np.meshgrid(cx, cy)  # (rows, cols), row-major flatten
    centers = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)  # (K, 2)

    d2 = ((centers[None, :, :] - pts[:, None, :]) ** 2).sum(axis=2)  # (L, K)
    denom = 2.0 * config.sigma ** 2
    log_lik = -d2 / denom
    if config.background_enabled:
        nearest = np.sqrt(d2.min(axis=0))
        log_bg = -((margin - nearest) ** 2) / denom
        stacked = np.concatenate([log_bg[None, :], log_lik], axis=0)
        shifted = stacked - stacked.max(axis=0, keepdims=True)
        expd = np.exp(shifted)
        posteriors = expd / expd.sum(axis=0, keepdims=True)
    else:
        shifted = log_lik - log_lik.max(axis=0, keepdims=True)
        expd = np.exp(shifted)
        normed = expd / expd.sum(axis=0, keepdims=True)
        posteriors = np.concatenate([np.zeros((1, k)), normed], axis=0)
    return PosteriorField(
        torch.as_tensor(posteriors, dtype=dtype), (rows, cols),
        config.sigma, margin, config.background_enabled,
    )


def bayesian_count_loss(density, field: PosteriorField) -> torch.Tensor:
    """|sum_k P0(k) D_k| + sum_i |1 - sum_k Pi(k) D_k|, differentiable in D."""
    grid = density.grid if isinstance(density, DensityMap) else density
    if tuple(grid.shape) != tuple(field.grid_shape):
        raise ValueError(
            f"density grid {tuple(grid.shape)} does not match posterior grid "
            f"{tuple(field.grid_shape)}"
        )
    flat = grid.reshape(-1)
    expected = field.posteriors.to(flat.dtype) @ flat  # (L+1,)
    background_term = expected[0].abs()
    point_terms = (1.0 - expected[1:]).abs().sum() if field.num_points else flat.sum() * 0.0
    return background_term + point_terms


def _flat(vec: torch.Tensor) -> torch.Tensor:
    return vec.reshape(-1)


def _checked_norm(vec: torch.Tensor, what: str) -> torch.Tensor:
    n = torch.linalg.vector_norm(vec)
    if float(n.detach()) == 0.0:
        raise NumericalError(f"{what} has zero norm; cosine similarity undefined")
    return n


def cosine_similarity_flat(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine of flattened tensors; raises on zero-norm inputs."""
    fa, fb = _flat(a), _flat(b)
    if fa.shape != fb.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    na = _checked_norm(fa, "first argument")
    nb = _checked_norm(fb, "second argument")
    return (fa * fb).sum() / (na * nb).clamp_min(_EPS)


def contrastive_loss(v: torch.Tensor, v_pos: torch.Tensor, negatives,
                     temperature: float, detach_positive: bool = False) -> torch.Tensor:
    """InfoNCE over cosine similarities of flattened query matrices.

    -log[ exp(s+/t) / (exp(s+/t) + sum_r exp(s-_r/t)) ], computed via
    logsumexp. Negatives are treated as constants; gradients reach `v` and
    (unless `detach_positive`) `v_pos`.
    """
    negatives = list(negatives)
    if not negatives:
        raise ValueError("contrastive loss needs at least one negative sample")
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if detach_positive:
        v_pos = v_pos.detach()
    s_pos = cosine_similarity_flat(v, v_pos)
    sims = [s_pos] + [cosine_similarity_flat(v, n.detach()) for n in negatives]
    logits = torch.stack(sims) / temperature
    return torch.logsumexp(logits, dim=0) - logits[0]


def compact_prototype_loss(prototypes) -> torch.Tensor:
    """Sum of |cosine(P_i, P_j)| over ordered pairs i != j of flattened prototypes."""
    if hasattr(prototypes, "prototypes"):  # accept a WeatherBank
        prototypes = prototypes.prototypes
    s = prototypes.shape[0]
    if s < 2:
        raise ValueError(f"need at least two prototypes, got {s}")
    flat = prototypes.reshape(s, -1)
    norms = torch.linalg.vector_norm(flat, dim=1)
    if (norms == 0.0).any():
        idx = int((norms == 0.0).nonzero()[0])
        raise NumericalError(f"prototype {idx} has zero norm; cosine undefined")
    gram = (flat @ flat.T) / torch.outer(norms, norms).clamp_min(_EPS)
    off_diag = ~torch.eye(s, dtype=torch.bool)
    return gram[off_diag].abs().sum()


def _check_finite(value, name: str):
    tensor = torch.as_tensor(value)
    if not torch.isfinite(tensor).all():
        raise NumericalError(f"loss term {name} is non-finite: {float(tensor)}")


def total_loss(l_cc, l_cp, l_con, config: LossConfig):
    """Composite objective: l_cc + compact_weight * l_cp + contrast_weight * l_con."""
    _check_finite(l_cc, "count")
    _check_finite(l_cp, "compact")
    _check_finite(l_con, "contrast")
    total = l_cc + config.compact_weight * l_cp + config.contrast_weight * l_con
    _check_finite(total, "total")
    return total
