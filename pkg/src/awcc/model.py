"""Weather-adaptive crowd counting network.

The pipeline: a convolutional backbone extracts features at a fixed output
stride; a weather encoder pools them into a softmax weight vector over a
trainable bank of prototypes; the weighted prototype sum (plus a token-wise
MLP) yields input-dependent query tokens; a two-stage cross-attention
decoder first lets the query tokens gather weather-conditioned context from
the spatial features, then re-injects those tokens into the spatial map; a
three-block convolutional head regresses the non-negative density grid
whose sum is the predicted count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigError

WEATHER_LABEL_INDEX = {"haze": 0, "rain": 1, "snow": 2, "clear": 3}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class ModelConfig:
    preset: str = "tiny"
    num_prototypes: int = 4        # bank entries
    tokens_per_prototype: int = 8  # query tokens per entry
    channels: int = 32             # feature / token width
    output_stride: int = 8
    decoder_layers: int = 1
    decoder_heads: int = 1
    crop_size: int = 128
    pixel_mean: tuple = (0.0, 0.0, 0.0)
    pixel_std: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.channels % self.decoder_heads != 0:
            raise ConfigError(
                f"channels {self.channels} not divisible by decoder_heads {self.decoder_heads}"
            )
        if self.channels % 4 != 0:
            raise ConfigError(f"channels must be divisible by 4, got {self.channels}")
        if self.crop_size % self.output_stride != 0:
            raise ConfigError(
                f"crop_size {self.crop_size} not divisible by output_stride {self.output_stride}"
            )

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        """Full-size preset: 8 prototypes of 48 tokens x 512 channels."""
        args = dict(
            preset="paper", num_prototypes=8, tokens_per_prototype=48, channels=512,
            output_stride=8, decoder_layers=2, decoder_heads=8, crop_size=512,
            pixel_mean=IMAGENET_MEAN, pixel_std=IMAGENET_STD,
        )
        args.update(overrides)
        return cls(**args)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale preset with a shallow backbone; identity normalization."""
        args = dict(
            preset="tiny", num_prototypes=4, tokens_per_prototype=8, channels=32,
            output_stride=8, decoder_layers=1, decoder_heads=1, crop_size=128,
        )
        args.update(overrides)
        return cls(**args)

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "paper":
            return cls.paper(**overrides)
        if name == "tiny":
            return cls.tiny(**overrides)
        raise ConfigError(f"unknown preset {name!r}; expected 'paper' or 'tiny'")

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "num_prototypes": self.num_prototypes,
            "tokens_per_prototype": self.tokens_per_prototype,
            "channels": self.channels,
            "output_stride": self.output_stride,
            "decoder_layers": self.decoder_layers,
            "decoder_heads": self.decoder_heads,
            "crop_size": self.crop_size,
            "pixel_mean": list(self.pixel_mean),
            "pixel_std": list(self.pixel_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["pixel_mean"] = tuple(d.get("pixel_mean", (0.0, 0.0, 0.0)))
        d["pixel_std"] = tuple(d.get("pixel_std", (1.0, 1.0, 1.0)))
        return cls(**d)


@dataclass
class DensityMap:
    """Non-negative density grid; its sum is the predicted person count."""

    grid: torch.Tensor  # (h, w), every cell >= 0

    @property
    def count(self) -> float:
        return float(self.grid.sum().item())

    def numpy(self) -> np.ndarray:
        return self.grid.detach().cpu().numpy()


@dataclass
class WeatherQueries:
    """Query token matrix plus the bank weights that produced it."""

    tokens: torch.Tensor   # (N, C)
    weights: torch.Tensor  # (S,)


@dataclass
class ForwardResult:
    density: DensityMap
    queries: WeatherQueries  # post-MLP; what the decoder consumed
    weights: torch.Tensor    # (S,) softmax bank weights


def sinusoidal_position_encoding(h: int, w: int, channels: int,
                                 dtype=torch.float32, device=None) -> torch.Tensor:
    """2-D sine/cosine grid encoding, flattened row-major to (h*w, channels)."""
    half = channels // 2
    freq = torch.exp(
        -math.log(10000.0) * torch.arange(0, half, 2, dtype=dtype, device=device) / half
    )
    ys = torch.arange(h, dtype=dtype, device=device)[:, None] * freq[None, :]
    xs = torch.arange(w, dtype=dtype, device=device)[:, None] * freq[None, :]
    enc_y = torch.cat([torch.sin(ys), torch.cos(ys)], dim=1)  # (h, half)
    enc_x = torch.cat([torch.sin(xs), torch.cos(xs)], dim=1)  # (w, half)
    grid = torch.cat([
        enc_y[:, None, :].expand(h, w, half),
        enc_x[None, :, :].expand(h, w, half),
    ], dim=2)
    return grid.reshape(h * w, channels)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over unbatched (tokens, channels) tensors."""

    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        if channels % num_heads != 0:
            raise ConfigError(f"channels {channels} not divisible by heads {num_heads}")
        self.channels = channels
        self.num_heads = num_heads
        self.head_dim = channels // num_heads
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.out_proj = nn.Linear(channels, channels)

    def forward(self, query: torch.Tensor, key: torch.Tensor,
                value: torch.Tensor) -> torch.Tensor:
        tq, tk = query.shape[0], key.shape[0]
        if query.shape[1] != self.channels or key.shape[1] != self.channels:
            raise ValueError(
                f"attention expects channel width {self.channels}, "
                f"got query {tuple(query.shape)} / key {tuple(key.shape)}"
            )
        q = self.q_proj(query).reshape(tq, self.num_heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(key).reshape(tk, self.num_heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(value).reshape(tk, self.num_heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(tq, self.channels)
        return self.out_proj(out)


def _feed_forward(channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(channels, channels * 4),
        nn.ReLU(inplace=True),
        nn.Linear(channels * 4, channels),
    )


class DecoderLayer(nn.Module):
    """One two-stage cross-attention block (pre-norm residual sublayers).

    Stage (a): query tokens attend to the spatial features, producing
    weather-aware tokens. Stage (b): spatial features attend back to those
    tokens, so the output keeps its spatial shape for the regression head.
    Position encodings enter only through queries/keys, never the values,
    so zeroed sublayers leave the residual streams untouched.
    """

    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        self.token_norm_attn = nn.LayerNorm(channels)
        self.token_attn = MultiHeadAttention(channels, num_heads)
        self.token_norm_ffn = nn.LayerNorm(channels)
        self.token_ffn = _feed_forward(channels)
        self.feat_norm_attn = nn.LayerNorm(channels)
        self.feat_attn = MultiHeadAttention(channels, num_heads)
        self.feat_norm_ffn = nn.LayerNorm(channels)
        self.feat_ffn = _feed_forward(channels)

    def forward(self, tokens: torch.Tensor, feats: torch.Tensor,
                pos: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        t = tokens + self.token_attn(self.token_norm_attn(tokens), feats + pos, feats)
        t = t + self.token_ffn(self.token_norm_ffn(t))
        f = feats + self.feat_attn(self.feat_norm_attn(feats) + pos, t, t)
        f = f + self.feat_ffn(self.feat_norm_ffn(f))
        return t, f


def _vgg19_features(channels: int) -> nn.Sequential:
    # Standard 19-layer conv stack through the fourth pooling stage; the
    # final stage runs at 1/16 resolution and is upsampled back to 1/8.
    cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
           512, 512, 512, 512, "M", 512, 512, 512, 512]
    layers: list[nn.Module] = []
    in_ch = 3
    for v in cfg:
        if v == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            layers.append(nn.Conv2d(in_ch, v, 3, padding=1))
            layers.append(nn.ReLU(inplace=True))
            in_ch = v
    if in_ch != channels:
        raise ConfigError(f"paper backbone emits {in_ch} channels, config wants {channels}")
    return nn.Sequential(*layers)


def _tiny_features(channels: int) -> nn.Sequential:
    mid = max(8, channels // 2)
    return nn.Sequential(
        nn.Conv2d(3, mid, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2, 2),
        nn.Conv2d(mid, channels, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2, 2),
        nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2, 2),
    )


class WeatherBank(nn.Module):
    """Trainable prototype stack (entries x tokens x channels)."""

    def __init__(self, num_prototypes: int, tokens: int, channels: int, init_std: float = 0.02):
        super().__init__()
        self.prototypes = nn.Parameter(
            torch.empty(num_prototypes, tokens, channels).normal_(0.0, init_std)
        )

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[0]


def synthesize_weather_queries(prototypes: torch.Tensor,
                               weights: torch.Tensor) -> torch.Tensor:
    """Weighted sum of prototypes: tokens[n, c] = sum_s weights[s] * P[s, n, c]."""
    if weights.ndim != 1 or weights.shape[0] != prototypes.shape[0]:
        raise ValueError(
            f"weight vector length {tuple(weights.shape)} does not match "
            f"{prototypes.shape[0]} prototypes"
        )
    return (weights[:, None, None] * prototypes).sum(dim=0)


def label_conditioned_queries(bank: WeatherBank, label: str) -> torch.Tensor:
    """Select one prototype by weather label, bypassing the weight vector.

    Only defined for a 4-entry bank (haze, rain, snow, clear)."""
    if bank.num_prototypes != 4:
        raise ConfigError(
            f"label-conditioned queries need a 4-prototype bank, got {bank.num_prototypes}"
        )
    if label not in WEATHER_LABEL_INDEX:
        raise ValueError(f"unknown weather label {label!r}; expected one of "
                         f"{sorted(WEATHER_LABEL_INDEX)}")
    return bank.prototypes[WEATHER_LABEL_INDEX[label]]


class CrowdCounter(nn.Module):
    """The full counting network; see the module docstring for the dataflow."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.channels
        if config.preset == "paper":
            self.backbone = _vgg19_features(c)
        else:
            self.backbone = _tiny_features(c)
        self.weather_encoder = nn.Sequential(
            nn.Linear(c, c), nn.ReLU(inplace=True), nn.Linear(c, config.num_prototypes)
        )
        self.bank = WeatherBank(config.num_prototypes, config.tokens_per_prototype, c)
        self.query_mlp = nn.Sequential(nn.Linear(c, c), nn.ReLU(inplace=True), nn.Linear(c, c))
        self.decoder = nn.ModuleList(
            DecoderLayer(c, config.decoder_heads) for _ in range(config.decoder_layers)
        )
        head_mid = max(4, c // 2)
        head_low = max(2, c // 4)
        self.head = nn.Sequential(
            nn.Conv2d(c, head_mid, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(head_mid, head_low, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(head_low, 1, 3, padding=1), nn.ReLU(inplace=True),
        )

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    # -- input handling -------------------------------------------------

    def prepare_image(self, image) -> torch.Tensor:
        """[0,1] HxWx3 array (or CxHxW tensor) -> standardized (3, H, W)."""
        if isinstance(image, np.ndarray):
            t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)
        else:
            t = image
        t = t.to(self.dtype)
        mean = torch.tensor(self.config.pixel_mean, dtype=self.dtype)[:, None, None]
        std = torch.tensor(self.config.pixel_std, dtype=self.dtype)[:, None, None]
        return (t - mean) / std

    # -- pipeline stages -------------------------------------------------

    def extract_features(self, image) -> torch.Tensor:
        """Backbone features at the configured stride, shape (C, H/s, W/s)."""
        t = self.prepare_image(image)
        h, w = t.shape[1], t.shape[2]
        s = self.config.output_stride
        if h % s or w % s:
            raise ValueError(
                f"input {w}x{h} not divisible by output_stride {s}; "
                f"pad right/bottom first (evaluation.infer_count does this)"
            )
        feats = self.backbone(t.unsqueeze(0))
        target = (h // s, w // s)
        if feats.shape[-2:] != target:
            feats = F.interpolate(feats, size=target, mode="bilinear", align_corners=False)
        return feats.squeeze(0)

    def weather_weight_vector(self, feats: torch.Tensor) -> torch.Tensor:
        """Softmax bank weights from globally pooled features."""
        pooled = feats.mean(dim=(1, 2))
        return torch.softmax(self.weather_encoder(pooled), dim=-1)

    def apply_query_mlp(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.query_mlp(tokens)

    def decode(self, feats: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        """Run the two-stage decoder; returns spatial features, shape kept."""
        if feats.shape[0] != self.config.channels:
            raise ValueError(
                f"feature width {feats.shape[0]} != channels {self.config.channels}"
            )
        c, h, w = feats.shape
        flat = feats.reshape(c, h * w).transpose(0, 1)  # (hw, C)
        pos = sinusoidal_position_encoding(h, w, c, dtype=flat.dtype, device=flat.device)
        tokens = queries
        for layer in self.decoder:
            tokens, flat = layer(tokens, flat, pos)
        return flat.transpose(0, 1).reshape(c, h, w)

    def regress_density(self, feats: torch.Tensor) -> DensityMap:
        grid = self.head(feats.unsqueeze(0)).squeeze(0).squeeze(0)
        return DensityMap(grid)

    # -- end-to-end entry points ------------------------------------------

    def weather_queries(self, image) -> WeatherQueries:
        """Weather branch only: features -> weights -> synthesis -> MLP."""
        feats = self.extract_features(image)
        weights = self.weather_weight_vector(feats)
        tokens = synthesize_weather_queries(self.bank.prototypes, weights)
        return WeatherQueries(self.apply_query_mlp(tokens), weights)

    def forward(self, image) -> ForwardResult:
        feats = self.extract_features(image)
        weights = self.weather_weight_vector(feats)
        tokens = synthesize_weather_queries(self.bank.prototypes, weights)
        queries = WeatherQueries(self.apply_query_mlp(tokens), weights)
        decoded = self.decode(feats, queries.tokens)
        return ForwardResult(self.regress_density(decoded), queries, weights)

    def forward_with_label(self, image, label: str) -> ForwardResult:
        """Label-conditioned variant: one prototype picked by weather tag."""
        feats = self.extract_features(image)
        tokens = label_conditioned_queries(self.bank, label)
        onehot = torch.zeros(self.config.num_prototypes, dtype=feats.dtype)
        onehot[WEATHER_LABEL_INDEX[label]] = 1.0
        queries = WeatherQueries(self.apply_query_mlp(tokens), onehot)
        decoded = self.decode(feats, queries.tokens)
        return ForwardResult(self.regress_density(decoded), queries, onehot)

    def label_queries(self, image, label: str) -> WeatherQueries:
        """Weather branch of the label-conditioned variant."""
        tokens = label_conditioned_queries(self.bank, label)
        onehot = torch.zeros(self.config.num_prototypes, dtype=self.dtype)
        onehot[WEATHER_LABEL_INDEX[label]] = 1.0
        return WeatherQueries(self.apply_query_mlp(tokens), onehot)


def init_model(config: ModelConfig, seed: int = 0) -> CrowdCounter:
    """Build a model with all parameters drawn reproducibly from `seed`."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = CrowdCounter(config)
    return model


def load_backbone_weights(model: CrowdCounter, path) -> None:
    """Load backbone weights from an .npz name->tensor container.

    Every backbone parameter/buffer must be present with a matching shape;
    offending tensors are listed in the raised error.
    """
    try:
        archive = np.load(path)
    except Exception as exc:  # noqa: BLE001
        raise ConfigError(f"cannot read backbone weights {path}: {exc}") from exc
    state = model.backbone.state_dict()
    problems = []
    new_state = {}
    for name, tensor in state.items():
        if name not in archive:
            problems.append(f"missing {name} (expected shape {tuple(tensor.shape)})")
            continue
        arr = archive[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            problems.append(
                f"{name}: file shape {tuple(arr.shape)} != model shape {tuple(tensor.shape)}"
            )
            continue
        new_state[name] = torch.from_numpy(arr).to(tensor.dtype)
    if problems:
        raise ConfigError(
            "backbone weight file incompatible with declared backbone:\n  "
            + "\n  ".join(problems)
        )
    model.backbone.load_state_dict(new_state)
