"""Optimization loop: per-step losses, negative queue, checkpoints.

Batch size is 1: each step draws one training image, builds an
anchor/positive crop pair, runs the anchor through the full network and the
positive through the weather branch only, assembles the composite loss, and
applies a single Adam update. The anchor's (detached) query vector then
joins a FIFO queue that supplies negatives to later steps; queries from the
current image are never offered back as its own negatives.

Checkpoints are a versioned binary container: magic ``AWCCCKPT``, a u32
format version, a u64 payload length, the payload (config snapshot, named
tensors, optimizer state, queue entries, rng state), and a trailing SHA-256
checksum of the payload.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import CropPair, derive_rng, parse_annotations, sample_crop_pair
from .exceptions import CheckpointError, DataError
from .losses import (
    bayesian_count_loss,
    build_posterior_field,
    compact_prototype_loss,
    contrastive_loss,
    total_loss,
)
from .model import CrowdCounter, init_model

CHECKPOINT_MAGIC = b"AWCCCKPT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class NegativeQueue:
    """FIFO of flattened query vectors with their source image ids."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries: deque = deque()

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, vector: torch.Tensor, source_id: str) -> None:
        """Append a detached copy; evict the oldest entry once full."""
        self._entries.append((vector.detach().reshape(-1).clone(), source_id))
        while len(self._entries) > self.capacity:
            self._entries.popleft()

    def snapshot(self, exclude_id: str | None = None) -> list:
        """Current negatives, oldest first, minus entries from `exclude_id`."""
        return [vec for vec, sid in self._entries if sid != exclude_id]

    def entries(self) -> list:
        return [(vec, sid) for vec, sid in self._entries]


@dataclass
class StepReport:
    step: int
    l_cc: float | None = None
    l_con: float | None = None
    l_cp: float | None = None
    total: float | None = None
    queue_len: int = 0
    con_skipped: bool = False
    sample_skipped: bool = False

    def to_dict(self) -> dict:
        return {"step": self.step, "l_cc": self.l_cc, "l_con": self.l_con,
                "l_cp": self.l_cp, "total": self.total, "queue_len": self.queue_len}

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class TrainState:
    """Everything a step needs; checkpoints round-trip it bit-exactly."""

    model: CrowdCounter
    optimizer: torch.optim.Optimizer
    queue: NegativeQueue
    config: RunConfig
    step: int = 0
    master_seed: int = 0


def init_train_state(config: RunConfig) -> TrainState:
    model = init_model(config.model_config(), seed=config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    queue = NegativeQueue(config.queue_size)
    return TrainState(model=model, optimizer=optimizer, queue=queue,
                      config=config, step=0, master_seed=config.seed)


def _positive_queries(state: TrainState, pair: CropPair) -> torch.Tensor:
    model, cfg = state.model, state.config
    def branch():
        if cfg.label_conditioned:
            return model.label_queries(pair.positive.image, pair.positive.weather_tag).tokens
        return model.weather_queries(pair.positive.image).tokens
    if cfg.positive_gradient:
        return branch()
    with torch.no_grad():
        return branch()


def train_step(state: TrainState, pair: CropPair) -> StepReport:
    """One optimization step; mutates `state` in place and reports the losses.

    The contrastive term is skipped (and reported as skipped) while the
    queue holds no negative from another image. An anchor with zero points
    is skipped entirely when the background hypothesis is disabled.
    """
    cfg = state.config
    loss_cfg = cfg.loss_config()
    model = state.model
    anchor = pair.anchor

    if len(anchor.points) == 0 and not loss_cfg.background_enabled:
        warnings.warn(
            f"step {state.step}: {anchor.image_id} has no points and the "
            f"background hypothesis is off; sample skipped"
        )
        state.step += 1
        return StepReport(step=state.step, queue_len=len(state.queue), sample_skipped=True)

    model.train()
    if cfg.label_conditioned:
        out = model.forward_with_label(anchor.image, anchor.weather_tag)
    else:
        out = model(anchor.image)
    grid = out.density.grid

    field = build_posterior_field(
        anchor.points, grid.shape, model.config.output_stride, loss_cfg, dtype=grid.dtype
    )
    l_cc = bayesian_count_loss(grid, field)

    l_cp = compact_prototype_loss(model.bank) if loss_cfg.compact_weight != 0.0 else None

    l_con = None
    con_skipped = False
    if loss_cfg.contrast_weight != 0.0:
        negatives = state.queue.snapshot(exclude_id=anchor.image_id)
        if negatives:
            v_pos = _positive_queries(state, pair)
            l_con = contrastive_loss(
                out.queries.tokens, v_pos, negatives,
                loss_cfg.temperature, detach_positive=cfg.stop_positive_gradient,
            )
        else:
            con_skipped = True

    total = total_loss(l_cc, l_cp if l_cp is not None else 0.0,
                       l_con if l_con is not None else 0.0, loss_cfg)

    state.optimizer.zero_grad()
    total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.optimizer.step()

    state.queue.push(out.queries.tokens.detach().reshape(-1).clone(), anchor.image_id)
    state.step += 1
    cc = float(l_cc.detach())
    cp = None if l_cp is None else float(l_cp.detach())
    con = None if l_con is None else float(l_con.detach())
    # report the composite recomputed from the reported components so the
    # trace is exactly self-consistent (differs from the backprop tensor by
    # under one float32 ulp)
    reported_total = cc + loss_cfg.compact_weight * (cp or 0.0) \
        + loss_cfg.contrast_weight * (con or 0.0)
    return StepReport(
        step=state.step,
        l_cc=cc,
        l_con=con,
        l_cp=cp,
        total=reported_total,
        queue_len=len(state.queue),
        con_skipped=con_skipped,
    )


def push_negative(queue: NegativeQueue, vector: torch.Tensor, source_id: str) -> NegativeQueue:
    queue.push(vector, source_id)
    return queue


# -- checkpoint container ----------------------------------------------------


def save_checkpoint(state: TrainState, path) -> None:
    """Write the versioned container atomically (temp file + rename)."""
    payload_dict = {
        "run_config": state.config.to_dict(),
        "step": state.step,
        "master_seed": state.master_seed,
        "model_state": state.model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "queue_vectors": [vec for vec, _ in state.queue.entries()],
        "queue_ids": [sid for _, sid in state.queue.entries()],
        "torch_rng": torch.get_rng_state(),
    }
    buf = io.BytesIO()
    torch.save(payload_dict, buf)
    payload = buf.getvalue()
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(payload))
    digest = hashlib.sha256(payload).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(digest)
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainState:
    """Read, verify, and rebuild a TrainState; restores the torch RNG state."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size + 32:
        raise CheckpointError(f"{path}: truncated checkpoint (only {len(raw)} bytes)")
    magic, version, length = _HEADER.unpack(raw[:_HEADER.size])
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}; not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    payload = raw[_HEADER.size:_HEADER.size + length]
    digest = raw[_HEADER.size + length:_HEADER.size + length + 32]
    if len(payload) != length or len(digest) != 32:
        raise CheckpointError(f"{path}: truncated checkpoint payload")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch; file is corrupt")
    data = torch.load(io.BytesIO(payload), weights_only=False)

    config = RunConfig.from_dict(data["run_config"])
    model = init_model(config.model_config(), seed=config.seed)
    model.load_state_dict(data["model_state"])
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    optimizer.load_state_dict(data["optimizer_state"])
    queue = NegativeQueue(config.queue_size)
    for vec, sid in zip(data["queue_vectors"], data["queue_ids"]):
        queue.push(vec, sid)
    torch.set_rng_state(data["torch_rng"])
    return TrainState(model=model, optimizer=optimizer, queue=queue, config=config,
                      step=data["step"], master_seed=data["master_seed"])


# -- the loop ------------------------------------------------------------------


def run_training(config: RunConfig, resume=None, on_report=None) -> TrainState:
    """Train for `config.steps` steps, checkpointing on cadence.

    With `resume`, continues from the checkpoint's step counter using the
    checkpoint's model/loss settings; the step budget comes from `config`.
    """
    if config.deterministic:
        torch.manual_seed(config.seed)
        torch.set_num_threads(1)

    if resume is not None:
        state = load_checkpoint(resume)
        if state.config.model_config() != config.model_config():
            raise CheckpointError(
                "checkpoint model configuration does not match the supplied config"
            )
    else:
        state = init_train_state(config)

    annotations = config.resolve_annotations()
    descriptors = parse_annotations(annotations)
    if not descriptors:
        raise DataError(f"{annotations}: annotation file lists no images")

    crop_size = state.config.model_config().crop_size
    cache: dict = {}
    out_dir = Path(config.out_dir)

    for step in range(state.step, config.steps):
        rng = derive_rng(state.master_seed, step)
        idx = int(rng.integers(0, len(descriptors)))
        if idx not in cache:
            sample = descriptors[idx].load(crop_size=crop_size)
            if len(descriptors) <= 64:
                cache[idx] = sample
        else:
            sample = cache[idx]
        pair = sample_crop_pair(sample, crop_size, rng,
                                u_min=state.config.u_min, flip_prob=state.config.flip_prob)
        report = train_step(state, pair)
        if on_report is not None:
            on_report(report)
        if config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_checkpoint(state, out_dir / f"step{state.step:06d}.ckpt")

    save_checkpoint(state, out_dir / "final.ckpt")
    return state
