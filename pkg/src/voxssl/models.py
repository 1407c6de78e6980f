"""Encoder, context network, task heads, segmentation decoder, checkpoints.

The encoder is a residual convolutional stack: a stem convolution, one
residual block per level, and 2x downsampling between levels, so the input
must divide by 2^(levels-1). Blocks use pre-activation GroupNorm and 3^d
kernels. The data plane is channels-last numpy; ``to_model_input`` converts
to the channels-first torch layout.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import (
    EmptySequence,
    IncompatibleCheckpoint,
    NotAMultiple,
    ShapeNotDivisible,
)
from .volume import Volume

PAPER_FILTERS = (32, 64, 128, 256, 512)


@dataclass(frozen=True)
class EncoderSpec:
    spatial_rank: int = 3
    in_channels: int = 1
    levels: int = 5
    filters: tuple[int, ...] = PAPER_FILTERS
    embedding_dim: int = 64

    def __post_init__(self):
        if self.spatial_rank not in (2, 3):
            raise ValueError("spatial_rank must be 2 or 3")
        if len(self.filters) != self.levels:
            raise ValueError("need one filter width per level")

    @property
    def reduction(self) -> int:
        return 2 ** (self.levels - 1)

    def fingerprint(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()
        ).hexdigest()


def desk_spec(spatial_rank: int = 3, in_channels: int = 1, levels: int = 3,
              width_factor: float = 0.25, embedding_dim: int = 64) -> EncoderSpec:
    """Scaled-down spec for CPU-sized experiments."""
    filters = tuple(max(4, int(round(f * width_factor))) for f in PAPER_FILTERS[:levels])
    return EncoderSpec(spatial_rank, in_channels, levels, filters, embedding_dim)


def _conv(rank: int):
    return nn.Conv3d if rank == 3 else nn.Conv2d


def _pool(rank: int):
    return nn.MaxPool3d if rank == 3 else nn.MaxPool2d


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


class ResBlock(nn.Module):
    """Pre-activation residual block: GN-ReLU-conv twice plus a skip."""

    def __init__(self, rank: int, cin: int, cout: int):
        super().__init__()
        conv = _conv(rank)
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = conv(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = conv(cout, cout, 3, padding=1)
        self.skip = conv(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(torch.relu(self.norm1(x)))
        h = self.conv2(torch.relu(self.norm2(h)))
        return h + self.skip(x)


class Encoder(nn.Module):
    """Patch/volume encoder emitting a fixed-size embedding."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        conv = _conv(spec.spatial_rank)
        self.stem = conv(spec.in_channels, spec.filters[0], 3, padding=1)
        blocks = [ResBlock(spec.spatial_rank, spec.filters[0], spec.filters[0])]
        for lvl in range(1, spec.levels):
            blocks.append(ResBlock(spec.spatial_rank, spec.filters[lvl - 1], spec.filters[lvl]))
        self.blocks = nn.ModuleList(blocks)
        self.down = _pool(spec.spatial_rank)(2)
        self.head = nn.Linear(spec.filters[-1], spec.embedding_dim)

    def _check_shape(self, x: torch.Tensor):
        expect_rank = self.spec.spatial_rank + 2
        if x.ndim != expect_rank:
            raise ShapeNotDivisible(
                f"expected {expect_rank}-d (batch, channel, *spatial) input, got {x.ndim}-d"
            )
        spatial = x.shape[2:]
        if any(s % self.spec.reduction for s in spatial):
            raise ShapeNotDivisible(
                f"spatial shape {tuple(spatial)} not divisible by {self.spec.reduction}"
            )

    def forward_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-level feature maps, shallowest first (for decoder skips)."""
        self._check_shape(x)
        feats = []
        h = self.stem(x)
        for lvl, block in enumerate(self.blocks):
            if lvl > 0:
                h = self.down(h)
            h = block(h)
            feats.append(h)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.forward_features(x)[-1]
        pooled = h.mean(dim=tuple(range(2, h.ndim)))
        return self.head(pooled)


def to_model_input(x, spatial_rank: int = 3) -> torch.Tensor:
    """Channels-last numpy -> channels-first torch.

    Accepts a Volume, a single (*spatial, C) array, or a (B, *spatial, C)
    batch; tensors are assumed channels-first already.
    """
    if isinstance(x, Volume):
        spatial_rank = x.spatial_rank
        x = x.data
    if isinstance(x, torch.Tensor):
        return x.float()
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == spatial_rank + 1:
        moved = np.moveaxis(x, -1, 0)
    elif x.ndim == spatial_rank + 2:
        moved = np.moveaxis(x, -1, 1)
    else:
        raise ShapeNotDivisible(
            f"cannot interpret array of rank {x.ndim} as rank-{spatial_rank} samples"
        )
    return torch.from_numpy(np.ascontiguousarray(moved))


@torch.inference_mode()
def encode(model: Encoder, x) -> np.ndarray:
    """Deterministic eval-mode embedding of one sample or a batch."""
    was_training = model.training
    model.eval()
    t = to_model_input(x, model.spec.spatial_rank)
    single = t.ndim == model.spec.spatial_rank + 1
    if single:
        t = t[None]
    out = model(t).cpu().numpy()
    if was_training:
        model.train()
    return out[0] if single else out


@dataclass(frozen=True)
class ContextNetSpec:
    embedding_dim: int = 64
    hidden_dim: int = 128
    code_dim: int = 1024


class ContextNet(nn.Module):
    """Recurrent aggregator: ordered embeddings -> one context code."""

    def __init__(self, spec: ContextNetSpec):
        super().__init__()
        self.spec = spec
        self.gru = nn.GRU(spec.embedding_dim, spec.hidden_dim, batch_first=True)
        self.proj = nn.Linear(spec.hidden_dim, spec.code_dim)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        single = embeddings.ndim == 2
        if single:
            embeddings = embeddings[None]
        if embeddings.shape[1] == 0:
            raise EmptySequence("context network needs at least one embedding")
        _, h_last = self.gru(embeddings)
        code = self.proj(h_last[-1])
        return code[0] if single else code


def contextualize(net: ContextNet, embeddings) -> np.ndarray:
    with torch.inference_mode():
        was_training = net.training
        net.eval()
        if not isinstance(embeddings, torch.Tensor):
            embeddings = torch.as_tensor(np.asarray(embeddings, dtype=np.float32))
        out = net(embeddings).cpu().numpy()
        if was_training:
            net.train()
    return out


@dataclass(frozen=True)
class HeadSpec:
    n_inputs: int        # how many embeddings are concatenated (27 for jigsaw)
    n_classes: int
    hidden_dim: int = 128


class ProjectionHead(nn.Module):
    """Hidden layer + ReLU + linear classifier; dropped after pretraining."""

    def __init__(self, embedding_dim: int, spec: HeadSpec):
        super().__init__()
        self.spec = spec
        self.net = nn.Sequential(
            nn.Linear(embedding_dim * spec.n_inputs, spec.hidden_dim),
            nn.ReLU(),
            nn.Linear(spec.hidden_dim, spec.n_classes),
        )

    def forward(self, x):
        return self.net(x)


class TaskClassifier(nn.Module):
    """Shared encoder + projection head over one or more input patches.

    forward takes (B, n_inputs, C, *spatial) and returns (B, n_classes);
    each of the n_inputs patches runs through the same encoder.
    """

    def __init__(self, encoder: Encoder, head_spec: HeadSpec):
        super().__init__()
        self.encoder = encoder
        self.head = ProjectionHead(encoder.spec.embedding_dim, head_spec)

    def forward(self, parts: torch.Tensor) -> torch.Tensor:
        b, k = parts.shape[:2]
        if k != self.head.spec.n_inputs:
            raise ShapeNotDivisible(
                f"expected {self.head.spec.n_inputs} patches per sample, got {k}"
            )
        flat = parts.reshape(b * k, *parts.shape[2:])
        emb = self.encoder(flat).reshape(b, k * self.encoder.spec.embedding_dim)
        return self.head(emb)


def attach_projection_head(encoder: Encoder, head_spec: HeadSpec) -> TaskClassifier:
    return TaskClassifier(encoder, head_spec)


class ConvBlock(nn.Module):
    def __init__(self, rank: int, cin: int, cout: int):
        super().__init__()
        conv = _conv(rank)
        self.net = nn.Sequential(
            conv(cin, cout, 3, padding=1), nn.GroupNorm(_groups(cout), cout), nn.ReLU(),
            conv(cout, cout, 3, padding=1), nn.GroupNorm(_groups(cout), cout), nn.ReLU(),
        )

    def forward(self, x):
        return self.net(x)


class SegmentationModel(nn.Module):
    """Encoder plus a mirror decoder with per-level skip connections."""

    def __init__(self, encoder: Encoder, num_classes: int):
        super().__init__()
        self.encoder = encoder
        spec = encoder.spec
        rank = spec.spatial_rank
        ups, blocks = [], []
        for lvl in range(spec.levels - 1, 0, -1):
            ups.append(nn.Upsample(scale_factor=2, mode="nearest"))
            blocks.append(ConvBlock(rank, spec.filters[lvl] + spec.filters[lvl - 1],
                                    spec.filters[lvl - 1]))
        self.ups = nn.ModuleList(ups)
        self.dec_blocks = nn.ModuleList(blocks)
        self.classify = _conv(rank)(spec.filters[0], num_classes, 1)
        self.num_classes = num_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.encoder.forward_features(x)
        h = feats[-1]
        for step, (up, block) in enumerate(zip(self.ups, self.dec_blocks)):
            skip = feats[len(feats) - 2 - step]
            h = block(torch.cat([up(h), skip], dim=1))
        return self.classify(h)


def attach_decoder(encoder: Encoder, num_classes: int = 3) -> SegmentationModel:
    return SegmentationModel(encoder, num_classes)


def inflate_input_layer(weights: torch.Tensor, old_channels: int, new_channels: int,
                        preserve_scale: bool = True) -> torch.Tensor:
    """Tile input-layer kernels across channels to accept more modalities.

    With preserve_scale, tiled weights are multiplied by old/new so a
    channel-tiled input reproduces the original pre-activation exactly.
    """
    if new_channels <= 0 or new_channels % old_channels:
        raise NotAMultiple(f"{new_channels} is not a positive multiple of {old_channels}")
    if weights.shape[1] != old_channels:
        raise NotAMultiple(f"weight tensor has {weights.shape[1]} input channels, "
                           f"expected {old_channels}")
    reps = new_channels // old_channels
    if reps == 1:
        return weights.clone()
    tiled = weights.repeat(1, reps, *([1] * (weights.ndim - 2)))
    if preserve_scale:
        tiled = tiled * (old_channels / new_channels)
    return tiled


def inflate_encoder(encoder: Encoder, new_channels: int,
                    preserve_scale: bool = True) -> Encoder:
    """New encoder accepting ``new_channels`` inputs, weights carried over."""
    spec = encoder.spec
    new_spec = EncoderSpec(spec.spatial_rank, new_channels, spec.levels,
                           spec.filters, spec.embedding_dim)
    out = Encoder(new_spec)
    state = {k: v.clone() for k, v in encoder.state_dict().items()}
    state["stem.weight"] = inflate_input_layer(
        state["stem.weight"], spec.in_channels, new_channels, preserve_scale)
    out.load_state_dict(state)
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class CheckpointState:
    weights: dict[str, np.ndarray]
    spec: EncoderSpec
    task: str
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return self.spec.fingerprint()


def checkpoint_from_encoder(encoder: Encoder, task: str, seed: int,
                            meta: dict | None = None) -> CheckpointState:
    weights = {k: v.detach().cpu().numpy().copy() for k, v in encoder.state_dict().items()}
    return CheckpointState(weights, encoder.spec, task, seed, meta or {})


def save_checkpoint(state: CheckpointState, path) -> Path:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_name(path.name + ".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "fingerprint": state.fingerprint,
        "spec": asdict(state.spec),
        "task": state.task,
        "seed": state.seed,
        "meta": state.meta,
    }
    np.savez(path, __meta__=np.frombuffer(
        json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
        **{f"w:{k}": v for k, v in state.weights.items()})
    return path


def load_checkpoint(path) -> CheckpointState:
    with np.load(Path(path)) as f:
        header = json.loads(bytes(f["__meta__"]).decode())
        weights = {k[2:]: f[k].copy() for k in f.files if k.startswith("w:")}
    spec_d = header["spec"]
    spec_d["filters"] = tuple(spec_d["filters"])
    spec = EncoderSpec(**spec_d)
    if spec.fingerprint() != header["fingerprint"]:
        raise IncompatibleCheckpoint("stored fingerprint does not match stored spec")
    return CheckpointState(weights, spec, header["task"], header["seed"], header["meta"])


def encoder_from_checkpoint(ckpt: CheckpointState, in_channels: int | None = None,
                            preserve_scale: bool = True) -> Encoder:
    """Rebuild the encoder; a differing channel count triggers inflation."""
    enc = Encoder(ckpt.spec)
    enc.load_state_dict({k: torch.from_numpy(v) for k, v in ckpt.weights.items()})
    if in_channels is None or in_channels == ckpt.spec.in_channels:
        return enc
    if in_channels % ckpt.spec.in_channels:
        raise IncompatibleCheckpoint(
            f"cannot adapt {ckpt.spec.in_channels}-channel weights to {in_channels} inputs"
        )
    return inflate_encoder(enc, in_channels, preserve_scale)
