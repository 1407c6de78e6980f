"""Pretraining and fine-tuning harness.

``pretrain`` runs one proxy task end-to-end and emits an encoder checkpoint;
``finetune`` trains a segmentation model on a labeled fraction of the train
split (optionally warm-started from a checkpoint, with the encoder frozen for
the first warm-up epochs) and reports per-epoch validation Dice; ``sweep``
crosses tasks x fractions x seeds, always including the from-scratch
baseline, and writes a CSV plus data-efficiency and convergence plots.

Reproducibility: every random draw descends from the config seed. Batch
order during fine-tuning depends only on (seed, fraction, epoch), never on
the task, so pretrained and scratch arms consume byte-identical batches.
Rerunning with the same config and seed in single-threaded deterministic
mode reproduces metrics exactly.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch

from .errors import EmptyDataset, IncompatibleCheckpoint, TaskConfigMismatch
from .losses import TripletConfig, cross_entropy, info_nce, triplet
from .metrics import dice_per_class
from .models import (
    CheckpointState,
    ContextNet,
    ContextNetSpec,
    Encoder,
    EncoderSpec,
    HeadSpec,
    SegmentationModel,
    TaskClassifier,
    attach_decoder,
    checkpoint_from_encoder,
    desk_spec,
    encoder_from_checkpoint,
    save_checkpoint,
    to_model_input,
)
from .permutations import PermutationSet, generate_permutation_set
from .synth import load_mask
from .tasks import (
    LatticeConfig,
    build_cpc_sample,
    build_exemplar_triplet,
    build_jigsaw_sample,
    build_rotation_sample,
    build_rpl_sample,
)
from .transforms import TransformConfig
from .volume import DatasetManifest, Volume, load_volume

SCHEMA_VERSION = 1
TASKS = ("cpc", "rpl", "jigsaw", "rotation", "exemplar")

# per-task sampling parameters sized for 32^3 desk volumes; override any of
# these through TrainConfig.task_params. samples_per_volume is the per-task
# sample count drawn from each volume per epoch: tasks with many classes need
# more draws than one pass over a small corpus provides.
DESK_TASK_PARAMS = {
    "cpc": {"patch_size": 8, "overlap": 0.5, "pyramid_height": 3,
            "steps": (1, 2), "n_negatives": 10, "code_dim": 1024,
            "samples_per_volume": 1},
    "rpl": {"n": 3, "jitter": 1, "samples_per_volume": 8},
    "jigsaw": {"n": 3, "jitter": 1, "num_permutations": 100,
               "samples_per_volume": 2},
    "rotation": {"samples_per_volume": 1},
    "exemplar": {"margin": 1.0, "samples_per_volume": 1},
}


@dataclass
class TrainConfig:
    """Optimization settings shared by pretraining and fine-tuning.

    ``epochs`` applies to whichever loop the config is handed to; sweeps
    take a separate pretraining epoch count. ``task_params`` overrides the
    per-task sampling defaults and ``encoder_params`` the desk encoder
    (levels, width_factor, embedding_dim).
    """

    task: str
    lr_pretrain: float = 0.001
    lr_finetune: float = 1e-5
    warmup_epochs: int = 5
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    label_fractions: tuple[float, ...] = (0.05, 0.1, 0.25, 0.5, 1.0)
    num_classes: int = 3
    seg_loss: str = "ce_dice"
    class_weights: str | tuple = "balanced"
    task_params: dict = field(default_factory=dict)
    encoder_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS and self.task != "scratch":
            raise TaskConfigMismatch(f"unknown task {self.task!r}")
        if self.lr_pretrain <= 0 or self.lr_finetune <= 0:
            raise TaskConfigMismatch("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise TaskConfigMismatch("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise TaskConfigMismatch(
                f"warmup_epochs {self.warmup_epochs} outside 0..{self.epochs}"
            )
        self.label_fractions = tuple(float(f) for f in self.label_fractions)
        if any(not 0 < f <= 1 for f in self.label_fractions):
            raise TaskConfigMismatch("label fractions must lie in (0, 1]")
        if self.num_classes < 2:
            raise TaskConfigMismatch("segmentation needs >= 2 classes")
        if self.seg_loss not in ("ce_dice", "ce"):
            raise TaskConfigMismatch(f"unknown seg_loss {self.seg_loss!r}")
        if isinstance(self.class_weights, str):
            if self.class_weights not in ("balanced", "none"):
                raise TaskConfigMismatch(
                    f"unknown class_weights {self.class_weights!r}")
        else:
            self.class_weights = tuple(float(w) for w in self.class_weights)
            if len(self.class_weights) != self.num_classes:
                raise TaskConfigMismatch("need one class weight per class")
            if any(w <= 0 for w in self.class_weights):
                raise TaskConfigMismatch("class weights must be positive")


def config_hash(payload: dict) -> str:
    """Stable 12-hex digest of a JSON-serializable config payload."""
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def run_id(kind: str, cfg: TrainConfig, fraction: float | None = None,
           task: str | None = None) -> str:
    payload = {"kind": kind, "task": task or cfg.task, "fraction": fraction,
               "config": asdict(cfg)}
    return f"{kind}-{task or cfg.task}-{config_hash(payload)}"


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    """Per-epoch metrics plus enough context to reproduce the run."""

    kind: str                      # "pretrain" or "finetune"
    task: str
    seed: int
    fraction: float | None
    config: dict
    epochs: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None
    notes: dict = field(default_factory=dict)

    def metric_curve(self, key: str) -> list[float]:
        return [float(e[key]) for e in self.epochs]

    def final_metric(self, key: str) -> float:
        if not self.epochs:
            raise EmptyDataset("record has no epochs")
        return float(self.epochs[-1][key])

    def to_payload(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    def save(self, run_dir: str | Path) -> Path:
        """Write record.json plus an epochs.csv with one row per epoch."""
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "record.json").write_text(
            json.dumps(self.to_payload(), sort_keys=True, indent=1) + "\n")
        if self.epochs:
            keys = list(self.epochs[0])
            with open(run_dir / "epochs.csv", "w", newline="") as fh:
                writer = csv.DictWriter(fh, ["schema_version", *keys])
                writer.writeheader()
                for row in self.epochs:
                    writer.writerow({"schema_version": SCHEMA_VERSION, **row})
        return run_dir

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunRecord":
        payload = json.loads((Path(run_dir) / "record.json").read_text())
        payload.pop("schema_version", None)
        return cls(**payload)


class ThresholdResult(NamedTuple):
    epoch: int
    reached: bool


def epochs_to_threshold(record: RunRecord, threshold_ratio: float,
                        key: str = "dice_fg") -> ThresholdResult:
    """First epoch whose validation metric reaches ratio x the final value.

    When no epoch reaches the target (possible for ratios above 1), the
    final epoch index is returned with ``reached=False``.
    """
    curve = record.metric_curve(key)
    if not curve:
        raise EmptyDataset("record has no epochs")
    target = threshold_ratio * curve[-1]
    for e, v in enumerate(curve):
        if v >= target:
            return ThresholdResult(e, True)
    return ThresholdResult(len(curve) - 1, False)


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------

def load_split(manifest: DatasetManifest, split: str = "train") -> list[Volume]:
    ids = manifest.splits.get(split, [])
    return [load_volume(manifest.volume_path(i)) for i in ids]


def load_labeled(manifest: DatasetManifest,
                 ids: Sequence[str]) -> tuple[list[Volume], list[np.ndarray]]:
    vols = [load_volume(manifest.volume_path(i)) for i in ids]
    masks = [load_mask(manifest, i) for i in ids]
    return vols, masks


def deterministic_mode(threads: int = 1):
    """Bitwise run-to-run reproducibility at the cost of parallelism."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, *keys]))


def _sample_seed(seed: int, epoch: int, index: int) -> int:
    seq = np.random.SeedSequence([seed & 0xFFFFFFFF, 0x5EED, epoch, index])
    return int(seq.generate_state(1)[0])


def _fraction_token(fraction: float) -> int:
    return int(round(float(fraction) * 1_000_000))


def _chunks(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield [int(i) for i in order[start:start + size]]


def _parts_tensor(arrs: list[np.ndarray]) -> torch.Tensor:
    # (B, K, *patch, C) channels-last -> (B, K, C, *patch)
    stacked = np.stack(arrs).astype(np.float32, copy=False)
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(stacked, -1, 2)))


def _check_divisible(shape, reduction: int, what: str):
    if any(s % reduction for s in shape):
        raise TaskConfigMismatch(
            f"{what} shape {tuple(shape)} not divisible by the encoder "
            f"reduction {reduction}"
        )


def encoder_spec_for(rank: int, channels: int, params: dict):
    return desk_spec(spatial_rank=rank, in_channels=channels, **params)


# ---------------------------------------------------------------------------
# Proxy-task drivers
# ---------------------------------------------------------------------------

_PSET_CACHE: dict[tuple, PermutationSet] = {}


def _cached_pset(m: int, count: int, seed: int) -> PermutationSet:
    key = (m, count, seed)
    if key not in _PSET_CACHE:
        _PSET_CACHE[key] = generate_permutation_set(m, count, seed=seed)
    return _PSET_CACHE[key]


class _Driver:
    """One proxy task: owns the trainable modules and builds batch losses."""

    encoder: Encoder
    modules: torch.nn.Module

    def batch_loss(self, vols: list[Volume], seeds: list[int]):
        raise NotImplementedError


class _RotationDriver(_Driver):
    def __init__(self, cfg, spec, shape, params):
        _check_divisible(shape, 2 ** (spec.levels - 1), "volume")
        n_classes = 10 if spec.spatial_rank == 3 else 4
        self.modules = TaskClassifier(Encoder(spec), HeadSpec(1, n_classes))
        self.encoder = self.modules.encoder

    def batch_loss(self, vols, seeds):
        samples = [build_rotation_sample(v, s) for v, s in zip(vols, seeds)]
        parts = _parts_tensor([s.rotated.data[None] for s in samples])
        labels = torch.tensor([s.label for s in samples])
        return cross_entropy(self.modules(parts), labels)


class _RPLDriver(_Driver):
    def __init__(self, cfg, spec, shape, params):
        self.n, self.jitter = params["n"], params["jitter"]
        patch = [e // self.n - 2 * self.jitter for e in shape]
        if min(patch) < 1:
            raise TaskConfigMismatch(
                f"grid n={self.n} jitter={self.jitter} leaves no patch in {shape}")
        _check_divisible(patch, 2 ** (spec.levels - 1), "grid patch")
        n_classes = self.n ** spec.spatial_rank - 1
        self.modules = TaskClassifier(Encoder(spec), HeadSpec(2, n_classes))
        self.encoder = self.modules.encoder

    def batch_loss(self, vols, seeds):
        samples = [build_rpl_sample(v, self.n, self.jitter, s)
                   for v, s in zip(vols, seeds)]
        parts = _parts_tensor([np.stack([s.center_patch, s.query_patch])
                               for s in samples])
        labels = torch.tensor([s.label for s in samples])
        return cross_entropy(self.modules(parts), labels)


class _JigsawDriver(_Driver):
    def __init__(self, cfg, spec, shape, params):
        self.n, self.jitter = params["n"], params["jitter"]
        patch = [e // self.n - 2 * self.jitter for e in shape]
        if min(patch) < 1:
            raise TaskConfigMismatch(
                f"grid n={self.n} jitter={self.jitter} leaves no patch in {shape}")
        _check_divisible(patch, 2 ** (spec.levels - 1), "grid patch")
        m = self.n ** spec.spatial_rank
        self.pset = _cached_pset(m, params["num_permutations"], cfg.seed)
        self.modules = TaskClassifier(Encoder(spec), HeadSpec(m, len(self.pset)))
        self.encoder = self.modules.encoder

    def batch_loss(self, vols, seeds):
        samples = [build_jigsaw_sample(v, self.n, self.jitter, self.pset, s)
                   for v, s in zip(vols, seeds)]
        parts = _parts_tensor([s.patch_sequence for s in samples])
        labels = torch.tensor([s.label for s in samples])
        return cross_entropy(self.modules(parts), labels)


class _CPCDriver(_Driver):
    def __init__(self, cfg, spec, shape, params):
        self.lattice = LatticeConfig(params["patch_size"], params["overlap"])
        self.height = params["pyramid_height"]
        self.steps = tuple(int(s) for s in params["steps"])
        self.n_negatives = params["n_negatives"]
        patch = self.lattice.patch_size
        _check_divisible([patch], 2 ** (spec.levels - 1), "lattice patch")
        stride = max(1, int(round(patch * (1 - self.lattice.overlap_fraction))))
        rows = (shape[0] - patch) // stride + 1
        if rows < self.height + max(self.steps):
            raise TaskConfigMismatch(
                f"{rows} lattice rows cannot fit pyramid height {self.height} "
                f"plus step {max(self.steps)}"
            )
        self.encoder = Encoder(spec)
        self.context = ContextNet(ContextNetSpec(
            embedding_dim=spec.embedding_dim, code_dim=params["code_dim"]))
        self.heads = torch.nn.ModuleList(
            torch.nn.Linear(params["code_dim"], spec.embedding_dim)
            for _ in self.steps)
        self.modules = torch.nn.ModuleDict({
            "encoder": self.encoder, "context": self.context,
            "heads": self.heads,
        })

    def batch_loss(self, vols, seeds):
        samples = [build_cpc_sample(v, self.lattice, self.height, self.steps,
                                    self.n_negatives, s)
                   for v, s in zip(vols, seeds)]
        # one encoder pass over every patch in the batch, then split
        groups = [np.concatenate([s.context_patches, s.target_patches,
                                  s.negatives]) for s in samples]
        sizes = [len(g) for g in groups]
        emb = self.encoder(to_model_input(np.concatenate(groups),
                                          vols[0].spatial_rank))
        losses = []
        for s, e in zip(samples, torch.split(emb, sizes)):
            n_ctx = len(s.context_patches)
            n_tgt = len(s.target_patches)
            ctx, tgt, neg = e[:n_ctx], e[n_ctx:n_ctx + n_tgt], e[n_ctx + n_tgt:]
            code = self.context(ctx)
            for k in range(n_tgt):
                losses.append(info_nce(self.heads[k](code), tgt[k], neg))
        return torch.stack(losses).mean()


class _ExemplarDriver(_Driver):
    def __init__(self, cfg, spec, shape, params):
        _check_divisible(shape, 2 ** (spec.levels - 1), "volume")
        if cfg.batch_size < 2:
            raise TaskConfigMismatch("exemplar needs batch_size >= 2")
        self.triplet_cfg = TripletConfig(params["margin"])
        self.transform_cfg = TransformConfig(seed=cfg.seed)
        self.encoder = Encoder(spec)
        self.modules = self.encoder

    def batch_loss(self, vols, seeds):
        if len(vols) < 2:
            return None  # leftover singleton batch has no negative
        trips = [build_exemplar_triplet(vols, i, self.transform_cfg, s)
                 for i, s in enumerate(seeds)]
        rank = vols[0].spatial_rank
        anchors = self.encoder(to_model_input(
            np.stack([v.data for v in vols]), rank))
        positives = self.encoder(to_model_input(
            np.stack([t.positive.data for t in trips]), rank))
        negatives = anchors[[t.negative_index for t in trips]]
        return triplet(anchors, positives, negatives, self.triplet_cfg)


_DRIVERS = {
    "rotation": _RotationDriver,
    "rpl": _RPLDriver,
    "jigsaw": _JigsawDriver,
    "cpc": _CPCDriver,
    "exemplar": _ExemplarDriver,
}


def make_driver(cfg: TrainConfig, rank: int, channels: int,
                shape: tuple[int, ...]) -> _Driver:
    """Instantiate the proxy task, surfacing config errors before training."""
    if cfg.task not in _DRIVERS:
        raise TaskConfigMismatch(f"cannot pretrain task {cfg.task!r}")
    params = dict(DESK_TASK_PARAMS[cfg.task])
    # Keys belonging to a different task are ignored, not rejected, so one
    # shared config can drive a sweep over several tasks.
    known = set().union(*(d.keys() for d in DESK_TASK_PARAMS.values()))
    unknown = set(cfg.task_params) - known
    if unknown:
        raise TaskConfigMismatch(f"unknown task_params: {sorted(unknown)}")
    params.update({k: v for k, v in cfg.task_params.items() if k in params})
    per_volume = int(params.pop("samples_per_volume", 1))
    if per_volume < 1:
        raise TaskConfigMismatch(
            f"samples_per_volume must be >= 1, got {per_volume}")
    spec = encoder_spec_for(rank, channels, cfg.encoder_params)
    driver = _DRIVERS[cfg.task](cfg, spec, shape, params)
    driver.samples_per_volume = per_volume
    return driver


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

def pretrain(dataset: DatasetManifest, cfg: TrainConfig,
             out_dir: str | Path | None = None, log: bool = True,
             run_dir: str | Path | None = None) -> CheckpointState:
    """Train one proxy task on the train split; returns the encoder checkpoint.

    The per-epoch loss history travels in the checkpoint meta. Artifacts
    (encoder.npz, record.json, epochs.csv) are persisted into ``run_dir``
    when given, or into a config-hash-named directory under ``out_dir``.
    """
    if cfg.task == "scratch":
        raise TaskConfigMismatch("scratch is the no-pretraining baseline")
    vols = load_split(dataset, "train")
    if not vols:
        raise EmptyDataset("manifest has no train volumes")
    start = time.perf_counter()
    torch.manual_seed(_sample_seed(cfg.seed, 0, 0xC0DE))
    driver = make_driver(cfg, vols[0].spatial_rank, vols[0].channels,
                         vols[0].spatial_shape)
    opt = torch.optim.Adam(driver.modules.parameters(), lr=cfg.lr_pretrain)
    history = []
    for epoch in range(cfg.epochs):
        order = _rng(cfg.seed, 0xB47C, epoch).permutation(len(vols))
        total, count = 0.0, 0
        for chunk in _chunks(order, cfg.batch_size):
            seeds = [_sample_seed(cfg.seed, epoch, i) for i in chunk]
            loss = driver.batch_loss([vols[i] for i in chunk], seeds)
            if loss is None:
                continue
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            count += 1
        mean = total / max(1, count)
        history.append({"epoch": epoch, "loss": mean})
        if log:
            print(f"[pretrain {cfg.task} seed={cfg.seed}] "
                  f"epoch {epoch + 1}/{cfg.epochs} loss={mean:.4f}")
    wall = time.perf_counter() - start
    ckpt = checkpoint_from_encoder(
        driver.encoder, cfg.task, cfg.seed,
        meta={"epoch_losses": [h["loss"] for h in history],
              "config": asdict(cfg), "wall_clock": wall})
    if run_dir is None and out_dir is not None:
        run_dir = Path(out_dir) / run_id("pretrain", cfg)
    if run_dir is not None:
        run_dir = Path(run_dir)
        path = save_checkpoint(ckpt, run_dir / "encoder.npz")
        record = RunRecord("pretrain", cfg.task, cfg.seed, None, asdict(cfg),
                           history, wall, str(path))
        record.save(run_dir)
    return ckpt


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------

def save_segmentation_model(model: SegmentationModel, path: str | Path) -> Path:
    """Persist a fine-tuned model (encoder + decoder) as a single npz."""
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_name(path.name + ".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"kind": "segmentation", "spec": asdict(model.encoder.spec),
              "num_classes": model.num_classes}
    np.savez(path, __meta__=np.frombuffer(
        json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
        **{f"w:{k}": v.detach().cpu().numpy()
           for k, v in model.state_dict().items()})
    return path


def load_segmentation_model(path: str | Path) -> SegmentationModel:
    with np.load(Path(path)) as f:
        header = json.loads(bytes(f["__meta__"]).decode())
        weights = {k[2:]: f[k].copy() for k in f.files if k.startswith("w:")}
    if header.get("kind") != "segmentation":
        raise IncompatibleCheckpoint(
            f"expected a segmentation model file, got kind {header.get('kind')!r}")
    spec_d = header["spec"]
    spec_d["filters"] = tuple(spec_d["filters"])
    model = attach_decoder(Encoder(EncoderSpec(**spec_d)), header["num_classes"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in weights.items()})
    return model


def _soft_dice_loss(logits: torch.Tensor, target: torch.Tensor,
                    num_classes: int) -> torch.Tensor:
    # foreground classes only; smooth constant keeps empty classes stable
    probs = torch.softmax(logits, dim=1)
    dims = tuple(range(1, logits.ndim - 1))  # spatial dims of one class slice
    terms = []
    for c in range(1, num_classes):
        t = (target == c).float()
        p = probs[:, c]
        inter = (p * t).sum(dim=dims)
        denom = p.sum(dim=dims) + t.sum(dim=dims)
        terms.append((1.0 - (2.0 * inter + 1.0) / (denom + 1.0)).mean())
    return torch.stack(terms).mean()


def _class_weights(cfg: TrainConfig, masks: list[np.ndarray]) -> torch.Tensor | None:
    """Per-class CE weights; "balanced" uses inverse class frequency of the
    labeled subset. Anything softer lets the dominant background gradient
    swallow rare structures: the tumor class is found and then abandoned."""
    if cfg.class_weights == "none":
        return None
    if cfg.class_weights == "balanced":
        counts = np.zeros(cfg.num_classes, dtype=np.float64)
        for m in masks:
            counts += np.bincount(m.ravel(), minlength=cfg.num_classes)
        w = counts.sum() / (cfg.num_classes * np.maximum(counts, 1.0))
        w = np.clip(w / w.mean(), 1e-3, 100.0)
    else:
        w = np.asarray(cfg.class_weights, dtype=np.float64)
    return torch.as_tensor(w, dtype=torch.float32)


def _seg_loss(logits, target, cfg: TrainConfig,
              weights: torch.Tensor | None = None) -> torch.Tensor:
    flat = logits.movedim(1, -1).reshape(-1, cfg.num_classes)
    labels = target.reshape(-1)
    if weights is None:
        ce = cross_entropy(flat, labels)
    else:
        logp = torch.log_softmax(flat, dim=1)
        nll = -logp.gather(1, labels[:, None]).squeeze(1)
        per_voxel = weights[labels]
        ce = (nll * per_voxel).sum() / per_voxel.sum()
    if cfg.seg_loss == "ce":
        return ce
    return ce + _soft_dice_loss(logits, target, cfg.num_classes)


def evaluate_segmentation(model, vols: list[Volume], masks: list[np.ndarray],
                          num_classes: int, batch_size: int = 8) -> dict:
    """Mean per-class Dice over volumes; dice_fg averages the non-background
    classes (class 2 is the tumor in the synthetic corpus)."""
    was_training = model.training
    model.eval()
    rank = vols[0].spatial_rank
    per_class = []
    with torch.inference_mode():
        for start in range(0, len(vols), batch_size):
            batch = vols[start:start + batch_size]
            x = to_model_input(np.stack([v.data for v in batch]), rank)
            pred = model(x).argmax(dim=1).cpu().numpy()
            for p, m in zip(pred, masks[start:start + batch_size]):
                per_class.append(dice_per_class(p, m, num_classes))
    if was_training:
        model.train()
    mean = np.mean(per_class, axis=0)
    out = {f"dice_{c}": float(mean[c]) for c in range(num_classes)}
    out["dice_fg"] = float(mean[1:].mean())
    return out


def finetune(ckpt: CheckpointState | None, dataset: DatasetManifest,
             fraction: float, cfg: TrainConfig,
             out_dir: str | Path | None = None, log: bool = True,
             on_epoch_end: Callable | None = None,
             run_dir: str | Path | None = None) -> RunRecord:
    """Supervised segmentation on a labeled fraction of the train split.

    ``ckpt=None`` is the from-scratch baseline. With a checkpoint, the
    encoder weights are loaded (input channels inflated if the labeled data
    has more modalities) and frozen for the first ``cfg.warmup_epochs``
    epochs while the decoder trains. Validation runs on the held-out val
    split after every epoch; ``on_epoch_end(epoch, model)`` is called after
    each evaluation.
    """
    if not 0 < fraction <= 1:
        raise TaskConfigMismatch(f"fraction {fraction} outside (0, 1]")
    try:
        train_ids = dataset.subset_ids(fraction)
    except KeyError as exc:
        raise TaskConfigMismatch(str(exc)) from exc
    if not dataset.splits.get("val"):
        raise TaskConfigMismatch("fine-tuning needs a val split for evaluation")
    vols, masks = load_labeled(dataset, train_ids)
    val_vols, val_masks = load_labeled(dataset, dataset.splits["val"])
    rank, channels = vols[0].spatial_rank, vols[0].channels
    weights = _class_weights(cfg, masks)
    start = time.perf_counter()

    # same torch seed for both arms so decoder init and batch order agree
    torch.manual_seed(_sample_seed(cfg.seed, 0, 0xF1DE))
    if ckpt is None:
        encoder = Encoder(encoder_spec_for(rank, channels, cfg.encoder_params))
        task = "scratch"
    else:
        encoder = encoder_from_checkpoint(ckpt, in_channels=channels)
        task = ckpt.task
    model = attach_decoder(encoder, cfg.num_classes)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_finetune)

    frozen = ckpt is not None and cfg.warmup_epochs > 0
    if frozen:
        for p in encoder.parameters():
            p.requires_grad_(False)

    history = []
    for epoch in range(cfg.epochs):
        if frozen and epoch >= cfg.warmup_epochs:
            for p in encoder.parameters():
                p.requires_grad_(True)
            frozen = False
        order = _rng(cfg.seed, 0xF17E, _fraction_token(fraction),
                     epoch).permutation(len(vols))
        model.train()
        total, count = 0.0, 0
        for chunk in _chunks(order, cfg.batch_size):
            x = to_model_input(np.stack([vols[i].data for i in chunk]), rank)
            y = torch.from_numpy(np.stack([masks[i] for i in chunk]))
            loss = _seg_loss(model(x), y, cfg, weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            count += 1
        stats = {"epoch": epoch, "loss": total / max(1, count)}
        stats.update(evaluate_segmentation(model, val_vols, val_masks,
                                           cfg.num_classes, cfg.batch_size))
        history.append(stats)
        if log:
            print(f"[finetune {task} f={fraction:g} seed={cfg.seed}] "
                  f"epoch {epoch + 1}/{cfg.epochs} loss={stats['loss']:.4f} "
                  f"dice_fg={stats['dice_fg']:.4f}")
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)

    record = RunRecord("finetune", task, cfg.seed, float(fraction),
                       asdict(cfg), history, time.perf_counter() - start,
                       notes={"n_labeled": len(vols), "channels": channels})
    if run_dir is None and out_dir is not None:
        run_dir = Path(out_dir) / run_id("finetune", cfg, fraction, task)
    if run_dir is not None:
        run_dir = Path(run_dir)
        record.checkpoint = str(save_segmentation_model(model,
                                                        run_dir / "model.npz"))
        record.save(run_dir)
    return record


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    rows: list[dict]
    records: dict[tuple, RunRecord]
    csv_path: Path
    curves_path: Path
    plot_paths: list[Path]
    failures: list[dict]


def _write_csv(path: Path, rows: list[dict], fieldnames: list[str]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _sweep_plots(out_dir: Path, rows, records, fractions, num_classes) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in rows if r["status"] == "ok"]
    tasks = sorted({r["task"] for r in ok})
    paths = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for task in tasks:
        xs = sorted({r["fraction"] for r in ok if r["task"] == task})
        ys = [float(np.median([r["dice_fg"] for r in ok
                               if r["task"] == task and r["fraction"] == x]))
              for x in xs]
        ax.plot(xs, ys, marker="o", label=task)
    ax.set_xlabel("label fraction")
    ax.set_ylabel("val Dice (foreground mean)")
    ax.set_title("Data efficiency")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "data_efficiency.png"
    fig.savefig(path)
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    top = max(fractions)
    for task in tasks:
        curves = [records[k].metric_curve("dice_fg") for k in records
                  if k[0] == task and k[1] == top]
        if not curves:
            continue
        ax.plot(np.median(np.array(curves), axis=0), label=task)
    ax.set_xlabel("epoch")
    ax.set_ylabel("val Dice (foreground mean)")
    ax.set_title(f"Convergence at fraction {top:g}")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "convergence.png"
    fig.savefig(path)
    plt.close(fig)
    paths.append(path)
    return paths


def sweep(dataset: DatasetManifest, tasks: Sequence[str],
          fractions: Sequence[float], seeds: Sequence[int], cfg: TrainConfig,
          out_dir: str | Path, pretrain_epochs: int | None = None,
          log: bool = True) -> SweepResult:
    """Cross every task (plus the scratch baseline) with fractions and seeds.

    Pretraining is cached per (task, seed) and shared across fractions. A
    failed cell is recorded with its error and does not stop the sweep.
    Emits sweep.csv (final metrics), curves.csv (per-epoch), and the
    data-efficiency and convergence plots.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fractions = [float(f) for f in fractions]
    all_tasks = [t for t in tasks if t != "scratch"] + ["scratch"]
    ckpt_cache: dict[tuple, CheckpointState | Exception] = {}
    rows, curves, failures = [], [], []
    records: dict[tuple, RunRecord] = {}

    for task in all_tasks:
        for seed in seeds:
            cell_cfg = replace(cfg, task=task, seed=int(seed))
            ckpt = None
            if task != "scratch":
                key = (task, int(seed))
                if key not in ckpt_cache:
                    p_cfg = replace(cell_cfg,
                                    epochs=pretrain_epochs or cfg.epochs)
                    try:
                        ckpt_cache[key] = pretrain(dataset, p_cfg,
                                                   out_dir=out_dir / "runs",
                                                   log=log)
                    except Exception as exc:  # noqa: BLE001 - isolate cells
                        ckpt_cache[key] = exc
                cached = ckpt_cache[key]
                if isinstance(cached, Exception):
                    for fraction in fractions:
                        failures.append({"task": task, "fraction": fraction,
                                         "seed": int(seed),
                                         "error": repr(cached)})
                        rows.append(_failed_row(task, fraction, seed, cell_cfg,
                                                cached))
                    continue
                ckpt = cached
            for fraction in fractions:
                try:
                    rec = finetune(ckpt, dataset, fraction, cell_cfg,
                                   out_dir=out_dir / "runs", log=log)
                except Exception as exc:  # noqa: BLE001 - isolate cells
                    failures.append({"task": task, "fraction": fraction,
                                     "seed": int(seed), "error": repr(exc)})
                    rows.append(_failed_row(task, fraction, seed, cell_cfg, exc))
                    continue
                records[(task, fraction, int(seed))] = rec
                reach = epochs_to_threshold(rec, 0.9)
                row = {"schema_version": SCHEMA_VERSION, "task": task,
                       "fraction": fraction, "seed": int(seed), "status": "ok",
                       "loss": rec.final_metric("loss"),
                       "epochs_to_90pct": reach.epoch,
                       "wall_clock": round(rec.wall_clock, 3),
                       "config_hash": config_hash(asdict(cell_cfg)),
                       "error": ""}
                for key in rec.epochs[-1]:
                    if key.startswith("dice_"):
                        row[key] = rec.final_metric(key)
                rows.append(row)
                for e in rec.epochs:
                    curves.append({"schema_version": SCHEMA_VERSION,
                                   "task": task, "fraction": fraction,
                                   "seed": int(seed), **e})

    dice_keys = [f"dice_{c}" for c in range(cfg.num_classes)] + ["dice_fg"]
    fields = ["schema_version", "task", "fraction", "seed", "status", "loss",
              *dice_keys, "epochs_to_90pct", "wall_clock", "config_hash",
              "error"]
    csv_path = out_dir / "sweep.csv"
    _write_csv(csv_path, rows, fields)
    curves_path = out_dir / "curves.csv"
    curve_fields = ["schema_version", "task", "fraction", "seed", "epoch",
                    "loss", *dice_keys]
    _write_csv(curves_path, curves, curve_fields)
    plot_paths = _sweep_plots(out_dir, rows, records, fractions,
                              cfg.num_classes)
    return SweepResult(rows, records, csv_path, curves_path, plot_paths,
                       failures)


def _failed_row(task, fraction, seed, cfg, exc) -> dict:
    return {"schema_version": SCHEMA_VERSION, "task": task,
            "fraction": float(fraction), "seed": int(seed),
            "status": "failed", "loss": "", "epochs_to_90pct": "",
            "wall_clock": "", "config_hash": config_hash(asdict(cfg)),
            "error": repr(exc)}
