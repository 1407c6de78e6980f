"""Volume type, preprocessing ops, VVOL container IO, and dataset manifests.

A volume is an N-d intensity array with channels last: shape
``(*spatial, channels)`` where spatial rank is 2 or 3. Preprocessing for
pretraining is crop -> resize -> normalize; fine-tuning skips the crop.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import AllBackground, EmptyDataset

VVOL_HEADER_SUFFIX = ".vvol.json"
VVOL_RAW_SUFFIX = ".vvol.raw"


@dataclass
class Volume:
    """Single- or multi-channel 2D/3D intensity image.

    Attributes:
        data: float32 array of shape (*spatial, channels), channels last.
        spacing: per-spatial-axis physical voxel size (metadata only).
        id: opaque sample identifier.
    """

    data: np.ndarray
    spacing: tuple[float, ...] = ()
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim not in (3, 4):
            raise ValueError(
                f"expected (*spatial, channels) with spatial rank 2 or 3, got shape {self.data.shape}"
            )
        if self.data.shape[-1] < 1:
            raise ValueError("channel count must be >= 1")
        if not self.spacing:
            self.spacing = (1.0,) * self.spatial_rank
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.spatial_rank:
            raise ValueError("spacing length must match spatial rank")

    @property
    def spatial_rank(self) -> int:
        return self.data.ndim - 1

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.data.shape[:-1]

    @property
    def channels(self) -> int:
        return self.data.shape[-1]


def crop_to_foreground(v: Volume, threshold: float = 0.0) -> Volume:
    """Crop to the tight bounding box of voxels brighter than ``threshold``.

    Foreground is the max over channels; every face of the result touches at
    least one foreground voxel. Idempotent. Raises AllBackground when nothing
    exceeds the threshold.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    fg = v.data.max(axis=-1) > threshold
    if not fg.any():
        raise AllBackground(f"no voxel above threshold {threshold} in volume {v.id!r}")
    slices = []
    for ax in range(fg.ndim):
        other = tuple(a for a in range(fg.ndim) if a != ax)
        hit = fg.any(axis=other)
        idx = np.flatnonzero(hit)
        slices.append(slice(int(idx[0]), int(idx[-1]) + 1))
    cropped = np.ascontiguousarray(v.data[tuple(slices) + (slice(None),)])
    return Volume(cropped, v.spacing, v.id)


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    # align-corners: corner voxel centers map onto corner voxel centers
    if n_out == 1:
        return np.array([0.5 * (n_in - 1)], dtype=np.float64)
    return np.linspace(0.0, float(n_in - 1), n_out)


def resize(v: Volume, target_shape: Sequence[int]) -> Volume:
    """Tri-/bilinear resize (align-corners) to ``target_shape``, per channel."""
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != v.spatial_rank:
        raise ValueError("target_shape length must match spatial rank")
    if any(t < 1 for t in target_shape):
        raise ValueError("target sizes must be >= 1")
    data = v.data
    for ax, n_out in enumerate(target_shape):
        n_in = data.shape[ax]
        if n_in == n_out:
            continue
        pos = _axis_coords(n_in, n_out)
        i0 = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w = (pos - i0).astype(np.float32)
        bshape = [1] * data.ndim
        bshape[ax] = n_out
        w = w.reshape(bshape)
        a0 = np.take(data, i0, axis=ax)
        a1 = np.take(data, i1, axis=ax)
        # a0 + w*(a1-a0) is exact on constants, unlike (1-w)*a0 + w*a1
        data = a0 + w * (a1 - a0)
    return Volume(np.ascontiguousarray(data, dtype=np.float32), v.spacing, v.id)


def resize_nearest(arr: np.ndarray, target_shape: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour resize for label masks (no channel axis)."""
    target_shape = tuple(int(t) for t in target_shape)
    out = arr
    for ax, n_out in enumerate(target_shape):
        n_in = out.shape[ax]
        if n_in == n_out:
            continue
        idx = np.rint(_axis_coords(n_in, n_out)).astype(np.int64)
        out = np.take(out, np.clip(idx, 0, n_in - 1), axis=ax)
    return np.ascontiguousarray(out)


def normalize_01(v: Volume) -> Volume:
    """Rescale to [0, 1] using the joint min/max across all channels.

    Constant volumes map to all zeros to avoid NaN propagation.
    """
    mn = float(v.data.min())
    mx = float(v.data.max())
    if mx == mn:
        return Volume(np.zeros_like(v.data), v.spacing, v.id)
    out = (v.data - mn) / (mx - mn)
    return Volume(out, v.spacing, v.id)


def preprocess(v: Volume, pretraining: bool, target_shape: Sequence[int] | None = None,
               foreground_threshold: float = 0.0) -> Volume:
    """crop (pretraining only) -> resize (optional) -> normalize to [0, 1]."""
    if pretraining:
        v = crop_to_foreground(v, foreground_threshold)
    if target_shape is not None and tuple(target_shape) != v.spatial_shape:
        v = resize(v, target_shape)
    return normalize_01(v)


# ---------------------------------------------------------------------------
# VVOL container + pluggable readers
# ---------------------------------------------------------------------------

def save_vvol(v: Volume, directory: str | Path) -> Path:
    """Write one sample as a VVOL entry: JSON header + raw little-endian float32."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "id": v.id,
        "shape": list(v.spatial_shape),
        "channels": v.channels,
        "dtype": "float32",
        "spacing": list(v.spacing),
    }
    hpath = directory / f"{v.id}{VVOL_HEADER_SUFFIX}"
    hpath.write_text(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
    v.data.astype("<f4").tofile(directory / f"{v.id}{VVOL_RAW_SUFFIX}")
    return hpath


def load_vvol(header_path: str | Path) -> Volume:
    header_path = Path(header_path)
    header = json.loads(header_path.read_text())
    if header.get("dtype") != "float32":
        raise ValueError(f"unsupported VVOL dtype {header.get('dtype')!r}")
    shape = tuple(header["shape"]) + (int(header["channels"]),)
    raw = header_path.with_name(header_path.name[: -len(VVOL_HEADER_SUFFIX)] + VVOL_RAW_SUFFIX)
    data = np.fromfile(raw, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"raw buffer size {data.size} does not match header shape {shape}")
    return Volume(data.reshape(shape), tuple(header["spacing"]), header["id"])


_READERS: dict[str, Callable[[Path], Volume]] = {}


def register_reader(extension: str, reader: Callable[[Path], Volume]) -> None:
    """Register a loader for files ending in ``extension`` (e.g. '.nii.gz')."""
    if not extension.startswith("."):
        raise ValueError("extension must start with '.'")
    _READERS[extension] = reader


def registered_extensions() -> tuple[str, ...]:
    # longest first so '.vvol.json' wins over a hypothetical '.json'
    return tuple(sorted(_READERS, key=len, reverse=True))


def load_volume(path: str | Path) -> Volume:
    """Load a volume through the reader registry, matched by file extension."""
    path = Path(path)
    for ext in registered_extensions():
        if path.name.endswith(ext):
            return _READERS[ext](path)
    raise ValueError(f"no registered reader for {path.name!r}")


def _read_npz(path: Path) -> Volume:
    with np.load(path) as f:
        data = f["data"]
        spacing = tuple(f["spacing"]) if "spacing" in f else ()
        vid = str(f["id"]) if "id" in f else path.stem
    return Volume(data, spacing, vid)


register_reader(VVOL_HEADER_SUFFIX, load_vvol)
register_reader(".npz", _read_npz)


# ---------------------------------------------------------------------------
# Dataset manifest with nested labeled subsets
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    path: str
    label_path: str | None = None


@dataclass
class DatasetManifest:
    """Dataset index: entries, named splits, and nested labeled subsets.

    For a fixed seed the labeled subsets are nested: the 5% subset is a
    prefix of the 10% subset, and so on. Subsets are drawn from the train
    split. Entry paths are stored relative to the dataset root so the same
    corpus is byte-identical wherever it is generated; ``root`` is attached
    in memory when the manifest is built or loaded.
    """

    entries: list[ManifestEntry]
    splits: dict[str, list[str]]
    labeled_subsets: dict[str, list[str]] = field(default_factory=dict)
    seed: int = 0
    grades: dict[str, int] | None = None
    root: Path | None = None

    def entry(self, sample_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == sample_id:
                return e
        raise KeyError(sample_id)

    def resolve(self, rel_path: str) -> Path:
        if self.root is None:
            return Path(rel_path)
        return self.root / rel_path

    def volume_path(self, sample_id: str) -> Path:
        return self.resolve(self.entry(sample_id).path)

    def label_path(self, sample_id: str) -> Path | None:
        lp = self.entry(sample_id).label_path
        return None if lp is None else self.resolve(lp)

    def subset_ids(self, fraction: float) -> list[str]:
        key = _fraction_key(fraction)
        if key in self.labeled_subsets:
            return list(self.labeled_subsets[key])
        if abs(fraction - 1.0) < 1e-12:
            return list(self.splits["train"])
        raise KeyError(f"no labeled subset for fraction {fraction}")

    def to_json(self) -> str:
        payload = {
            "entries": [
                {"id": e.id, "path": e.path, "label_path": e.label_path}
                for e in self.entries
            ],
            "splits": self.splits,
            "labeled_subsets": self.labeled_subsets,
            "seed": self.seed,
            "grades": self.grades,
        }
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_json(cls, text: str, root: Path | None = None) -> "DatasetManifest":
        payload = json.loads(text)
        entries = [ManifestEntry(**e) for e in payload["entries"]]
        grades = payload.get("grades")
        if grades is not None:
            grades = {k: int(g) for k, g in grades.items()}
        return cls(entries, payload["splits"], payload["labeled_subsets"],
                   payload["seed"], grades, root)

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        return cls.from_json(path.read_text(), root=path.parent)


def _fraction_key(fraction: float) -> str:
    return format(float(fraction), "g")


def discover_volumes(root: str | Path) -> list[ManifestEntry]:
    """Find volume files under root (any registered extension).

    Files under a ``labels/`` directory pair with same-id volumes as masks.
    Paths are recorded relative to ``root``.
    """
    root = Path(root)
    vol_dir = root / "volumes" if (root / "volumes").is_dir() else root
    label_dir = root / "labels"
    entries = []
    for ext in registered_extensions():
        for p in sorted(vol_dir.glob(f"*{ext}")):
            vid = p.name[: -len(ext)]
            label = label_dir / p.name
            entries.append(ManifestEntry(
                vid,
                p.relative_to(root).as_posix(),
                label.relative_to(root).as_posix() if label.exists() else None,
            ))
    entries.sort(key=lambda e: e.id)
    return entries


def make_manifest(root: str | Path, split_seed: int, fractions: Sequence[float],
                  val_fraction: float = 0.0, test_fraction: float = 0.0) -> DatasetManifest:
    """Build a deterministic manifest with nested labeled subsets.

    One seeded shuffle assigns val/test splits and orders the train split;
    each labeled subset is a prefix of that order, so subsets are nested and
    reproducible per seed.
    """
    entries = discover_volumes(root)
    if not entries:
        raise EmptyDataset(f"no volumes found under {root}")
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fractions must lie in (0, 1], got {f}")
    ids = [e.id for e in entries]
    rng = np.random.default_rng(split_seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_val = int(round(val_fraction * len(ids)))
    n_test = int(round(test_fraction * len(ids)))
    splits = {
        "val": sorted(order[:n_val]),
        "test": sorted(order[n_val:n_val + n_test]),
        "train": order[n_val + n_test:],
    }
    subsets = {}
    train = splits["train"]
    for f in sorted(set(float(x) for x in fractions)):
        k = max(1, int(round(f * len(train))))
        subsets[_fraction_key(f)] = sorted(train[:k])
    splits["train"] = sorted(train)
    grades = _load_grades(Path(root))
    return DatasetManifest(entries, splits, subsets, split_seed, grades, Path(root))


def _load_grades(root: Path) -> dict[str, int] | None:
    gpath = root / "grades.json"
    if gpath.exists():
        return {k: int(v) for k, v in json.loads(gpath.read_text()).items()}
    return None
