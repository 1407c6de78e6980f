"""Deterministic synthetic corpus: bright ellipsoid "organ" with an embedded
brighter "tumor" blob on a smooth noisy background.

Ground truth is exact by construction and every sample is reproducible from
(seed, index) alone. Samples share a consistent spatial layout, the way
scanned anatomy does: the organ is elongated along fixed axes, intensity
ramps along the first axis, and two landmarks (a rod and a dim node) flank
the organ at fixed offset directions. Those cues make position, orientation,
and context inferable from content, so self-supervised proxy tasks have real
signal to learn, while a global-threshold baseline can already segment the
organ. The top of the intensity range is reserved for the tumor: landmark
levels sit inside the organ/background bands so voxel brightness remains an
unambiguous tumor cue for the segmentation fine-tune.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import SpecInfeasible
from .volume import DatasetManifest, Volume, make_manifest, normalize_01, save_vvol


# Fixed per-axis stretch of the organ and jitter of its center: every sample
# shares one anatomical orientation, so rotations and patch positions are
# recognizable from content.
_ANISOTROPY = (1.25, 1.0, 0.8)
_CENTER_JITTER = 1.5
_ROD_LEVEL = 0.62
_NODE_LEVEL = 0.35
_NODE_RADIUS = 2.5


@dataclass(frozen=True)
class SynthSpec:
    count: int = 200
    shape: tuple[int, ...] = (32, 32, 32)
    organ_radius: tuple[float, float] = (6.5, 9.0)
    tumor_radius: tuple[float, float] = (2.0, 4.5)
    organ_level: float = 0.52
    tumor_boost: float = 0.32
    background_level: float = 0.15
    texture_amp: float = 0.08
    gradient_amp: float = 0.10
    noise_sigma: float = 0.05
    seed: int = 0
    task_mode: str = "segmentation"   # or "grading"

    def __post_init__(self):
        if any(s < 16 for s in self.shape):
            raise ValueError("each extent must be >= 16")
        if self.tumor_radius[1] >= min(_ANISOTROPY) * self.organ_radius[0]:
            raise SpecInfeasible("largest tumor would not fit inside the smallest organ")
        if self.task_mode not in ("segmentation", "grading"):
            raise ValueError(f"unknown task_mode {self.task_mode!r}")
        margin = max(_ANISOTROPY) * max(self.organ_radius) + 1
        if any(s - 2 * margin < 1 for s in self.shape):
            raise SpecInfeasible("organ radius range leaves no room for a center")


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def make_sample(spec: SynthSpec, index: int) -> tuple[Volume, np.ndarray]:
    """One (volume, mask) pair; mask classes: 0 background, 1 organ, 2 tumor."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0xFFFFFFFF, index]))
    shape = spec.shape
    d = len(shape)

    field = ndimage.gaussian_filter(rng.normal(size=shape), sigma=4.0)
    field /= max(float(np.abs(field).max()), 1e-8)
    img = spec.background_level + spec.texture_amp * field

    organ_r = rng.uniform(*spec.organ_radius) * np.array(_ANISOTROPY[:d])
    organ_c = np.array(shape) / 2 + rng.uniform(-_CENTER_JITTER, _CENTER_JITTER, size=d)
    organ = _ellipsoid(shape, organ_c, organ_r)

    texture = ndimage.gaussian_filter(rng.normal(size=shape), sigma=2.0)
    texture /= max(float(np.abs(texture).max()), 1e-8)
    img[organ] = spec.organ_level + 0.5 * spec.texture_amp * texture[organ]

    tumor_r = rng.uniform(*spec.tumor_radius, size=d)
    slack = np.maximum(organ_r - tumor_r, 0.0)
    offset = rng.uniform(-0.6 * slack, 0.6 * slack)
    tumor = _ellipsoid(shape, organ_c + offset, tumor_r)
    tumor &= organ   # constructive containment
    img[tumor] += spec.tumor_boost

    # two landmarks outside the organ pin a consistent anatomical frame:
    # a rod past one face, a dim node past the opposite face, each shifted
    # off-axis so no volume-preserving rotation maps the layout onto itself.
    # both stay out of the top intensity band, which belongs to the tumor.
    ax = min(1, d - 1)
    rod_r = np.full(d, 1.5)
    rod_r[ax] = 3.0
    rod_c = organ_c.copy()
    rod_c[ax] += organ_r[ax] + rod_r[ax] + 0.5
    if d == 3:
        rod_c[2] += 0.45 * organ_r[2]
    rod_c = np.minimum(rod_c, np.array(shape) - rod_r - 0.5)  # keep whole
    img[_ellipsoid(shape, rod_c, rod_r)] = _ROD_LEVEL

    node_c = organ_c.copy()
    node_c[ax] -= organ_r[ax] + _NODE_RADIUS + 0.5
    node_c[0] += 0.4 * organ_r[0]
    node_c = np.clip(node_c, _NODE_RADIUS + 0.5,
                     np.array(shape) - _NODE_RADIUS - 0.5)
    img[_ellipsoid(shape, node_c, np.full(d, _NODE_RADIUS))] = _NODE_LEVEL

    ramp = (np.arange(shape[0]) / max(shape[0] - 1, 1) - 0.5) * spec.gradient_amp
    img += ramp.reshape((-1,) + (1,) * (d - 1))
    img = img + rng.normal(size=shape) * spec.noise_sigma
    vol = normalize_01(Volume(img[..., None].astype(np.float32), id=f"case_{index:04d}"))

    mask = np.zeros(shape, dtype=np.int64)
    mask[organ] = 1
    mask[tumor] = 2
    return vol, mask


def assign_grades(tumor_volumes: list[int], num_grades: int = 5) -> list[int]:
    """Ordinal label per sample by tumor-volume quantile, balanced to +-1."""
    order = np.argsort(np.asarray(tumor_volumes), kind="stable")
    grades = np.empty(len(tumor_volumes), dtype=np.int64)
    for g, chunk in enumerate(np.array_split(order, num_grades)):
        grades[chunk] = g
    return grades.tolist()


def generate(spec: SynthSpec, out_root,
             fractions=(0.05, 0.1, 0.25, 0.5, 1.0),
             val_fraction: float = 0.2) -> DatasetManifest:
    """Write the corpus (volumes, masks, optional grades, manifest) to disk.

    Rerunning with the same spec produces byte-identical files.
    """
    out_root = Path(out_root)
    vol_dir = out_root / "volumes"
    lab_dir = out_root / "labels"
    tumor_volumes = []
    ids = []
    for idx in range(spec.count):
        vol, mask = make_sample(spec, idx)
        save_vvol(vol, vol_dir)
        save_vvol(Volume(mask[..., None].astype(np.float32), id=vol.id), lab_dir)
        tumor_volumes.append(int((mask == 2).sum()))
        ids.append(vol.id)
    if spec.task_mode == "grading":
        grades = assign_grades(tumor_volumes)
        payload = {i: g for i, g in sorted(zip(ids, grades))}
        (out_root / "grades.json").write_text(
            json.dumps(payload, sort_keys=True, indent=1) + "\n")
    manifest = make_manifest(out_root, split_seed=spec.seed, fractions=fractions,
                             val_fraction=val_fraction)
    manifest.save(out_root / "manifest.json")
    return manifest


def load_mask(manifest: DatasetManifest, sample_id: str) -> np.ndarray:
    """Integer class mask for one sample (stored as a float VVOL)."""
    from .volume import load_volume

    path = manifest.label_path(sample_id)
    if path is None:
        raise FileNotFoundError(f"sample {sample_id} has no label file")
    return np.rint(load_volume(path).data[..., 0]).astype(np.int64)
