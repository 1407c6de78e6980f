"""Stochastic transformation family for instance discrimination.

Each gate fires independently with its configured probability: axis flip,
exact 90-degree rotation, color distortion (brightness shift then contrast
scale), and zoom with resample + center crop/pad back to the input shape.
Deterministic building blocks are exposed separately so tests can pin exact
arithmetic; the random composition is reproducible per (config, seed).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotNormalized
from .rotations import apply_rotation, enumerate_rotations, enumerate_rotations_2d
from .volume import Volume, resize


@dataclass(frozen=True)
class TransformConfig:
    p_flip: float = 0.5
    p_rotate: float = 0.5
    p_color: float = 0.5
    p_zoom: float = 0.2
    brightness_delta_max: float = 0.2
    contrast_range: tuple[float, float] = (0.8, 1.2)
    zoom_range: tuple[float, float] = (0.85, 1.15)
    seed: int = 0

    def __post_init__(self):
        for name in ("p_flip", "p_rotate", "p_color", "p_zoom"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.zoom_range[0] <= 0:
            raise ValueError("zoom_range must be positive")


def flip_axis(v: Volume, axis: int) -> Volume:
    if not 0 <= axis < v.spatial_rank:
        raise ValueError(f"axis {axis} out of range for rank {v.spatial_rank}")
    return Volume(np.ascontiguousarray(np.flip(v.data, axis=axis)), v.spacing, v.id)


def adjust_brightness(v: Volume, delta: float) -> Volume:
    return Volume(v.data + np.float32(delta), v.spacing, v.id)


def adjust_contrast(v: Volume, factor: float) -> Volume:
    mean = v.data.mean(dtype=np.float64)
    out = (v.data - mean) * np.float32(factor) + mean
    return Volume(out.astype(np.float32), v.spacing, v.id)


def zoom(v: Volume, factor: float) -> Volume:
    """Scale by ``factor`` about the center, keeping the original shape.

    Zoom-in resamples larger then center-crops; zoom-out resamples smaller
    then pads with zeros.
    """
    if factor <= 0:
        raise ValueError("zoom factor must be positive")
    orig = v.spatial_shape
    scaled = tuple(max(1, int(round(e * factor))) for e in orig)
    if scaled == orig:
        return Volume(v.data.copy(), v.spacing, v.id)
    resampled = resize(v, scaled)
    out = np.zeros(orig + (v.channels,), dtype=np.float32)
    src, dst = [], []
    for e_src, e_dst in zip(scaled, orig):
        if e_src >= e_dst:
            lo = (e_src - e_dst) // 2
            src.append(slice(lo, lo + e_dst))
            dst.append(slice(0, e_dst))
        else:
            lo = (e_dst - e_src) // 2
            src.append(slice(0, e_src))
            dst.append(slice(lo, lo + e_src))
    out[tuple(dst) + (slice(None),)] = resampled.data[tuple(src) + (slice(None),)]
    return Volume(out, v.spacing, v.id)


def _rotation_choices(v: Volume):
    if v.spatial_rank == 2:
        pool = enumerate_rotations_2d()[1:]
        keep_shape = v.spatial_shape[0] == v.spatial_shape[1]
    else:
        pool = enumerate_rotations()[1:]
        keep_shape = len(set(v.spatial_shape)) == 1
    if keep_shape:
        return pool
    # non-cubic inputs: keep only operators that preserve the shape
    out = []
    for r in pool:
        if apply_rotation(Volume(np.zeros(v.data.shape, np.float32)), r).spatial_shape == v.spatial_shape:
            out.append(r)
    return out


def random_transform(v: Volume, cfg: TransformConfig, seed: int) -> Volume:
    """Randomly composed view of ``v``; same (cfg, seed) gives the same view.

    Requires input in [0, 1] (tolerance 1e-6); output is clamped to [0, 1]
    and keeps the input spatial shape.
    """
    lo = float(v.data.min())
    hi = float(v.data.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise NotNormalized(f"intensities span [{lo:.3g}, {hi:.3g}], expected [0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & 0xFFFFFFFF, seed & 0xFFFFFFFF]))
    out = v
    fired = False
    if rng.uniform() < cfg.p_flip:
        out = flip_axis(out, int(rng.integers(0, v.spatial_rank)))
        fired = True
    if rng.uniform() < cfg.p_rotate:
        pool = _rotation_choices(out)
        if pool:
            out = apply_rotation(out, pool[int(rng.integers(0, len(pool)))])
            fired = True
    if rng.uniform() < cfg.p_color:
        delta = float(rng.uniform(-cfg.brightness_delta_max, cfg.brightness_delta_max))
        factor = float(rng.uniform(*cfg.contrast_range))
        out = adjust_contrast(adjust_brightness(out, delta), factor)
        fired = True
    if rng.uniform() < cfg.p_zoom:
        out = zoom(out, float(rng.uniform(*cfg.zoom_range)))
        fired = True
    if not fired:
        return Volume(v.data.copy(), v.spacing, v.id)
    return Volume(np.clip(out.data, 0.0, 1.0), v.spacing, v.id)
