"""Patch extraction: jittered non-overlapping grids and overlapping lattices.

Two layouts feed the proxy tasks. Relative-location and scramble tasks use an
n^d grid of non-overlapping patches, one per cell, each shrunk by the jitter
budget and placed at a random in-cell offset so neighbouring patches leave
random gaps. The predictive-coding task uses an overlapping lattice with a
fixed stride.

Cell ordering is row-major over (i, j, k) with i the first spatial axis; all
task label spaces reference this ordering.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import VolumeTooSmall
from .volume import Volume


@dataclass(frozen=True)
class GridSpec:
    """Non-overlapping jittered grid layout.

    cells_per_axis: n >= 2 cells along every spatial axis (n^d cells total).
    jitter: j >= 0 voxels; the patch in each cell is the nominal cell size
        shrunk by j per side, at a uniform random in-cell offset.
    """

    cells_per_axis: int
    jitter: int = 0

    def __post_init__(self):
        if self.cells_per_axis < 2:
            raise ValueError("cells_per_axis must be >= 2")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")

    def patch_shape(self, spatial_shape: tuple[int, ...]) -> tuple[int, ...]:
        n, j = self.cells_per_axis, self.jitter
        return tuple(e // n - 2 * j for e in spatial_shape)


def cell_bounds(extent: int, n: int) -> np.ndarray:
    """n+1 cell boundaries along one axis; cell sizes differ by at most 1."""
    return (np.arange(n + 1, dtype=np.int64) * extent) // n


@dataclass
class GridPatches:
    """Ordered grid patches with provenance for coordinate audits."""

    patches: np.ndarray        # (m, *patch_shape, channels)
    cell_indices: np.ndarray   # (m, d) row-major multi-index of each cell
    origins: np.ndarray        # (m, d) absolute voxel origin of each patch

    def __len__(self) -> int:
        return self.patches.shape[0]


def extract_grid(v: Volume, spec: GridSpec, seed: int) -> GridPatches:
    """Cut an n^d grid of jittered patches, row-major cell order.

    Deterministic per (volume shape, spec, seed). With jitter 0 and extents
    divisible by n the patches exactly partition the volume.
    """
    n, j = spec.cells_per_axis, spec.jitter
    shape = v.spatial_shape
    d = len(shape)
    if any(e < n * (2 * j + 1) for e in shape):
        raise VolumeTooSmall(
            f"extents {shape} cannot host a {n}^{d} grid with jitter {j}"
        )
    bounds = [cell_bounds(e, n) for e in shape]
    pshape = spec.patch_shape(shape)
    rng = np.random.default_rng(seed)
    cells = list(np.ndindex((n,) * d))
    patches = np.empty((len(cells),) + pshape + (v.channels,), dtype=v.data.dtype)
    origins = np.empty((len(cells), d), dtype=np.int64)
    for row, cell in enumerate(cells):
        start = []
        for ax, ci in enumerate(cell):
            lo = int(bounds[ax][ci])
            slack = int(bounds[ax][ci + 1]) - lo - pshape[ax]
            start.append(lo + int(rng.integers(0, slack + 1)))
        sl = tuple(slice(s, s + p) for s, p in zip(start, pshape))
        patches[row] = v.data[sl + (slice(None),)]
        origins[row] = start
    return GridPatches(patches, np.array(cells, dtype=np.int64), origins)


@dataclass
class PatchLattice:
    """Overlapping patch lattice with a fixed stride.

    ``coords`` are integer lattice indices; the voxel origin of patch row t
    is ``coords[t] * stride``.
    """

    patches: np.ndarray           # (m, *patch_size, channels)
    coords: np.ndarray            # (m, d)
    stride: tuple[int, ...]
    patch_size: tuple[int, ...]
    lattice_shape: tuple[int, ...]

    def __len__(self) -> int:
        return self.patches.shape[0]

    def origin(self, row: int) -> tuple[int, ...]:
        return tuple(int(c * s) for c, s in zip(self.coords[row], self.stride))


def extract_lattice(v: Volume, patch_size, overlap_fraction: float = 0.5) -> PatchLattice:
    """Cover the volume from the origin with overlapping equal patches.

    Stride is round(patch_size * (1 - overlap_fraction)) per axis; trailing
    positions that would run past the volume are dropped.
    """
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValueError("overlap_fraction must lie in [0, 1)")
    shape = v.spatial_shape
    d = len(shape)
    if isinstance(patch_size, int):
        psize = (patch_size,) * d
    else:
        psize = tuple(int(p) for p in patch_size)
        if len(psize) != d:
            raise ValueError("patch_size length must match spatial rank")
    stride = tuple(int(round(p * (1.0 - overlap_fraction))) for p in psize)
    if any(s < 1 for s in stride):
        raise ValueError(f"stride {stride} must be >= 1 per axis")
    counts = []
    for e, p, s in zip(shape, psize, stride):
        if e < p:
            raise VolumeTooSmall(f"extent {e} smaller than patch size {p}")
        counts.append((e - p) // s + 1)
    lattice_shape = tuple(counts)
    coords = np.array(list(np.ndindex(lattice_shape)), dtype=np.int64)
    m = coords.shape[0]
    patches = np.empty((m,) + psize + (v.channels,), dtype=v.data.dtype)
    for row in range(m):
        origin = coords[row] * np.array(stride)
        sl = tuple(slice(int(o), int(o) + p) for o, p in zip(origin, psize))
        patches[row] = v.data[sl + (slice(None),)]
    return PatchLattice(patches, coords, stride, psize, lattice_shape)
