"""Sample builders for the five self-supervised tasks.

Each builder is a pure function of (inputs, seed) producing one labeled
sample; the training harness derives per-sample seeds from (global seed,
sample index) so generation order never matters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BatchTooSmall,
    EvenGridNoCenter,
    GridMismatch,
    LatticeTooSmall,
    TooManyNegatives,
)
from .grids import GridSpec, extract_grid, extract_lattice
from .permutations import PermutationSet, apply_permutation, invert
from .rotations import apply_rotation, enumerate_rotations, enumerate_rotations_2d
from .transforms import TransformConfig, random_transform
from .volume import Volume


@dataclass(frozen=True)
class LatticeConfig:
    patch_size: int
    overlap_fraction: float = 0.5


def _spawn(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, *keys]))


# ---------------------------------------------------------------------------
# Contrastive predictive coding
# ---------------------------------------------------------------------------

@dataclass
class CPCSample:
    """Inverted-pyramid context, one positive per step, shared negatives.

    The context is every lattice position at most ``pyramid_height - 1`` rows
    above the anchor whose in-plane offset is bounded by the row gap, ordered
    top row first and ending at the anchor itself; positions falling outside
    the lattice are clipped away.
    """

    context_patches: np.ndarray   # (S, *patch, C), anchor last
    context_coords: np.ndarray    # (S, d)
    target_patches: np.ndarray    # (len(steps), *patch, C)
    target_coords: np.ndarray     # (len(steps), d)
    negatives: np.ndarray         # (n_negatives, *patch, C)
    negative_coords: np.ndarray   # (n_negatives, d)
    steps: tuple[int, ...]
    anchor: tuple[int, ...]


def pyramid_positions(anchor, pyramid_height: int, lattice_shape) -> list[tuple[int, ...]]:
    """Enumerate the context set, top row first, anchor last."""
    i = anchor[0]
    rest = anchor[1:]
    out = []
    for gap in range(pyramid_height - 1, -1, -1):
        u = i - gap
        if u < 0:
            continue
        ranges = []
        for ax, center in enumerate(rest, start=1):
            lo = max(0, center - gap)
            hi = min(lattice_shape[ax] - 1, center + gap)
            ranges.append(range(lo, hi + 1))
        idx = [()]
        for r in ranges:
            idx = [t + (x,) for t in idx for x in r]
        out.extend((u,) + t for t in idx)
    return out


def build_cpc_sample(v: Volume, lattice_cfg: LatticeConfig, pyramid_height: int,
                     steps, n_negatives: int, seed: int,
                     anchor: tuple[int, ...] | None = None) -> CPCSample:
    """One contrastive sample: context pyramid, future targets, negatives.

    Targets sit ``l`` rows below the anchor along the first axis for each
    step l; negatives are drawn uniformly without replacement from all other
    lattice positions, never coinciding with any target.
    """
    steps = tuple(int(l) for l in steps)
    if not steps or any(l < 1 for l in steps):
        raise ValueError("steps must be a non-empty list of offsets >= 1")
    if pyramid_height < 1:
        raise ValueError("pyramid_height must be >= 1")
    lat = extract_lattice(v, lattice_cfg.patch_size, lattice_cfg.overlap_fraction)
    max_step = max(steps)
    if lat.lattice_shape[0] < pyramid_height + max_step:
        raise LatticeTooSmall(
            f"lattice rows {lat.lattice_shape[0]} cannot fit a height-"
            f"{pyramid_height} pyramid plus step {max_step}"
        )
    rng = _spawn(seed, 0xC9C)
    if anchor is None:
        i = int(rng.integers(0, lat.lattice_shape[0] - max_step))
        rest = tuple(int(rng.integers(0, s)) for s in lat.lattice_shape[1:])
        anchor = (i,) + rest
    else:
        anchor = tuple(int(a) for a in anchor)
        if anchor[0] + max_step >= lat.lattice_shape[0]:
            raise LatticeTooSmall(f"anchor row {anchor[0]} leaves no room for step {max_step}")
    row_index = {tuple(c): r for r, c in enumerate(lat.coords.tolist())}
    ctx = pyramid_positions(anchor, pyramid_height, lat.lattice_shape)
    ctx_rows = [row_index[p] for p in ctx]
    tgt = [(anchor[0] + l,) + anchor[1:] for l in steps]
    tgt_rows = [row_index[p] for p in tgt]
    candidates = [r for r in range(len(lat)) if r not in set(tgt_rows)]
    if n_negatives > len(candidates):
        raise TooManyNegatives(
            f"{n_negatives} negatives requested, {len(candidates)} positions available"
        )
    neg_rows = rng.choice(len(candidates), size=n_negatives, replace=False)
    neg_rows = [candidates[r] for r in neg_rows]
    return CPCSample(
        context_patches=lat.patches[ctx_rows],
        context_coords=lat.coords[ctx_rows],
        target_patches=lat.patches[tgt_rows],
        target_coords=lat.coords[tgt_rows],
        negatives=lat.patches[neg_rows],
        negative_coords=lat.coords[neg_rows],
        steps=steps,
        anchor=anchor,
    )


# ---------------------------------------------------------------------------
# Relative patch location
# ---------------------------------------------------------------------------

@dataclass
class RPLSample:
    center_patch: np.ndarray   # (*patch, C)
    query_patch: np.ndarray
    label: int                 # query cell in row-major order, center removed
    query_cell: int            # row-major cell index, kept for audits
    center_cell: int


def rpl_center_cell(n: int, d: int) -> int:
    return (n ** d) // 2


def rpl_label_from_cell(query_cell: int, center_cell: int) -> int:
    return query_cell - 1 if query_cell > center_cell else query_cell


def rpl_cell_from_label(label: int, center_cell: int) -> int:
    return label + 1 if label >= center_cell else label


def build_rpl_sample(v: Volume, n: int, jitter: int, seed: int) -> RPLSample:
    """Center patch plus one query patch labeled by relative grid position."""
    if n % 2 == 0:
        raise EvenGridNoCenter(f"n={n} has no central cell")
    rng = _spawn(seed, 0x59)
    grid = extract_grid(v, GridSpec(n, jitter), seed=int(rng.integers(2 ** 31)))
    m = len(grid)
    center = rpl_center_cell(n, v.spatial_rank)
    query = int(rng.integers(0, m - 1))
    if query >= center:
        query += 1
    return RPLSample(
        center_patch=grid.patches[center],
        query_patch=grid.patches[query],
        label=rpl_label_from_cell(query, center),
        query_cell=query,
        center_cell=center,
    )


# ---------------------------------------------------------------------------
# Jigsaw
# ---------------------------------------------------------------------------

@dataclass
class JigsawSample:
    patch_sequence: np.ndarray   # (m, *patch, C), scrambled
    label: int                   # index into the permutation set
    grid_seed: int               # jitter draw, kept so audits can re-extract


def build_jigsaw_sample(v: Volume, n: int, jitter: int, pset: PermutationSet,
                        seed: int) -> JigsawSample:
    """Scramble the jittered grid by a permutation drawn from the set."""
    if pset.m != n ** v.spatial_rank:
        raise GridMismatch(f"set over {pset.m} cells, grid has {n ** v.spatial_rank}")
    rng = _spawn(seed, 0x1165)
    grid_seed = int(rng.integers(2 ** 31))
    grid = extract_grid(v, GridSpec(n, jitter), seed=grid_seed)
    label = int(rng.integers(0, len(pset)))
    return JigsawSample(apply_permutation(grid.patches, pset[label]), label, grid_seed)


def unscramble(sample: JigsawSample, pset: PermutationSet) -> np.ndarray:
    """Restore cell order; inverse of the scramble applied at build time."""
    return apply_permutation(sample.patch_sequence, invert(pset[sample.label]))


# ---------------------------------------------------------------------------
# Rotation
# ---------------------------------------------------------------------------

@dataclass
class RotationSample:
    rotated: Volume
    label: int


def build_rotation_sample(v: Volume, seed: int) -> RotationSample:
    """Rotate by a uniformly drawn class; the label is the class id."""
    classes = enumerate_rotations() if v.spatial_rank == 3 else enumerate_rotations_2d()
    rng = _spawn(seed, 0x207)
    label = int(rng.integers(0, len(classes)))
    return RotationSample(apply_rotation(v, classes[label]), label)


# ---------------------------------------------------------------------------
# Exemplar
# ---------------------------------------------------------------------------

@dataclass
class ExemplarTriplet:
    anchor: Volume
    positive: Volume
    negative: Volume
    negative_index: int


def build_exemplar_triplet(batch: list[Volume], i: int, cfg: TransformConfig,
                           seed: int) -> ExemplarTriplet:
    """Anchor, a transformed view of it, and a different batch sample."""
    if len(batch) < 2:
        raise BatchTooSmall("need at least two samples for a negative")
    anchor = batch[i]
    rng = _spawn(seed, 0xE8)
    others = [j for j in range(len(batch)) if j != i and batch[j].id != anchor.id]
    if not others:
        raise BatchTooSmall("no batch element with a different id")
    neg = others[int(rng.integers(0, len(others)))]
    positive = random_transform(anchor, cfg, seed=int(rng.integers(2 ** 31)))
    return ExemplarTriplet(anchor, positive, batch[neg], neg)
