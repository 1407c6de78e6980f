"""Hamming-separated permutation sets for the patch-scramble task.

The label space is a fixed set of P permutations of the m grid cells,
built greedily so pairwise Hamming distances stay large: starting from the
identity, each step samples a fresh pool of random candidates and keeps the
one with the largest minimum distance to the permutations already chosen
(ties broken by larger average distance, then by sample order).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InfeasibleRequest, LengthMismatch, NotABijection


def hamming(p, q) -> int:
    """Number of positions where two equal-length permutations differ."""
    p = np.asarray(p)
    q = np.asarray(q)
    if p.shape != q.shape:
        raise LengthMismatch(f"lengths {p.shape} vs {q.shape}")
    return int((p != q).sum())


def invert(p) -> np.ndarray:
    """Inverse permutation: invert(p)[p[i]] = i."""
    p = np.asarray(p, dtype=np.int64)
    m = p.shape[0]
    if not np.array_equal(np.sort(p), np.arange(m)):
        raise NotABijection(f"{p.tolist()} is not a permutation of 0..{m - 1}")
    inv = np.empty(m, dtype=np.int64)
    inv[p] = np.arange(m)
    return inv


def apply_permutation(patches, p):
    """Reorder items so output[t] = patches[p[t]]."""
    p = np.asarray(p, dtype=np.int64)
    if len(patches) != p.shape[0]:
        raise LengthMismatch(f"{len(patches)} items vs permutation of {p.shape[0]}")
    invert(p)  # validates bijection
    if isinstance(patches, np.ndarray):
        return patches[p]
    return [patches[i] for i in p]


@dataclass
class PermutationSet:
    """Greedily selected permutations; perms[0] is always the identity."""

    perms: np.ndarray            # (P, m) int64
    seed: int
    stats: dict
    # per greedy step: (chosen_min, chosen_total, best_candidate_min)
    trace: list = field(default_factory=list, repr=False)

    @property
    def m(self) -> int:
        return self.perms.shape[1]

    def __len__(self) -> int:
        return self.perms.shape[0]

    def __getitem__(self, idx: int) -> np.ndarray:
        return self.perms[idx]

    def to_json(self) -> str:
        payload = {
            "m": self.m,
            "P": len(self),
            "seed": self.seed,
            "perms": self.perms.tolist(),
            "stats": self.stats,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "PermutationSet":
        payload = json.loads(Path(path).read_text())
        perms = np.array(payload["perms"], dtype=np.int64)
        if perms.shape != (payload["P"], payload["m"]):
            raise ValueError("permutation table shape disagrees with header")
        return cls(perms, payload["seed"], payload["stats"])


def _pairwise_stats(perms: np.ndarray) -> dict:
    n = perms.shape[0]
    if n < 2:
        return {"min_hamming": 0, "avg_hamming": 0.0}
    mn = perms.shape[1] + 1
    total = 0
    for i in range(n - 1):
        d = (perms[i + 1:] != perms[i]).sum(axis=1)
        mn = min(mn, int(d.min()))
        total += int(d.sum())
    pairs = n * (n - 1) // 2
    return {"min_hamming": mn, "avg_hamming": total / pairs}


def generate_permutation_set(m: int, P: int, seed: int,
                             candidates: int = 1000) -> PermutationSet:
    """Greedy max-min-Hamming selection of P permutations of m elements.

    Deterministic per (m, P, seed, candidates). Raises InfeasibleRequest
    when P exceeds m!.
    """
    if m < 2:
        raise InfeasibleRequest("m must be >= 2")
    if P < 1:
        raise InfeasibleRequest("P must be >= 1")
    if P > math.factorial(m):
        raise InfeasibleRequest(f"cannot pick {P} distinct permutations of {m} elements")
    rng = np.random.default_rng(seed)
    selected = np.empty((P, m), dtype=np.int64)
    selected[0] = np.arange(m)
    trace = []
    base = np.tile(np.arange(m, dtype=np.int64), (candidates, 1))
    for step in range(1, P):
        chosen = None
        for _ in range(64):
            pool = rng.permuted(base, axis=1)
            # (C, S) pairwise Hamming to everything selected so far
            d = (pool[:, None, :] != selected[None, :step, :]).sum(axis=2)
            mins = d.min(axis=1)
            if not (mins > 0).any():
                continue  # whole pool already selected; redraw
            totals = d.sum(axis=1)
            best_min = int(mins.max())
            tied = mins == best_min
            best_total = int(totals[tied].max())
            idx = int(np.flatnonzero(tied & (totals == best_total))[0])
            chosen = pool[idx]
            trace.append((best_min, best_total, best_min))
            break
        if chosen is None:
            raise InfeasibleRequest(
                f"no unseen permutation found at step {step} after 64 candidate pools"
            )
        selected[step] = chosen
    perms = selected[:P]
    return PermutationSet(perms, seed, _pairwise_stats(perms), trace)
