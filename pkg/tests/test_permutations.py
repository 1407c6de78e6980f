import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxssl.errors import InfeasibleRequest, LengthMismatch, NotABijection
from voxssl.permutations import (
    PermutationSet,
    apply_permutation,
    generate_permutation_set,
    hamming,
    invert,
)


def naive_hamming(p, q):
    return sum(1 for a, b in zip(p, q) if a != b)


class TestHamming:
    def test_equal_is_zero(self):
        p = list(range(27))
        assert hamming(p, p) == 0

    def test_identity_vs_reversal_27(self):
        ident = list(range(27))
        assert hamming(ident, ident[::-1]) == 26  # index 13 is its own mirror

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_naive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.permutation(27)
        q = rng.permutation(27)
        assert hamming(p, q) == naive_hamming(p, q)
        assert hamming(p, q) == hamming(q, p)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            hamming([0, 1], [0, 1, 2])

    @given(st.permutations(list(range(8))), st.permutations(list(range(8))))
    @settings(max_examples=50, deadline=None)
    def test_never_one(self, p, q):
        assert hamming(p, q) != 1  # a single misplaced element is impossible


class TestInvertApply:
    def test_invert_identity(self):
        assert invert([0, 1, 2]).tolist() == [0, 1, 2]

    def test_invert_forced_example(self):
        assert invert([2, 0, 1]).tolist() == [1, 2, 0]

    @given(st.permutations(list(range(10))))
    @settings(max_examples=50, deadline=None)
    def test_compose_with_inverse_is_identity(self, p):
        p = np.array(p)
        inv = invert(p)
        assert np.array_equal(p[inv], np.arange(10))
        assert np.array_equal(inv[p], np.arange(10))

    def test_invert_rejects_non_bijection(self):
        with pytest.raises(NotABijection):
            invert([0, 0, 2])

    def test_apply_identity_unchanged(self):
        items = np.arange(12).reshape(4, 3)
        out = apply_permutation(items, [0, 1, 2, 3])
        assert np.array_equal(out, items)

    def test_apply_then_inverse_restores(self):
        rng = np.random.default_rng(3)
        items = rng.normal(size=(8, 2, 2, 2, 1)).astype(np.float32)
        p = rng.permutation(8)
        scrambled = apply_permutation(items, p)
        restored = apply_permutation(scrambled, invert(p))
        assert np.array_equal(restored, items)

    def test_apply_matches_gather_oracle(self):
        rng = np.random.default_rng(7)
        items = list(rng.normal(size=(6, 4)))
        p = rng.permutation(6)
        out = apply_permutation(items, p)
        for t in range(6):
            assert np.array_equal(out[t], items[p[t]])

    def test_apply_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            apply_permutation(np.zeros((3, 2)), [0, 1])


class TestGeneration:
    def test_m3_p6_is_exhaustive(self):
        ps = generate_permutation_set(3, 6, seed=0)
        got = {tuple(p) for p in ps.perms}
        assert got == set(itertools.permutations(range(3)))
        assert len(ps) == 6

    def test_first_is_identity_and_all_distinct(self):
        ps = generate_permutation_set(8, 40, seed=1)
        assert ps.perms[0].tolist() == list(range(8))
        assert len({tuple(p) for p in ps.perms}) == 40

    def test_all_rows_are_bijections(self):
        ps = generate_permutation_set(9, 50, seed=2)
        for p in ps.perms:
            invert(p)

    def test_deterministic_per_seed(self):
        a = generate_permutation_set(8, 25, seed=5)
        b = generate_permutation_set(8, 25, seed=5)
        c = generate_permutation_set(8, 25, seed=6)
        assert np.array_equal(a.perms, b.perms)
        assert not np.array_equal(a.perms, c.perms)

    def test_infeasible_request(self):
        with pytest.raises(InfeasibleRequest):
            generate_permutation_set(3, 7, seed=0)
        with pytest.raises(InfeasibleRequest):
            generate_permutation_set(1, 1, seed=0)

    def test_greedy_trace_audit(self):
        ps = generate_permutation_set(8, 30, seed=4)
        assert len(ps.trace) == 29
        for chosen_min, _, batch_best_min in ps.trace:
            assert chosen_min >= batch_best_min

    def test_stats_match_direct_computation(self):
        ps = generate_permutation_set(6, 20, seed=8)
        dists = [
            naive_hamming(ps.perms[i], ps.perms[j])
            for i in range(20) for j in range(i + 1, 20)
        ]
        assert ps.stats["min_hamming"] == min(dists)
        assert ps.stats["avg_hamming"] == pytest.approx(sum(dists) / len(dists))

    def test_greedy_beats_random_on_min_distance(self):
        # median over seeds: greedy min pairwise Hamming >= random distinct set's
        def random_distinct(m, P, seed):
            rng = np.random.default_rng(seed)
            seen = {tuple(range(m))}
            while len(seen) < P:
                seen.add(tuple(rng.permutation(m)))
            return np.array(sorted(seen))

        diffs = []
        for seed in range(5):
            greedy = generate_permutation_set(10, 30, seed=seed, candidates=200)
            rand = random_distinct(10, 30, seed)
            rmin = min(
                naive_hamming(rand[i], rand[j])
                for i in range(30) for j in range(i + 1, 30)
            )
            diffs.append(greedy.stats["min_hamming"] - rmin)
        assert np.median(diffs) >= 0

    def test_json_roundtrip(self, tmp_path):
        ps = generate_permutation_set(8, 16, seed=3)
        path = ps.save(tmp_path / "perms.json")
        back = PermutationSet.load(path)
        assert np.array_equal(back.perms, ps.perms)
        assert back.seed == ps.seed
        assert back.stats == ps.stats
