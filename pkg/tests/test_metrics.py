import numpy as np
import pytest

from voxssl.errors import DegenerateMarginals, ShapeMismatch
from voxssl.metrics import confusion_matrix, dice, dice_per_class, quadratic_weighted_kappa


def brute_force_dice(pred, truth, cls):
    """Set-arithmetic oracle: explicit voxel index sets."""
    p = {idx for idx in np.ndindex(pred.shape) if pred[idx] == cls}
    t = {idx for idx in np.ndindex(truth.shape) if truth[idx] == cls}
    if not p and not t:
        return 1.0
    return 2 * len(p & t) / (len(p) + len(t))


class TestDice:
    def test_perfect_agreement(self):
        m = np.zeros((4, 4, 4), int)
        m[1:3, 1:3, 1:3] = 1
        assert dice(m, m.copy(), 1) == 1.0

    def test_disjoint_regions(self):
        a = np.zeros((4, 4), int)
        b = np.zeros((4, 4), int)
        a[:2] = 1
        b[2:] = 1
        assert dice(a, b, 1) == 0.0

    def test_half_overlap_known_value(self):
        a = np.zeros(200, int)
        b = np.zeros(200, int)
        a[:100] = 1
        b[50:150] = 1
        assert dice(a, b, 1) == 0.5

    def test_empty_empty_is_one(self):
        a = np.zeros((3, 3), int)
        assert dice(a, a, 2) == 1.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 3, size=(6, 6, 6))
        b = rng.integers(0, 3, size=(6, 6, 6))
        for cls in range(3):
            assert dice(a, b, cls) == pytest.approx(brute_force_dice(a, b, cls), abs=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(42)
        a = rng.integers(0, 2, size=(5, 5))
        b = rng.integers(0, 2, size=(5, 5))
        assert dice(a, b, 1) == dice(b, a, 1)

    def test_per_class(self):
        rng = np.random.default_rng(3)
        a = rng.integers(0, 3, size=(5, 5, 5))
        b = rng.integers(0, 3, size=(5, 5, 5))
        scores = dice_per_class(a, b, 3)
        assert scores == [dice(a, b, c) for c in range(3)]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            dice(np.zeros((2, 2)), np.zeros((3, 3)), 0)


class TestKappa:
    def test_identical_is_one(self):
        r = np.array([0, 1, 2, 3, 4, 0, 1, 2])
        assert quadratic_weighted_kappa(r, r, 5) == pytest.approx(1.0, abs=1e-12)

    def test_permuted_near_zero(self):
        rng = np.random.default_rng(0)
        a = rng.integers(0, 5, size=10_000)
        b = rng.permutation(a)
        assert abs(quadratic_weighted_kappa(a, b, 5)) < 0.05

    def test_hand_confusion_matrix_oracle(self):
        # O = [[2,1,0],[0,2,1],[0,0,2]] over 8 items, C=3.
        # sum(w*O) = 0.5; marginals (3,3,2)x(2,3,3); sum(w*E) = 20.5/8;
        # kappa = 1 - 0.5/2.5625 = 33/41, worked by hand before coding.
        a = np.array([0, 0, 0, 1, 1, 1, 2, 2])
        b = np.array([0, 0, 1, 1, 1, 2, 2, 2])
        assert np.array_equal(
            confusion_matrix(a, b, 3), np.array([[2, 1, 0], [0, 2, 1], [0, 0, 2]])
        )
        assert quadratic_weighted_kappa(a, b, 3) == pytest.approx(33 / 41, abs=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        a = rng.integers(0, 3, size=500)
        b = rng.integers(0, 3, size=500)
        base = quadratic_weighted_kappa(a, b, 3)
        shifted = quadratic_weighted_kappa(a + 1, b + 1, 4)
        assert base == pytest.approx(shifted, abs=1e-12)

    def test_worse_than_chance_is_negative(self):
        a = np.array([0, 0, 0, 4, 4, 4])
        b = np.array([4, 4, 4, 0, 0, 0])
        assert quadratic_weighted_kappa(a, b, 5) < 0

    def test_degenerate_marginals_warn_one(self):
        a = np.ones(10, int)
        with pytest.warns(DegenerateMarginals):
            assert quadratic_weighted_kappa(a, a, 3) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatch):
            quadratic_weighted_kappa([0, 1], [0, 1, 2], 3)

    def test_out_of_range_ratings(self):
        with pytest.raises(ValueError):
            quadratic_weighted_kappa([0, 5], [0, 1], 5)
