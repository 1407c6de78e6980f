import numpy as np
import pytest

from voxssl.errors import DimensionMismatch
from voxssl.rotations import (
    RotationClass,
    apply_rotation,
    enumerate_rotations,
    enumerate_rotations_2d,
    inverse_rotation,
)
from voxssl.volume import Volume


def matrix_oracle(arr, axis, angle):
    """Per-voxel index-map oracle: rotate about the box center with the
    right-hand-rule rotation matrix, axes (0,1,2) read as (x,y,z)."""
    th = np.deg2rad(angle)
    c, s = np.cos(th), np.sin(th)
    ax = {"x": 0, "y": 1, "z": 2}[axis]
    i, j, k = ax, (ax + 1) % 3, (ax + 2) % 3
    R = np.zeros((3, 3))
    R[i, i] = 1.0
    R[j, j] = c
    R[j, k] = -s
    R[k, j] = s
    R[k, k] = c
    shp = np.array(arr.shape[:3], float)
    cin = (shp - 1) / 2
    out_shape = np.rint(np.abs(R) @ shp).astype(int)
    cout = (out_shape - 1) / 2
    out = np.zeros(tuple(out_shape) + arr.shape[3:], arr.dtype)
    for idx in np.ndindex(*arr.shape[:3]):
        q = R @ (np.array(idx, float) - cin) + cout
        out[tuple(np.rint(q).astype(int))] = arr[idx]
    return out


def asymmetric_volume(n=3, channels=1):
    data = np.arange(n ** 3 * channels, dtype=np.float32).reshape(n, n, n, channels)
    return Volume(data, id="asym")


class TestEnumeration:
    def test_ten_classes(self):
        rots = enumerate_rotations()
        assert len(rots) == 10
        assert [r.class_id for r in rots] == list(range(10))

    def test_fixed_order(self):
        rots = enumerate_rotations()
        assert rots[0].axis is None and rots[0].angle == 0
        expected = [("x", 90), ("x", 180), ("x", 270),
                    ("y", 90), ("y", 180), ("y", 270),
                    ("z", 90), ("z", 180), ("z", 270)]
        assert [(r.axis, r.angle) for r in rots[1:]] == expected

    def test_twelve_operators_collapse_to_ten(self):
        """All 12 (axis, angle in {0,90,180,270}) operators on an asymmetric
        volume: exactly the three angle-0 operators coincide."""
        v = asymmetric_volume()
        outputs = []
        for axis in ("x", "y", "z"):
            for angle in (0, 90, 180, 270):
                if angle == 0:
                    out = v.data.copy()
                else:
                    out = apply_rotation(v, _cls(axis, angle)).data
                outputs.append(((axis, angle), out))
        zero = [o for (a, ang), o in outputs if ang == 0]
        assert all(np.array_equal(zero[0], z) for z in zero)
        distinct = [zero[0]] + [o for (a, ang), o in outputs if ang != 0]
        assert len(distinct) == 10
        for a in range(10):
            for b in range(a + 1, 10):
                assert not np.array_equal(distinct[a], distinct[b])

    def test_2d_enumeration(self):
        rots = enumerate_rotations_2d()
        assert len(rots) == 4
        assert [(r.axis, r.angle) for r in rots] == [
            (None, 0), ("z", 90), ("z", 180), ("z", 270)]


def _cls(axis, angle):
    for r in enumerate_rotations():
        if r.axis == axis and r.angle == angle:
            return r
    raise KeyError((axis, angle))


class TestApply:
    def test_identity_unchanged(self):
        v = asymmetric_volume()
        out = apply_rotation(v, enumerate_rotations()[0])
        assert np.array_equal(out.data, v.data)

    @pytest.mark.parametrize("axis", ["x", "y", "z"])
    def test_180_is_involution(self, axis):
        v = asymmetric_volume(4)
        r = _cls(axis, 180)
        twice = apply_rotation(apply_rotation(v, r), r)
        assert np.array_equal(twice.data, v.data)

    def test_z90_has_order_four(self):
        v = asymmetric_volume(5)
        r = _cls("z", 90)
        out = v
        for _ in range(4):
            out = apply_rotation(out, r)
        assert np.array_equal(out.data, v.data)

    @pytest.mark.parametrize("cid", range(10))
    def test_matches_matrix_oracle(self, cid):
        rng = np.random.default_rng(cid)
        v = Volume(rng.normal(size=(4, 4, 4, 2)).astype(np.float32), id="o")
        r = enumerate_rotations()[cid]
        mine = apply_rotation(v, r).data
        if r.axis is None:
            assert np.array_equal(mine, v.data)
        else:
            assert np.array_equal(mine, matrix_oracle(v.data, r.axis, r.angle))

    def test_noncubic_shapes_permute(self):
        v = Volume(np.zeros((3, 4, 5, 1), np.float32), id="nc")
        assert apply_rotation(v, _cls("x", 90)).spatial_shape == (3, 5, 4)
        assert apply_rotation(v, _cls("y", 90)).spatial_shape == (5, 4, 3)
        assert apply_rotation(v, _cls("z", 90)).spatial_shape == (4, 3, 5)

    def test_intensity_multiset_preserved(self):
        rng = np.random.default_rng(2)
        v = Volume(rng.normal(size=(5, 5, 5, 1)).astype(np.float32), id="h")
        for r in enumerate_rotations():
            out = apply_rotation(v, r)
            assert np.array_equal(np.sort(out.data.ravel()), np.sort(v.data.ravel()))

    def test_roundtrip_every_class_bitwise(self):
        rng = np.random.default_rng(4)
        v = Volume(rng.normal(size=(6, 6, 6, 1)).astype(np.float32), id="rt")
        for r in enumerate_rotations():
            back = apply_rotation(apply_rotation(v, r), inverse_rotation(r))
            assert np.array_equal(back.data, v.data)

    def test_ten_outputs_pairwise_distinct_on_generic_volume(self):
        rng = np.random.default_rng(6)
        v = Volume(rng.normal(size=(4, 4, 4, 1)).astype(np.float32), id="g")
        outs = [apply_rotation(v, r).data for r in enumerate_rotations()]
        for a in range(10):
            for b in range(a + 1, 10):
                assert not np.array_equal(outs[a], outs[b])


class Test2D:
    def test_z_rotations_allowed(self):
        rng = np.random.default_rng(1)
        img = Volume(rng.normal(size=(5, 5, 1)).astype(np.float32), id="2d")
        out = img
        for _ in range(4):
            out = apply_rotation(out, _cls("z", 90))
        assert np.array_equal(out.data, img.data)

    def test_out_of_plane_rejected(self):
        img = Volume(np.zeros((4, 4, 1), np.float32), id="2d")
        with pytest.raises(DimensionMismatch):
            apply_rotation(img, _cls("x", 90))

    def test_2d_matches_2x2_known_case(self):
        img = Volume(np.array([[1., 2.], [3., 4.]], np.float32)[..., None], id="k")
        out = apply_rotation(img, _cls("z", 90)).data[..., 0]
        # +90 about z carries +x onto +y: (0,0)->(., 0) bottom of first column
        assert np.array_equal(out, np.array([[2., 4.], [1., 3.]], np.float32))
