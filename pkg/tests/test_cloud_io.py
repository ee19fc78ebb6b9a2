import struct

import numpy as np
import pytest

from eliot.cloud_io import (AugmentParams, PointCloud, SceneSpec, apply_rigid,
                            augment_pair, filter_range, load_kitti_bin,
                            save_kitti_bin, synth_scene)
from eliot.errors import MalformedFileError
from eliot.se3 import axis_angle_matrix, make_transform, rigid_inverse, rigidity_residual

from helpers import transform_points_oracle


def write_bin(path, records):
    """Independent binary writer: struct-packed little-endian float32."""
    with open(path, "wb") as fh:
        for rec in records:
            fh.write(struct.pack("<4f", *rec))


class TestLoadKittiBin:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "000000.bin"
        p.write_bytes(b"")
        cloud = load_kitti_bin(p)
        assert len(cloud) == 0
        assert cloud.feature_dim == 1

    def test_single_point(self, tmp_path):
        p = tmp_path / "000001.bin"
        write_bin(p, [(1.0, 2.0, 3.0, 0.5)])
        cloud = load_kitti_bin(p)
        assert cloud.positions.tolist() == [[1.0, 2.0, 3.0]]
        assert cloud.features.tolist() == [[0.5]]
        assert cloud.frame_index == 1

    def test_bad_length(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"\x00" * 24)
        with pytest.raises(MalformedFileError):
            load_kitti_bin(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_kitti_bin(tmp_path / "nope.bin")

    def test_zero_features_flag(self, tmp_path):
        p = tmp_path / "0.bin"
        write_bin(p, [(1.0, 0.0, 0.0, 0.7)])
        cloud = load_kitti_bin(p, zero_features=True)
        assert cloud.feature_dim == 1
        assert cloud.features[0, 0] == 0.0

    def test_round_trip_byte_identical(self, tmp_path):
        rng = np.random.default_rng(11)
        recs = rng.uniform(-50, 50, size=(257, 4)).astype(np.float32)
        recs[:, 3] = np.abs(recs[:, 3]) / 50.0
        src = tmp_path / "in.bin"
        src.write_bytes(recs.tobytes())
        cloud = load_kitti_bin(src)
        dst = tmp_path / "out.bin"
        save_kitti_bin(cloud, dst)
        assert src.read_bytes() == dst.read_bytes()


class TestFilterRange:
    def test_noop_bounds(self):
        rng = np.random.default_rng(0)
        cloud = PointCloud(rng.normal(size=(50, 3)), rng.uniform(size=(50, 1)))
        out = filter_range(cloud, 0.0, np.inf)
        assert np.array_equal(out.positions, cloud.positions)

    def test_band(self):
        cloud = PointCloud([[1, 0, 0], [3, 0, 0], [5, 0, 0]], np.zeros((3, 1)))
        out = filter_range(cloud, 2.0, 4.0)
        assert out.positions.tolist() == [[3, 0, 0]]

    def test_inverted_bounds(self):
        cloud = PointCloud([[1, 0, 0]], np.zeros((1, 1)))
        with pytest.raises(ValueError):
            filter_range(cloud, 5.0, 2.0)

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        cloud = PointCloud(rng.uniform(-20, 20, size=(200, 3)), np.zeros((200, 1)))
        once = filter_range(cloud, 3.0, 15.0)
        twice = filter_range(once, 3.0, 15.0)
        assert np.array_equal(once.positions, twice.positions)


class TestApplyRigid:
    def test_identity(self):
        rng = np.random.default_rng(1)
        cloud = PointCloud(rng.normal(size=(10, 3)), rng.uniform(size=(10, 1)))
        out = apply_rigid(cloud, np.eye(4))
        assert np.array_equal(out.positions, cloud.positions)
        assert np.array_equal(out.features, cloud.features)

    def test_quarter_turn(self):
        cloud = PointCloud([[1, 0, 0]], np.zeros((1, 1)))
        T = make_transform(axis_angle_matrix([0, 0, 1], np.pi / 2), [0, 0, 0])
        out = apply_rigid(cloud, T)
        assert np.allclose(out.positions[0], [0, 1, 0], atol=1e-9)

    def test_matches_matrix_vector_oracle(self):
        rng = np.random.default_rng(2)
        cloud = PointCloud(rng.normal(size=(64, 3)), rng.uniform(size=(64, 1)))
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        T = make_transform(axis_angle_matrix(axis, 0.7), rng.normal(size=3))
        out = apply_rigid(cloud, T)
        expected = transform_points_oracle(cloud.positions, T)
        assert np.abs(out.positions - expected).max() <= 1e-9

    def test_non_rigid_rejected(self):
        cloud = PointCloud([[1, 0, 0]], np.zeros((1, 1)))
        T = np.eye(4)
        T[0, 0] = 2.0
        with pytest.raises(ValueError):
            apply_rigid(cloud, T)

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(3)
        cloud = PointCloud(rng.normal(size=(40, 3)), np.zeros((40, 1)))
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        T = make_transform(axis_angle_matrix(axis, 1.2), rng.normal(size=3))
        back = apply_rigid(apply_rigid(cloud, T), rigid_inverse(T))
        assert np.abs(back.positions - cloud.positions).max() <= 1e-9


class TestAugmentPair:
    def _cloud(self):
        rng = np.random.default_rng(7)
        return PointCloud(rng.normal(size=(30, 3)), rng.uniform(size=(30, 1)))

    def test_degenerate_bounds(self):
        cloud = self._cloud()
        out, T = augment_pair(cloud, AugmentParams(0.0, 0.0, seed=4))
        assert np.array_equal(T, np.eye(4))
        assert np.array_equal(out.positions, cloud.positions)

    def test_deterministic(self):
        cloud = self._cloud()
        a1, t1 = augment_pair(cloud, AugmentParams(0.5, 0.3, seed=99))
        a2, t2 = augment_pair(cloud, AugmentParams(0.5, 0.3, seed=99))
        assert np.array_equal(t1, t2)
        assert np.array_equal(a1.positions, a2.positions)

    def test_label_self_consistent(self):
        cloud = self._cloud()
        out, T = augment_pair(cloud, AugmentParams(0.5, 0.3, seed=12))
        redo = apply_rigid(cloud, T)
        assert np.abs(redo.positions - out.positions).max() <= 1e-9

    def test_label_always_rigid(self):
        cloud = self._cloud()
        for seed in range(20):
            _, T = augment_pair(cloud, AugmentParams(1.0, 0.8, seed=seed))
            assert rigidity_residual(T) < 1e-9

    def test_negative_bounds_rejected(self):
        with pytest.raises(ValueError):
            AugmentParams(-1.0, 0.0)


class TestSynthScene:
    def test_deterministic(self):
        spec = SceneSpec(seed=7)
        a = synth_scene(spec)
        b = synth_scene(spec)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.features, b.features)

    def test_exact_count(self):
        spec = SceneSpec(planes=2, boxes=1, points_per_plane=100,
                         points_per_box=40, scatter_points=13, seed=1)
        assert len(synth_scene(spec)) == spec.total_points() == 253

    def test_plane_only_fits_plane(self):
        spec = SceneSpec(planes=1, boxes=0, points_per_plane=300,
                         scatter_points=0, seed=2)
        cloud = synth_scene(spec)
        centered = cloud.positions - cloud.positions.mean(axis=0)
        s = np.linalg.svd(centered, compute_uv=False)
        assert s[-1] <= 1e-6  # all points coplanar

    def test_reflectance_in_unit_interval(self):
        cloud = synth_scene(SceneSpec(seed=3))
        assert cloud.features.min() >= 0.0
        assert cloud.features.max() <= 1.0

    def test_zero_points_rejected(self):
        with pytest.raises(ValueError):
            synth_scene(SceneSpec(planes=0, boxes=0, points_per_plane=0,
                                  points_per_box=0, scatter_points=0))
