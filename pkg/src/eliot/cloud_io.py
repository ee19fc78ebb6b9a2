"""Point cloud loading, filtering, rigid transforms, augmentation, synthesis.

Owns the on-disk scan format: KITTI velodyne binaries, i.e. consecutive
little-endian float32 quadruples (x, y, z, reflectance).
"""

import re
from dataclasses import dataclass

import numpy as np

from .errors import MalformedFileError
from .se3 import check_rigid, random_rigid
from .seeding import make_rng

KITTI_RECORD_BYTES = 16

# Default ingestion gate: drop ego-vehicle returns and far clutter. The far
# bound also caps the coordinate volume the positional encoding normalizes.
DEFAULT_MIN_RANGE = 2.5
DEFAULT_MAX_RANGE = 75.0


@dataclass
class PointCloud:
    """Unordered 3-D points with per-point feature channels.

    positions: (n, 3) float64, meters, sensor frame.
    features: (n, c) float64; empty second axis allowed (c = 0).
    """

    positions: np.ndarray
    features: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        pos = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (n, 3), got {pos.shape}")
        feat = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        if feat.ndim != 2:
            raise ValueError(f"features must be (n, c), got {feat.shape}")
        if feat.shape[0] != pos.shape[0]:
            raise ValueError(
                f"positions ({pos.shape[0]}) and features ({feat.shape[0]}) "
                "must have equal length")
        if not np.isfinite(pos).all() or not np.isfinite(feat).all():
            raise ValueError("point cloud contains non-finite values")
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        pos.setflags(write=False)
        feat.setflags(write=False)
        self.positions = pos
        self.features = feat

    def __len__(self):
        return self.positions.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def ranges(self):
        """Euclidean distance of every point from the sensor origin."""
        return np.linalg.norm(self.positions, axis=1)


@dataclass
class AugmentParams:
    """Bounds for random rigid perturbations used as training noise/labels."""

    max_translation: float  # meters, per axis
    max_rotation: float     # radians
    seed: int = 0

    def __post_init__(self):
        if self.max_translation < 0 or self.max_rotation < 0:
            raise ValueError("augmentation bounds must be non-negative")


@dataclass
class SceneSpec:
    """Deterministic structured test scene: planes, boxes, loose scatter.

    The first three planes are a ground sheet and two walls meeting it, so
    every scene with planes >= 3 contains edges and corners. Extra planes
    are randomly tilted patches; boxes contribute six-face corner geometry.
    """

    planes: int = 3
    boxes: int = 2
    points_per_plane: int = 256
    points_per_box: int = 128
    scatter_points: int = 64
    extent: float = 10.0  # half-width of the scene footprint, meters
    seed: int = 0

    def total_points(self):
        return (self.planes * self.points_per_plane
                + self.boxes * self.points_per_box
                + self.scatter_points)


def _frame_index_from_name(path):
    m = re.fullmatch(r"(\d+)", str(path).rsplit("/", 1)[-1].split(".")[0])
    return int(m.group(1)) if m else 0


def load_kitti_bin(path, zero_features=False):
    """Parse a KITTI velodyne scan into a PointCloud (reflectance as c=1).

    zero_features keeps the channel but blanks it, for runs that should not
    see intensity.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % KITTI_RECORD_BYTES != 0:
        raise MalformedFileError(
            f"{path}: size {len(raw)} is not a multiple of {KITTI_RECORD_BYTES}")
    records = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    if not np.isfinite(records).all():
        raise MalformedFileError(f"{path}: contains non-finite values")
    features = records[:, 3:4].astype(np.float64)
    if zero_features:
        features = np.zeros_like(features)
    return PointCloud(
        positions=records[:, :3].astype(np.float64),
        features=features,
        frame_index=_frame_index_from_name(path),
    )


def save_kitti_bin(cloud, path):
    """Write a PointCloud as KITTI float32 records; round trips byte-exactly
    for clouds that came from load_kitti_bin."""
    records = np.zeros((len(cloud), 4), dtype="<f4")
    records[:, :3] = cloud.positions.astype("<f4")
    if cloud.feature_dim >= 1:
        records[:, 3] = cloud.features[:, 0].astype("<f4")
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


def load_scans(paths, zero_features=False):
    """Load several scans, returned in request order."""
    return [load_kitti_bin(p, zero_features=zero_features) for p in paths]


def filter_range(cloud, min_range=DEFAULT_MIN_RANGE, max_range=DEFAULT_MAX_RANGE):
    """Keep points with min_range <= ||p|| <= max_range, preserving order."""
    if not 0 <= min_range < max_range:
        raise ValueError(
            f"need 0 <= min_range < max_range, got [{min_range}, {max_range}]")
    r = cloud.ranges()
    mask = (r >= min_range) & (r <= max_range)
    return PointCloud(cloud.positions[mask], cloud.features[mask],
                      cloud.frame_index)


def apply_rigid(cloud, transform):
    """Map positions through an SE(3) matrix; features and order unchanged."""
    T = check_rigid(transform)
    positions = cloud.positions @ T[:3, :3].T + T[:3, 3]
    return PointCloud(positions, cloud.features, cloud.frame_index)


def augment_pair(source, params):
    """Sample a rigid perturbation within the given bounds and apply it.

    Returns (transformed cloud, transform); the transform is the exact
    training label: apply_rigid(source, transform) == returned cloud.
    Deterministic for a fixed (cloud-independent) seed.
    """
    rng = make_rng(params.seed, "augment")
    T = random_rigid(rng, params.max_rotation, params.max_translation)
    return apply_rigid(source, T), T


def _pseudo_reflectance(rng, n):
    return rng.uniform(0.0, 1.0, size=(n, 1))


def _plane_points(rng, spec, index):
    """Points on plane `index`. Planes 0..2 form a fixed ground+walls corner;
    later planes are random tilted patches."""
    n = spec.points_per_plane
    e = spec.extent
    u = rng.uniform(-e, e, size=n)
    v = rng.uniform(-e, e, size=n)
    if index == 0:          # ground sheet z = 0
        return np.column_stack([u, v, np.zeros(n)])
    if index == 1:          # wall x = 0.8 e
        return np.column_stack([np.full(n, 0.8 * e), u, 0.25 * (v + e)])
    if index == 2:          # wall y = 0.8 e
        return np.column_stack([u, np.full(n, 0.8 * e), 0.25 * (v + e)])
    normal = rng.normal(size=3)
    normal /= np.linalg.norm(normal)
    # orthonormal basis spanning the patch
    helper = np.array([1.0, 0.0, 0.0])
    if abs(normal[0]) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    b1 = np.cross(normal, helper)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(normal, b1)
    center = rng.uniform(-0.5 * e, 0.5 * e, size=3)
    return center + 0.4 * u[:, None] * b1 + 0.4 * v[:, None] * b2


def _box_points(rng, spec):
    """Points on the faces of one axis-aligned box."""
    n = spec.points_per_box
    e = spec.extent
    center = rng.uniform(-0.6 * e, 0.6 * e, size=3)
    center[2] = 0.0
    half = rng.uniform(0.05 * e, 0.15 * e, size=3)
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2                      # which coordinate is pinned
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for i in range(n):
        others = [j for j in range(3) if j != axis[i]]
        p = np.empty(3)
        p[axis[i]] = sign[i] * half[axis[i]]
        p[others[0]] = uv[i, 0] * half[others[0]]
        p[others[1]] = uv[i, 1] * half[others[1]]
        pts[i] = p
    pts += center
    pts[:, 2] += half[2]                  # rest the box on the ground plane
    return pts


def synth_scene(spec):
    """Deterministic structured scene with planar and corner geometry."""
    if spec.total_points() < 1:
        raise ValueError("scene must contain at least one point")
    rng = make_rng(spec.seed, "scene")
    chunks = []
    for i in range(spec.planes):
        chunks.append(_plane_points(rng, spec, i))
    for _ in range(spec.boxes):
        chunks.append(_box_points(rng, spec))
    if spec.scatter_points:
        e = spec.extent
        scatter = np.column_stack([
            rng.uniform(-e, e, size=spec.scatter_points),
            rng.uniform(-e, e, size=spec.scatter_points),
            rng.uniform(0.0, 0.4 * e, size=spec.scatter_points),
        ])
        chunks.append(scatter)
    positions = np.vstack(chunks)
    features = _pseudo_reflectance(rng, positions.shape[0])
    return PointCloud(positions, features)
