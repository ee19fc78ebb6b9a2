"""Small numpy helpers for 4x4 rigid transforms.

Convention: a pose matrix T = [[R, t], [0, 1]] maps column vectors, so a
point p expressed in the child frame has coordinates R @ p + t in the
parent frame.
"""

import numpy as np

RIGID_TOL = 1e-6


def make_transform(rotation, translation):
    """Assemble a 4x4 matrix from a 3x3 rotation and a 3-vector."""
    T = np.eye(4)
    T[:3, :3] = rotation
    T[:3, 3] = translation
    return T


def rigidity_residual(T):
    """Max deviation from SE(3): orthonormality, det=+1, affine bottom row."""
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4):
        return np.inf
    R = T[:3, :3]
    res = np.abs(R.T @ R - np.eye(3)).max()
    res = max(res, abs(np.linalg.det(R) - 1.0))
    res = max(res, np.abs(T[3] - np.array([0.0, 0.0, 0.0, 1.0])).max())
    return res


def is_rigid(T, tol=RIGID_TOL):
    return rigidity_residual(T) < tol


def check_rigid(T, tol=RIGID_TOL, what="transform"):
    if not is_rigid(T, tol):
        raise ValueError(f"{what} is not rigid within {tol:g}")
    return np.asarray(T, dtype=np.float64)


def rigid_inverse(T):
    """Inverse of a rigid transform without a general 4x4 solve."""
    R = T[:3, :3]
    t = T[:3, 3]
    return make_transform(R.T, -R.T @ t)


def axis_angle_matrix(axis, angle):
    """Rodrigues rotation about a unit axis; exact identity at angle 0."""
    axis = np.asarray(axis, dtype=np.float64)
    K = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rotation_angle(R):
    """Rotation angle in radians; arccos argument clamped for round-off."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(min(1.0, max(-1.0, c))))


def random_rigid(rng, max_rotation, max_translation):
    """Uniform axis, uniform angle in [0, max_rotation], uniform per-axis
    translation in [-max_translation, max_translation]."""
    axis = rng.normal(size=3)
    n = np.linalg.norm(axis)
    axis = axis / n if n > 1e-12 else np.array([1.0, 0.0, 0.0])
    angle = rng.uniform(0.0, max_rotation) if max_rotation > 0 else 0.0
    if max_translation > 0:
        t = rng.uniform(-max_translation, max_translation, size=3)
    else:
        t = np.zeros(3)
    return make_transform(axis_angle_matrix(axis, angle), t)
