"""Classic registration baselines: point-to-point and point-to-plane ICP.

Both return the rigid transform mapping the source cloud onto the target,
i.e. for consecutive scans icp(scan_{t+1}, scan_t) estimates the motion
that expresses frame-(t+1) points in frame-t coordinates.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGeometryError
from .se3 import axis_angle_matrix, check_rigid, make_transform, rotation_angle

_COND_LIMIT = 1e12


@dataclass
class IcpParams:
    max_iterations: int = 50
    convergence_tol: float = 1e-6        # norm of the per-iteration update
    max_correspondence_dist: float = 2.0  # meters
    normal_k: int = 10                   # neighbors for normal estimation

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_tol <= 0 or self.max_correspondence_dist <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class IcpResult:
    transform: np.ndarray
    residual: float
    iterations: int
    converged: bool
    # (pre-fit, post-fit) RMS residual on each iteration's correspondences;
    # for point-to-point the fit is optimal, so post <= pre always holds.
    residual_history: list = field(default_factory=list)


def _orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


def _correspondences(src_pts, tree, target_pts, max_dist):
    dist, idx = tree.query(src_pts, distance_upper_bound=max_dist)
    valid = np.isfinite(dist)
    if valid.sum() < 3:
        raise DegenerateGeometryError(
            f"only {int(valid.sum())} correspondences within {max_dist} m")
    return src_pts[valid], target_pts[idx[valid]], dist[valid]


def _fit_rigid(P, Q):
    """Closed-form least-squares rigid fit P -> Q (centroids + SVD with
    reflection guard)."""
    cp = P.mean(axis=0)
    cq = Q.mean(axis=0)
    H = (P - cp).T @ (Q - cq)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise DegenerateGeometryError("correspondences are collinear")
    D = np.diag([1.0, 1.0, np.linalg.det(Vt.T @ U.T)])
    R = Vt.T @ D @ U.T
    t = cq - R @ cp
    return R, t


def icp_point_to_point(source, target, init=None, params=None):
    """Besl-McKay style ICP with an SVD rigid fit per iteration."""
    params = params or IcpParams()
    if len(source) < 3 or len(target) < 3:
        raise DegenerateGeometryError("both clouds need at least 3 points")
    T = np.eye(4) if init is None else check_rigid(init).copy()
    tree = cKDTree(target.positions)
    history = []
    converged = False
    residual = np.inf
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        moved = source.positions @ T[:3, :3].T + T[:3, 3]
        P, Q, dist = _correspondences(moved, tree, target.positions,
                                      params.max_correspondence_dist)
        pre = float(np.sqrt(np.mean(dist ** 2)))
        R, t = _fit_rigid(P, Q)
        post = float(np.sqrt(np.mean(np.sum((P @ R.T + t - Q) ** 2, axis=1))))
        history.append((pre, post))
        residual = post
        T = make_transform(R, t) @ T
        step = rotation_angle(R) + np.linalg.norm(t)
        if step < params.convergence_tol:
            converged = True
            break
    T[:3, :3] = _orthonormalize(T[:3, :3])
    return IcpResult(T, residual, iterations, converged, history)


def estimate_normals(cloud, k=10):
    """Per-point unit normals: smallest-eigenvector PCA over k neighbors."""
    pts = cloud.positions
    if len(pts) < k:
        raise DegenerateGeometryError(f"cloud has {len(pts)} points, need >= {k}")
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    normals = np.empty_like(pts)
    for i, nbrs in enumerate(idx):
        patch = pts[nbrs]
        centered = patch - patch.mean(axis=0)
        _, _, Vt = np.linalg.svd(centered, full_matrices=False)
        normals[i] = Vt[-1]
    return normals


def icp_point_to_plane(source, target, init=None, params=None):
    """Point-to-plane ICP: small-angle linearized least squares on the
    target-normal residuals, incremental rotation rebuilt by Rodrigues so
    every step stays exactly rigid."""
    params = params or IcpParams()
    if len(source) < 3 or len(target) < 3:
        raise DegenerateGeometryError("both clouds need at least 3 points")
    T = np.eye(4) if init is None else check_rigid(init).copy()
    tree = cKDTree(target.positions)
    normals = estimate_normals(target, params.normal_k)
    history = []
    converged = False
    residual = np.inf
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        moved = source.positions @ T[:3, :3].T + T[:3, 3]
        dist, idx = tree.query(moved, distance_upper_bound=params.max_correspondence_dist)
        valid = np.isfinite(dist)
        if valid.sum() < 6:
            raise DegenerateGeometryError(
                f"only {int(valid.sum())} correspondences within "
                f"{params.max_correspondence_dist} m")
        p = moved[valid]
        q = target.positions[idx[valid]]
        n = normals[idx[valid]]
        r = np.einsum("ij,ij->i", p - q, n)
        pre = float(np.sqrt(np.mean(r ** 2)))
        A = np.hstack([np.cross(p, n), n])          # rows: [ (p x n)^T, n^T ]
        s = np.linalg.svd(A, compute_uv=False)
        if s[-1] <= 0 or s[0] / s[-1] > _COND_LIMIT:
            raise DegenerateGeometryError(
                f"normal system is rank deficient (cond {s[0] / max(s[-1], 1e-300):.2e})")
        x, *_ = np.linalg.lstsq(A, -r, rcond=None)
        omega, t = x[:3], x[3:]
        angle = np.linalg.norm(omega)
        axis = omega / angle if angle > 0 else np.array([1.0, 0.0, 0.0])
        R = axis_angle_matrix(axis, angle)
        moved2 = p @ R.T + t
        post = float(np.sqrt(np.mean(
            np.einsum("ij,ij->i", moved2 - q, n) ** 2)))
        history.append((pre, post))
        residual = post
        T = make_transform(R, t) @ T
        if np.linalg.norm(x) < params.convergence_tol:
            converged = True
            break
    T[:3, :3] = _orthonormalize(T[:3, :3])
    return IcpResult(T, residual, iterations, converged, history)
