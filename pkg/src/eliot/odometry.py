"""Trajectory accumulation, KITTI pose file I/O, and the relative-error
evaluation: mean translational error (%) and rotational error (deg/100m)
over all subsequences of 100..800 m of ground-truth path, plus speed bins.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import PoseParseError
from .se3 import check_rigid, rigid_inverse, rotation_angle

EVAL_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)
SPEED_BIN_WIDTH = 2.0  # m/s
DEFAULT_FRAME_PERIOD = 0.1  # seconds (10 Hz sensor)


@dataclass
class Trajectory:
    """Poses of frame t expressed in frame-0 coordinates."""

    poses: np.ndarray  # (T, 4, 4)
    frame_period: float = DEFAULT_FRAME_PERIOD

    def __post_init__(self):
        poses = np.asarray(self.poses, dtype=np.float64)
        if poses.ndim != 3 or poses.shape[0] == 0 or poses.shape[1:] != (4, 4):
            raise ValueError(f"poses must be a non-empty (T, 4, 4) array, got {poses.shape}")
        for i, T in enumerate(poses):
            check_rigid(T, what=f"pose {i}")
        self.poses = poses

    def __len__(self):
        return self.poses.shape[0]

    def positions(self):
        return self.poses[:, :3, 3]


@dataclass
class Bucket:
    t_rel: float   # translational error, percent
    r_rel: float   # rotational error, deg per 100 m
    count: int


@dataclass
class EvalReport:
    per_length: dict = field(default_factory=dict)  # length (m) -> Bucket
    per_speed: dict = field(default_factory=dict)   # bin lower edge (m/s) -> Bucket
    t_rel: float = None                              # overall, percent
    r_rel: float = None                              # overall, deg per 100 m
    empty: bool = True


def accumulate(relatives, frame_period=DEFAULT_FRAME_PERIOD):
    """Chain relative transforms into a trajectory: pose 0 is the identity,
    pose[t+1] = pose[t] @ T_t, where T_t maps frame-(t+1) coordinates into
    frame-t coordinates."""
    poses = [np.eye(4)]
    for i, T in enumerate(relatives):
        T = check_rigid(T, what=f"relative transform {i}")
        poses.append(poses[-1] @ T)
    return Trajectory(np.stack(poses), frame_period)


def relative_poses(traj):
    """Inverse of accumulate: the frame-to-frame transforms of a trajectory."""
    return [rigid_inverse(traj.poses[t]) @ traj.poses[t + 1]
            for t in range(len(traj) - 1)]


def load_kitti_poses(path, frame_period=DEFAULT_FRAME_PERIOD):
    """Each line: 12 row-major values of the 3x4 [R|t] pose block."""
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            tokens = line.split()
            if len(tokens) != 12:
                raise PoseParseError(f"expected 12 values, got {len(tokens)}", line=lineno)
            try:
                vals = np.array([float(t) for t in tokens])
            except ValueError as exc:
                raise PoseParseError(str(exc), line=lineno) from None
            T = np.eye(4)
            T[:3, :] = vals.reshape(3, 4)
            poses.append(T)
    if not poses:
        raise PoseParseError("pose file is empty", line=0)
    return Trajectory(np.stack(poses), frame_period)


def save_kitti_poses(traj, path):
    with open(path, "w") as fh:
        for T in traj.poses:
            fh.write(" ".join(f"{v:.12e}" for v in T[:3, :].reshape(-1)) + "\n")


def load_calibration(path):
    """KITTI calib file: lines 'KEY: v1 ... v12'; returns key -> 4x4 matrix.
    Key 'Tr' holds the velodyne-to-camera extrinsic."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if ":" not in line:
                raise PoseParseError("expected 'KEY: values'", line=lineno)
            key, _, rest = line.partition(":")
            tokens = rest.split()
            if len(tokens) != 12:
                raise PoseParseError(f"expected 12 values, got {len(tokens)}", line=lineno)
            T = np.eye(4)
            T[:3, :] = np.array([float(t) for t in tokens]).reshape(3, 4)
            out[key.strip()] = T
    return out


def apply_calibration(traj, tr):
    """Conjugate every pose by a fixed extrinsic: pose' = tr @ pose @ tr^-1."""
    tr = check_rigid(tr, what="calibration")
    inv = rigid_inverse(tr)
    return Trajectory(np.stack([tr @ T @ inv for T in traj.poses]), traj.frame_period)


def _path_distances(poses):
    steps = np.linalg.norm(np.diff(poses[:, :3, 3], axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _first_frame_at_growth(dist, start, length):
    """First frame whose path growth since `start` reaches `length`."""
    target = dist[start] + length
    i = int(np.searchsorted(dist, target, side="left"))
    return i if i < len(dist) else -1


def evaluate(gt, pred, lengths=EVAL_LENGTHS):
    """Relative pose error over all (start frame, segment length) pairs.

    For each start frame and each length l, the end frame is the first one
    with l meters of ground-truth path growth; the error pose compares the
    relative gt and predicted motion over the segment, normalized by l.
    Buckets with no subsequences are simply absent from the report.
    """
    if len(gt) != len(pred):
        raise ValueError(f"frame counts differ: gt {len(gt)} vs pred {len(pred)}")
    dist = _path_distances(gt.poses)
    by_length = {l: [] for l in lengths}
    by_speed = {}
    all_t, all_r = [], []
    for start in range(len(gt)):
        for l in lengths:
            end = _first_frame_at_growth(dist, start, l)
            if end < 0:
                continue
            gt_delta = rigid_inverse(gt.poses[start]) @ gt.poses[end]
            pred_delta = rigid_inverse(pred.poses[start]) @ pred.poses[end]
            err = rigid_inverse(gt_delta) @ pred_delta
            t_err = np.linalg.norm(err[:3, 3]) / l
            r_err = rotation_angle(err[:3, :3]) / l
            all_t.append(t_err)
            all_r.append(r_err)
            by_length[l].append((t_err, r_err))
            speed = (dist[end] - dist[start]) / ((end - start) * gt.frame_period)
            sbin = math.floor(speed / SPEED_BIN_WIDTH) * SPEED_BIN_WIDTH
            by_speed.setdefault(sbin, []).append((t_err, r_err))
    report = EvalReport()
    if not all_t:
        return report
    rad_per_m_to_deg_per_100m = 180.0 / math.pi * 100.0
    for l, errs in by_length.items():
        if errs:
            e = np.array(errs)
            report.per_length[l] = Bucket(
                t_rel=float(e[:, 0].mean() * 100.0),
                r_rel=float(e[:, 1].mean() * rad_per_m_to_deg_per_100m),
                count=len(errs))
    for s in sorted(by_speed):
        e = np.array(by_speed[s])
        report.per_speed[s] = Bucket(
            t_rel=float(e[:, 0].mean() * 100.0),
            r_rel=float(e[:, 1].mean() * rad_per_m_to_deg_per_100m),
            count=len(e))
    report.t_rel = float(np.mean(all_t) * 100.0)
    report.r_rel = float(np.mean(all_r) * rad_per_m_to_deg_per_100m)
    report.empty = False
    return report


def format_report(report):
    """Key/value text rendering of an EvalReport."""
    lines = []
    if report.empty:
        lines.append("empty = true")
        return "\n".join(lines) + "\n"
    lines.append(f"t_rel_percent = {report.t_rel:.6f}")
    lines.append(f"r_rel_deg_per_100m = {report.r_rel:.6f}")
    for l, b in sorted(report.per_length.items()):
        lines.append(f"length_{int(l)}.t_rel = {b.t_rel:.6f}")
        lines.append(f"length_{int(l)}.r_rel = {b.r_rel:.6f}")
        lines.append(f"length_{int(l)}.count = {b.count}")
    for s, b in sorted(report.per_speed.items()):
        key = f"speed_{s:g}"
        lines.append(f"{key}.t_rel = {b.t_rel:.6f}")
        lines.append(f"{key}.r_rel = {b.r_rel:.6f}")
        lines.append(f"{key}.count = {b.count}")
    return "\n".join(lines) + "\n"


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.9g}" if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def _svg_polyline(points, color):
    coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    return (f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{coords}"/>')


def emit_plots(pred, report, out_dir, gt=None, axes=(0, 1)):
    """Write trajectory CSVs, a top-down SVG overlay, and error-vs-length /
    error-vs-speed CSV breakdowns."""
    os.makedirs(out_dir, exist_ok=True)
    ax, ay = axes

    def rows_of(traj):
        return [(i, float(p[0]), float(p[1]), float(p[2]))
                for i, p in enumerate(traj.positions())]

    _write_csv(os.path.join(out_dir, "trajectory_pred.csv"),
               ["frame", "x", "y", "z"], rows_of(pred))
    tracks = [(pred, "#d62728")]
    if gt is not None:
        _write_csv(os.path.join(out_dir, "trajectory_gt.csv"),
                   ["frame", "x", "y", "z"], rows_of(gt))
        tracks.insert(0, (gt, "#1f77b4"))

    pts = np.vstack([t.positions()[:, [ax, ay]] for t, _ in tracks])
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)
    size = 640.0
    margin = 40.0
    scale = (size - 2 * margin) / span.max()

    def to_px(xy):
        # y grows downward in SVG
        px = margin + (xy[:, 0] - lo[0]) * scale
        py = size - margin - (xy[:, 1] - lo[1]) * scale
        return np.column_stack([px, py])

    body = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:g}" '
            f'height="{size:g}" viewBox="0 0 {size:g} {size:g}">']
    body.append(f'<rect width="{size:g}" height="{size:g}" fill="white"/>')
    for traj, color in tracks:
        body.append(_svg_polyline(to_px(traj.positions()[:, [ax, ay]]), color))
    labels = (["gt", "pred"] if gt is not None else ["pred"])
    for i, (label, (_, color)) in enumerate(zip(labels, tracks)):
        y = 20 + 16 * i
        body.append(f'<text x="12" y="{y}" fill="{color}" font-size="12">{label}</text>')
    body.append("</svg>")
    with open(os.path.join(out_dir, "trajectory.svg"), "w") as fh:
        fh.write("\n".join(body) + "\n")

    _write_csv(os.path.join(out_dir, "error_by_length.csv"),
               ["length_m", "t_rel_percent", "r_rel_deg_per_100m", "count"],
               [(int(l), b.t_rel, b.r_rel, b.count)
                for l, b in sorted(report.per_length.items())])
    _write_csv(os.path.join(out_dir, "error_by_speed.csv"),
               ["speed_m_s", "t_rel_percent", "r_rel_deg_per_100m", "count"],
               [(float(s), b.t_rel, b.r_rel, b.count)
                for s, b in sorted(report.per_speed.items())])
