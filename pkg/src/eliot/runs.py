"""Command implementations behind the CLI: dataset synthesis, training,
odometry runs, evaluation, attention dumps. Every command writes a manifest
(config snapshot, seed, format versions) into its output directory and
holds a lock file while writing."""

import csv
import json
import os
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import torch

from . import dualquat, icp, odometry
from .cloud_io import (apply_rigid, augment_pair, filter_range,
                       load_kitti_bin, save_kitti_bin, synth_scene)
from .config import LEARNED_METHODS, snapshot
from .diffops import (CHECKPOINT_VERSION, AdamState, adam_step,
                      load_checkpoint, save_checkpoint)
from .errors import UsageError
from .model import EliotNet, NetConfig
from .se3 import make_transform, axis_angle_matrix, rigid_inverse
from .seeding import make_rng

DATASET_VERSION = 1
MANIFEST_NAME = "manifest.json"


@contextmanager
def output_lock(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    lock = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"{out_dir} is locked by another writer (remove {lock} if stale)")
    try:
        os.close(fd)
        yield
    finally:
        os.unlink(lock)


def write_manifest(out_dir, cfg, command, extra=None):
    payload = {
        "command": command,
        "seed": cfg.seed,
        "dataset_version": DATASET_VERSION,
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": snapshot(cfg),
    }
    payload.update(extra or {})
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(payload, fh, indent=1)
    return payload


def _require_out(cfg):
    if not cfg.out_dir:
        raise UsageError("an output directory is required (--out or `out = ...`)")
    return cfg.out_dir


def _scan_dir(root, sequence):
    return os.path.join(root, "sequences", sequence, "velodyne")


def _scan_path(root, sequence, index):
    return os.path.join(_scan_dir(root, sequence), f"{index:06d}.bin")


def _pose_path(root, sequence):
    return os.path.join(root, "poses", f"{sequence}.txt")


def _label_path(root, sequence):
    return os.path.join(root, "labels", f"{sequence}.txt")


def _write_transforms(path, transforms):
    with open(path, "w") as fh:
        for T in transforms:
            fh.write(" ".join(f"{v:.12e}" for v in np.asarray(T)[:3, :].reshape(-1)) + "\n")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def synth_run(cfg, force=False):
    """Generate a synthetic dataset: either independent labeled scan pairs
    (2N scans + relative-transform labels) or one continuous sequence with
    ground-truth poses."""
    out = _require_out(cfg)
    if os.path.isdir(out) and os.listdir(out) and not force:
        raise RuntimeError(f"output directory {out} is not empty (use --force)")
    os.makedirs(out, exist_ok=True)
    with output_lock(out):
        seq = cfg.sequence
        os.makedirs(_scan_dir(out, seq), exist_ok=True)
        if cfg.synth_mode == "pairs":
            count = _synth_pairs(cfg, out, seq)
            extra = {"mode": "pairs", "pairs": cfg.synth_pairs, "scans": count}
        else:
            count = _synth_sequence(cfg, out, seq)
            extra = {"mode": "sequence", "frames": count, "scans": count}
        write_manifest(out, cfg, "synth", extra)
    return out


def _synth_pairs(cfg, out, seq):
    os.makedirs(os.path.join(out, "labels"), exist_ok=True)
    labels = []
    for i in range(cfg.synth_pairs):
        scene = synth_scene(replace(cfg.scene, seed=int(
            make_rng(cfg.seed, "pair-scene", i).integers(0, 2 ** 62))))
        aug = cfg.augment_params(int(make_rng(cfg.seed, "pair-motion", i).integers(0, 2 ** 62)))
        # scene is the later frame (q); the perturbed copy is the earlier
        # frame (p), so the label maps q coordinates into p coordinates.
        cloud_p, T = augment_pair(scene, aug)
        save_kitti_bin(cloud_p, _scan_path(out, seq, 2 * i))
        save_kitti_bin(scene, _scan_path(out, seq, 2 * i + 1))
        labels.append(T)
    _write_transforms(_label_path(out, seq), labels)
    return 2 * cfg.synth_pairs


def _synth_sequence(cfg, out, seq):
    os.makedirs(os.path.join(out, "poses"), exist_ok=True)
    world = synth_scene(cfg.scene)
    e = cfg.scene.extent
    start = make_transform(np.eye(3), np.array([-0.8 * e, -0.2 * e, 1.5]))
    step = make_transform(axis_angle_matrix(np.array([0.0, 0.0, 1.0]), cfg.synth_step_yaw),
                          np.asarray(cfg.synth_step_translation, dtype=np.float64))
    poses = [start]
    for _ in range(cfg.synth_frames - 1):
        poses.append(poses[-1] @ step)
    for t, pose in enumerate(poses):
        scan = apply_rigid(world, rigid_inverse(pose))
        scan = filter_range(scan, cfg.min_range, cfg.max_range)
        save_kitti_bin(scan, _scan_path(out, seq, t))
    # ground truth in frame-0 coordinates
    inv0 = rigid_inverse(poses[0])
    gt = odometry.Trajectory(np.stack([inv0 @ p for p in poses]))
    odometry.save_kitti_poses(gt, _pose_path(out, seq))
    return cfg.synth_frames


# ---------------------------------------------------------------------------
# dataset loading
# ---------------------------------------------------------------------------

def _read_transform_lines(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            vals = np.array([float(t) for t in line.split()]).reshape(3, 4)
            T = np.eye(4)
            T[:3, :] = vals
            out.append(T)
    return out


def _dataset_mode(root):
    """Synthesized datasets carry a manifest; bare KITTI-layout trees (scans
    plus a pose file) are treated as sequences."""
    path = os.path.join(root, MANIFEST_NAME)
    if os.path.exists(path):
        with open(path) as fh:
            return json.load(fh).get("mode", "sequence")
    return "sequence"


def load_dataset(cfg):
    """Return a list of training samples (cloud_p, cloud_q, label 4x4)."""
    root = cfg.data_root
    if not root:
        raise UsageError("a dataset root is required (--data or `data.root = ...`)")
    mode = _dataset_mode(root)
    seq = cfg.sequence

    def load(i):
        cloud = load_kitti_bin(_scan_path(root, seq, i), zero_features=cfg.zero_features)
        return filter_range(cloud, cfg.min_range, cfg.max_range)

    samples = []
    if mode == "pairs":
        labels = _read_transform_lines(_label_path(root, seq))
        for i, T in enumerate(labels):
            samples.append((load(2 * i), load(2 * i + 1), T))
    else:
        traj = odometry.load_kitti_poses(_pose_path(root, seq))
        rels = odometry.relative_poses(traj)
        for t, T in enumerate(rels):
            samples.append((load(t), load(t + 1), T))
    return samples


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _model_net_config(cfg):
    net = cfg.net
    if cfg.method == "eliot-knn":
        net = replace(net, flow_embedding="knn")
    return net.validate()


def _net_config_to_json(net):
    out = {}
    for key, value in net.__dict__.items():
        out[key] = list(value) if isinstance(value, tuple) else value
    return out


def _net_config_from_json(data):
    def tup(v):
        return tuple(tup(x) for x in v) if isinstance(v, list) else v
    return NetConfig(**{k: tup(v) for k, v in data.items()})


def train_run(cfg, resume_from=None, dtype_name="float32"):
    """Supervised training on consecutive-pair mini-batches; writes a
    per-step loss CSV, periodic checkpoints, and a final checkpoint that
    reproduces eval outputs bitwise on reload."""
    if cfg.method not in LEARNED_METHODS:
        raise UsageError(f"training requires a learned method, got {cfg.method!r}")
    out = _require_out(cfg)
    dtype = {"float32": torch.float32, "float64": torch.float64}[dtype_name]
    samples = load_dataset(cfg)
    if not samples:
        raise RuntimeError("dataset is empty")
    net_cfg = _model_net_config(cfg)

    start_step = 0
    adam = AdamState()
    if resume_from is not None:
        store, meta, adam_loaded = load_checkpoint(resume_from)
        model = EliotNet(_net_config_from_json(meta["net"]), seed=meta["seed"],
                         store=store)
        start_step = int(meta["step"])
        if adam_loaded is not None:
            adam = adam_loaded
    else:
        model = EliotNet(net_cfg, seed=cfg.seed, dtype=dtype)

    gts = torch.stack([
        dualquat.dq_from_matrix(torch.as_tensor(T, dtype=torch.float64)).to(model.dtype)
        for _, _, T in samples])
    augment = cfg.train_augment and (cfg.aug_max_translation > 0
                                     or cfg.aug_max_rotation > 0)
    groupings = None
    if not augment:
        groupings = [(model.precompute(p), model.precompute(q)) for p, q, _ in samples]

    n = len(samples)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.steps if cfg.steps is not None else cfg.epochs * steps_per_epoch

    os.makedirs(out, exist_ok=True)
    with output_lock(out):
        write_manifest(out, cfg, "train", {"dtype": dtype_name,
                                           "total_steps": total_steps})
        loss_rows = []
        for step in range(start_step + 1, total_steps + 1):
            batch_idx = [((step - 1) * cfg.batch_size + j) % n
                         for j in range(cfg.batch_size)]
            batch = []
            targets = []
            for idx in batch_idx:
                cloud_p, cloud_q, T = samples[idx]
                gt = gts[idx]
                if augment:
                    aug = cfg.augment_params(
                        int(make_rng(cfg.seed, "train-aug", step, idx).integers(0, 2 ** 62)))
                    cloud_q, T_aug = augment_pair(cloud_q, aug)
                    # q was moved by T_aug, so the label becomes T @ T_aug^-1
                    label = T @ rigid_inverse(T_aug)
                    gt = dualquat.dq_from_matrix(
                        torch.as_tensor(label, dtype=torch.float64)).to(model.dtype)
                    pair = (cloud_p, cloud_q)
                else:
                    pair = groupings[idx]
                batch.append(pair)
                targets.append(gt)
            preds, _ = model.forward_batch(batch, mode="train", step=step)
            loss = dualquat.total_loss(preds, torch.stack(targets),
                                       model.cfg.lambda_dual)
            model.store.zero_grad()
            loss.backward()
            adam_step(model.store, adam, cfg.lr)
            loss_rows.append((step, float(loss.detach())))
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                _save_model(model, cfg, os.path.join(out, f"ckpt_{step:06d}"),
                            step, adam)
        with open(os.path.join(out, "loss.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows(loss_rows)
        final = os.path.join(out, "checkpoint")
        _save_model(model, cfg, final, total_steps, adam)
    return final


def _save_model(model, cfg, directory, step, adam):
    save_checkpoint(model.store, directory,
                    meta={"step": step, "seed": model.seed, "method": cfg.method,
                          "net": _net_config_to_json(model.cfg)},
                    adam=adam)


def load_model(checkpoint_dir):
    store, meta, _ = load_checkpoint(checkpoint_dir)
    net = _net_config_from_json(meta["net"])
    return EliotNet(net, seed=meta.get("seed", 0), store=store), meta


# ---------------------------------------------------------------------------
# odom
# ---------------------------------------------------------------------------

def _sequence_scans(cfg):
    scan_dir = _scan_dir(cfg.data_root or "", cfg.sequence)
    if not os.path.isdir(scan_dir):
        raise UsageError(f"no scan directory at {scan_dir}")
    names = sorted(f for f in os.listdir(scan_dir) if f.endswith(".bin"))
    if len(names) < 2:
        raise RuntimeError(f"need at least 2 scans in {scan_dir}")
    return [os.path.join(scan_dir, f) for f in names]


def odom_run(cfg, checkpoint=None, calib_path=None):
    """Estimate the relative transform of every consecutive scan pair with
    the selected method, chain into a trajectory, and write a pose file
    plus per-frame timing."""
    out = _require_out(cfg)
    paths = _sequence_scans(cfg)
    learned = cfg.method in LEARNED_METHODS
    if learned:
        if checkpoint is None:
            raise UsageError(f"method {cfg.method!r} requires --checkpoint")
        model, _ = load_model(checkpoint)
    solver = icp.icp_point_to_point if cfg.method == "icp-po2po" else icp.icp_point_to_plane

    def load(path):
        cloud = load_kitti_bin(path, zero_features=cfg.zero_features)
        return filter_range(cloud, cfg.min_range, cfg.max_range)

    # Points near the far range limit churn between frames and have no true
    # counterpart in the other scan; trimming the ICP source by the
    # correspondence gate keeps every source point matchable.
    source_max = max(cfg.max_range - cfg.icp.max_correspondence_dist,
                     cfg.min_range * 2 + 1e-6)

    relatives = []
    timing = []
    prev_cloud = load(paths[0])
    prev_rel = np.eye(4)
    for t in range(1, len(paths)):
        cloud = load(paths[t])
        t0 = time.perf_counter()
        if learned:
            rel, _ = model.predict_transform(prev_cloud, cloud)
        else:
            init = prev_rel if cfg.icp_warm_start else np.eye(4)
            # icp maps source onto target: source = current scan, target =
            # previous scan, so the result expresses frame-t in frame-(t-1).
            source = filter_range(cloud, cfg.min_range, source_max)
            rel = solver(source, prev_cloud, init=init, params=cfg.icp).transform
        timing.append((t, time.perf_counter() - t0))
        relatives.append(rel)
        prev_rel = rel
        prev_cloud = cloud

    traj = odometry.accumulate(relatives)
    if calib_path:
        tr = odometry.load_calibration(calib_path)["Tr"]
        traj = odometry.apply_calibration(traj, tr)
    os.makedirs(out, exist_ok=True)
    with output_lock(out):
        write_manifest(out, cfg, "odom", {"frames": len(paths),
                                          "checkpoint": checkpoint})
        pose_file = os.path.join(out, f"{cfg.sequence}.txt")
        odometry.save_kitti_poses(traj, pose_file)
        with open(os.path.join(out, f"{cfg.sequence}_timing.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "seconds"])
            writer.writerows(timing)
    return pose_file


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def eval_run(cfg, gt_path, pred_path, calib_path=None):
    """KITTI-style relative error report plus plots."""
    out = _require_out(cfg)
    gt = odometry.load_kitti_poses(gt_path)
    pred = odometry.load_kitti_poses(pred_path)
    if calib_path:
        tr = odometry.load_calibration(calib_path)["Tr"]
        pred = odometry.apply_calibration(pred, tr)
    report = odometry.evaluate(gt, pred)
    os.makedirs(out, exist_ok=True)
    with output_lock(out):
        write_manifest(out, cfg, "eval", {"gt": str(gt_path), "pred": str(pred_path)})
        with open(os.path.join(out, "report.txt"), "w") as fh:
            fh.write(odometry.format_report(report))
        odometry.emit_plots(pred, report, out, gt=gt)
    if report.empty:
        print("no subsequences long enough to evaluate")
    else:
        print(f"t_rel: {report.t_rel:.4f} %  r_rel: {report.r_rel:.4f} deg/100m")
    return report


# ---------------------------------------------------------------------------
# attn
# ---------------------------------------------------------------------------

def attn_run(cfg, checkpoint, pair_index=0):
    """Dump decoder cross-attention maps (head-averaged, one row per
    (layer, query)) and the two keypoint sets for a scan pair."""
    out = _require_out(cfg)
    if checkpoint is None:
        raise UsageError("attn requires --checkpoint")
    store, meta, _ = load_checkpoint(checkpoint)
    if meta.get("method") not in LEARNED_METHODS:
        raise UsageError(f"attention dumps need a learned method, checkpoint "
                         f"has {meta.get('method')!r}")
    model = EliotNet(_net_config_from_json(meta["net"]), seed=meta.get("seed", 0),
                     store=store)
    root = cfg.data_root
    if not root:
        raise UsageError("a dataset root is required (--data)")
    if _dataset_mode(root) == "pairs":
        first = 2 * pair_index
    else:
        first = pair_index

    def load(i):
        cloud = load_kitti_bin(_scan_path(root, cfg.sequence, i),
                               zero_features=cfg.zero_features)
        return filter_range(cloud, cfg.min_range, cfg.max_range)

    cloud_p, cloud_q = load(first), load(first + 1)
    fs_p = model.set_abstraction(cloud_p)
    fs_q = model.set_abstraction(cloud_q)
    with torch.no_grad():
        if model.cfg.flow_embedding == "irfe":
            tokens = model.irfe(fs_p, fs_q)
        else:
            tokens = model.knn_flow_embed(fs_p, fs_q)
        _, maps = model.transformer_pose(tokens, fs_p.keypoints, fs_q.keypoints)

    os.makedirs(out, exist_ok=True)
    with output_lock(out):
        write_manifest(out, cfg, "attn", {"checkpoint": checkpoint,
                                          "pair": pair_index})
        with open(os.path.join(out, "attention.txt"), "w") as fh:
            for layer, weights in enumerate(maps):
                averaged = weights.double().mean(dim=0)  # (queries, keys)
                for qi, row in enumerate(averaged):
                    vals = " ".join(f"{v:.9e}" for v in row.tolist())
                    fh.write(f"{layer} {qi} {vals}\n")
        for name, fs in (("keypoints_p.csv", fs_p), ("keypoints_q.csv", fs_q)):
            with open(os.path.join(out, name), "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["index", "x", "y", "z"])
                for i, row in enumerate(fs.keypoints.double().numpy()):
                    writer.writerow([i, f"{row[0]:.9g}", f"{row[1]:.9g}", f"{row[2]:.9g}"])
    return os.path.join(out, "attention.txt")
