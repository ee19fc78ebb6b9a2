"""Independent oracles and checking utilities shared by the test modules.

Everything here is deliberately written as straight-line brute force so it
stays independent of the library code paths it checks.
"""

import numpy as np
import torch


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f w.r.t. float64 tensor x."""
    g = torch.zeros_like(x)
    gflat = g.reshape(-1)
    for i in range(x.numel()):
        with torch.no_grad():
            flat = x.reshape(-1)
            orig = flat[i].item()
            flat[i] = orig + h
        hi = float(f())
        with torch.no_grad():
            x.reshape(-1)[i] = orig - h
        lo = float(f())
        with torch.no_grad():
            x.reshape(-1)[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return g


def max_rel_error(analytic, numeric, atol=1e-8):
    """Worst-case relative error with an absolute floor for near-zero pairs."""
    a = analytic.detach().reshape(-1)
    n = numeric.reshape(-1)
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()),
                          torch.full_like(a, 1.0))
    err = (a - n).abs()
    mask = err > atol
    if not mask.any():
        return 0.0
    return float((err[mask] / denom[mask]).max())


def check_gradients(make_scalar, tensors, h=1e-5, rtol=1e-4, atol=1e-8):
    """Autograd vs central differences for every tensor in `tensors`.

    `make_scalar` must rebuild the scalar output from current tensor values.
    Returns the worst relative error seen.
    """
    out = make_scalar()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    worst = 0.0
    for t, g in zip(tensors, grads):
        numeric = finite_diff_grad(lambda: make_scalar().detach(), t, h=h)
        analytic = g if g is not None else torch.zeros_like(t)
        worst = max(worst, max_rel_error(analytic, numeric, atol=atol))
        assert worst < rtol, f"gradient mismatch {worst:.3e} for shape {tuple(t.shape)}"
    return worst


# ---------------------------------------------------------------------------
# sampling oracles
# ---------------------------------------------------------------------------

def fps_oracle(positions, n_key, start_index=0):
    """O(n^2 k) from-scratch greedy max-min selection, ties by lowest index."""
    n = positions.shape[0]
    n_key = min(n_key, n)
    selected = [start_index]
    while len(selected) < n_key:
        best_idx = -1
        best_score = -1.0
        for cand in range(n):
            if cand in selected:
                continue
            score = min(float(np.sum((positions[cand] - positions[s]) ** 2))
                        for s in selected)
            if score > best_score:
                best_score = score
                best_idx = cand
        selected.append(best_idx)
    return np.array(selected, dtype=np.int64)


def knn_oracle(positions, query, k):
    """Full sort by (squared distance, index)."""
    d2 = [float(np.sum((p - query) ** 2)) for p in positions]
    order = sorted(range(len(positions)), key=lambda i: (d2[i], i))
    return np.array(order[:k], dtype=np.int64)


def ball_oracle(positions, center, radius, max_samples):
    """Linear scan; same padding/fallback rules as the contract."""
    r2 = radius * radius
    hits = [i for i, p in enumerate(positions)
            if float(np.sum((p - center) ** 2)) <= r2]
    hits = hits[:max_samples]
    if not hits:
        d2 = [float(np.sum((p - center) ** 2)) for p in positions]
        nearest = int(np.argmin(d2))
        return np.full(max_samples, nearest, dtype=np.int64), 0
    row = np.full(max_samples, hits[0], dtype=np.int64)
    row[:len(hits)] = hits
    return row, len(hits)


# ---------------------------------------------------------------------------
# rigid-transform oracles
# ---------------------------------------------------------------------------

def random_unit_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def quat_matrix_oracle(q):
    """Rotation matrix via scipy (which uses (x, y, z, w) ordering)."""
    from scipy.spatial.transform import Rotation
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def transform_points_oracle(points, T):
    out = np.empty_like(points)
    for i, p in enumerate(points):
        hom = T @ np.array([p[0], p[1], p[2], 1.0])
        out[i] = hom[:3]
    return out
