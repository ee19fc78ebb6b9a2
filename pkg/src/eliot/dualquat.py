"""Quaternion / dual-quaternion algebra for rigid transforms, plus the two
pose-regression losses.

A rotation quaternion is a tensor (..., 4) in (w, x, y, z) order; a dual
quaternion is a tensor (..., 8) storing (real w, x, y, z, dual w, x, y, z).
That 8-value order is also the network head's output layout and is recorded
in the checkpoint manifest. Everything is written against torch so the loss
functions stay differentiable in the prediction argument.
"""

import numpy as np
import torch

from .errors import DegenerateTransformError

_EPS_REAL = 1e-9
_UNIT_TOL = 1e-6


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def quat_multiply(a, b):
    """Hamilton product, batched over leading dims."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def quat_conjugate(q):
    q = _as_tensor(q)
    return torch.cat([q[..., :1], -q[..., 1:]], dim=-1)


def quat_canonicalize(q):
    """Flip to the w >= 0 hemisphere; a zero w breaks the tie by making the
    first nonzero component positive."""
    q = _as_tensor(q)
    w, x, y, z = q.unbind(-1)
    sign = torch.sign(w)
    sign = torch.where(sign == 0, torch.sign(x), sign)
    sign = torch.where(sign == 0, torch.sign(y), sign)
    sign = torch.where(sign == 0, torch.sign(z), sign)
    sign = torch.where(sign == 0, torch.ones_like(sign), sign)
    return q * sign.unsqueeze(-1)


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion, (..., 3, 3)."""
    q = _as_tensor(q)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def matrix_to_quat(R):
    """Unit quaternion of a rotation matrix, canonicalized to w >= 0."""
    R = _as_tensor(R)
    flat = R.reshape(-1, 3, 3).detach().cpu().numpy()
    out = np.empty((flat.shape[0], 4))
    for i, m in enumerate(flat):
        # largest-pivot variant of the trace method, numerically safe
        pivots = np.array([
            1.0 + m[0, 0] + m[1, 1] + m[2, 2],
            1.0 + m[0, 0] - m[1, 1] - m[2, 2],
            1.0 - m[0, 0] + m[1, 1] - m[2, 2],
            1.0 - m[0, 0] - m[1, 1] + m[2, 2],
        ])
        k = int(np.argmax(pivots))
        s = 2.0 * np.sqrt(max(pivots[k], 0.0))
        if k == 0:
            q = [0.25 * s,
                 (m[2, 1] - m[1, 2]) / s,
                 (m[0, 2] - m[2, 0]) / s,
                 (m[1, 0] - m[0, 1]) / s]
        elif k == 1:
            q = [(m[2, 1] - m[1, 2]) / s,
                 0.25 * s,
                 (m[0, 1] + m[1, 0]) / s,
                 (m[0, 2] + m[2, 0]) / s]
        elif k == 2:
            q = [(m[0, 2] - m[2, 0]) / s,
                 (m[0, 1] + m[1, 0]) / s,
                 0.25 * s,
                 (m[1, 2] + m[2, 1]) / s]
        else:
            q = [(m[1, 0] - m[0, 1]) / s,
                 (m[0, 2] + m[2, 0]) / s,
                 (m[1, 2] + m[2, 1]) / s,
                 0.25 * s]
        q = np.asarray(q)
        out[i] = q / np.linalg.norm(q)
    quat = torch.as_tensor(out, dtype=R.dtype).reshape(R.shape[:-2] + (4,))
    return quat_canonicalize(quat)


def real_part(dq):
    return dq[..., :4]


def dual_part(dq):
    return dq[..., 4:]


def identity_dq(dtype=torch.float64):
    return torch.tensor([1.0, 0, 0, 0, 0, 0, 0, 0], dtype=dtype)


def dq_from_rt(rotation, translation):
    """Build a unit dual quaternion from a unit rotation quaternion and a
    translation 3-vector: dual = 1/2 (0, t) * rotation."""
    rotation = _as_tensor(rotation)
    translation = _as_tensor(translation, like=rotation)
    norm = torch.linalg.vector_norm(rotation, dim=-1)
    if not torch.all((norm - 1.0).abs() < _UNIT_TOL):
        raise ValueError("rotation quaternion must have unit norm")
    t_quat = torch.cat([torch.zeros_like(translation[..., :1]), translation], dim=-1)
    dual = 0.5 * quat_multiply(t_quat, rotation)
    return torch.cat([rotation, dual], dim=-1)


def dq_compose(a, b):
    """Dual-quaternion product; matches the matrix product of the operands."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    ar, ad = real_part(a), dual_part(a)
    br, bd = real_part(b), dual_part(b)
    real = quat_multiply(ar, br)
    dual = quat_multiply(ar, bd) + quat_multiply(ad, br)
    return torch.cat([real, dual], dim=-1)


def dq_normalize(dq):
    """Project a raw 8-vector onto the unit dual-quaternion manifold: the
    real part is scaled to unit norm, the dual part is Gram-Schmidt
    orthogonalized against it (but not rescaled, matching how the losses
    supervise the raw dual part while normalizing only the real one)."""
    dq = _as_tensor(dq)
    r, d = real_part(dq), dual_part(dq)
    norm = torch.linalg.vector_norm(r, dim=-1, keepdim=True)
    if not torch.all(norm > _EPS_REAL):
        raise DegenerateTransformError("real part is numerically zero")
    r = r / norm
    d = d - (r * d).sum(dim=-1, keepdim=True) * r
    return torch.cat([r, d], dim=-1)


def dq_to_matrix(dq):
    """4x4 pose matrix of a dual quaternion (normalized internally)."""
    dq = dq_normalize(dq)
    r, d = real_part(dq), dual_part(dq)
    R = quat_to_matrix(r)
    t = 2.0 * quat_multiply(d, quat_conjugate(r))[..., 1:]
    T = torch.zeros(dq.shape[:-1] + (4, 4), dtype=dq.dtype)
    T[..., :3, :3] = R
    T[..., :3, 3] = t
    T[..., 3, 3] = 1.0
    return T


def dq_from_matrix(T):
    """Dual quaternion of a 4x4 pose matrix, real part canonical (w >= 0)."""
    T = _as_tensor(T)
    rotation = matrix_to_quat(T[..., :3, :3])
    return dq_from_rt(rotation, T[..., :3, 3])


def unit_residual(dq):
    """How far from a unit dual quaternion: max of |norm(real) - 1| and
    |<real, dual>|."""
    dq = _as_tensor(dq)
    r, d = real_part(dq), dual_part(dq)
    nr = (torch.linalg.vector_norm(r, dim=-1) - 1.0).abs()
    ortho = (r * d).sum(dim=-1).abs()
    return torch.maximum(nr, ortho)


def _check_gt(gt):
    r = real_part(gt)
    if not torch.all((torch.linalg.vector_norm(r, dim=-1) - 1.0).abs() < _UNIT_TOL):
        raise ValueError("ground-truth real part must be unit")
    if not torch.all(r[..., 0] > -_UNIT_TOL):
        raise ValueError("ground-truth real part must be canonicalized to w >= 0")


def dual_loss(pred, gt):
    """Mean over the batch of ||dual_pred - dual_gt||_2."""
    pred = _as_tensor(pred)
    gt = _as_tensor(gt, like=pred)
    _check_gt(gt)
    return torch.linalg.vector_norm(dual_part(pred) - dual_part(gt), dim=-1).mean()


def real_loss(pred, gt):
    """Mean over the batch of ||real_pred/||real_pred|| - real_gt||_2."""
    pred = _as_tensor(pred)
    gt = _as_tensor(gt, like=pred)
    _check_gt(gt)
    r = real_part(pred)
    norm = torch.linalg.vector_norm(r, dim=-1, keepdim=True)
    if not torch.all(norm > _EPS_REAL):
        raise DegenerateTransformError("predicted real part is numerically zero")
    return torch.linalg.vector_norm(r / norm - real_part(gt), dim=-1).mean()


def total_loss(pred, gt, lambda_dual=1.0):
    """real_loss + lambda_dual * dual_loss."""
    if lambda_dual < 0:
        raise ValueError("lambda_dual must be non-negative")
    return real_loss(pred, gt) + lambda_dual * dual_loss(pred, gt)
