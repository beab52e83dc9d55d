"""Differentiable forward kinematics and skinning over autodiff tensors.

Mirrors the numpy kernel in geometry.py but builds a gradient graph, so
losses can backpropagate into joint rotations, root translations and skinning
weights.  All functions accept leading batch dimensions: rotations are
(..., J, 4), translations (..., 3).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .geometry import Skeleton, joint_world_transforms

_CONJ = np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize_t(q):
    """Normalize (..., 4) quaternions to unit length."""
    q = as_tensor(q)
    norm = ad.sqrt((q * q).sum(axis=-1, keepdims=True))
    return q / norm


def quat_to_matrix_t(q):
    """Rotation matrices (..., 3, 3) from unit quaternions (..., 4)."""
    q = as_tensor(q)
    w, x, y, z = q[..., 0:1], q[..., 1:2], q[..., 2:3], q[..., 3:4]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    entries = ad.concatenate(
        [
            1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy),
            2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx),
            2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy),
        ],
        axis=-1,
    )
    return entries.reshape(*q.shape[:-1], 3, 3)


def matvec_t(mat, vec):
    """(..., 3, 3) times (..., 3) -> (..., 3)."""
    mat = as_tensor(mat)
    vec = as_tensor(vec)
    return (mat * vec[..., None, :]).sum(axis=-1)


def matmat_t(a, b):
    """(..., 3, 3) times (..., 3, 3) -> (..., 3, 3)."""
    a = as_tensor(a)
    b = as_tensor(b)
    return (a[..., :, :, None] * b[..., None, :, :]).sum(axis=-2)


def fk_transforms_t(skeleton: Skeleton, rotations, root_translation, rest_offsets=None):
    """World rotation matrices (..., J, 3, 3) and positions (..., J, 3).

    Rotations are normalized internally, matching the convention that poses
    are normalized before FK.  rest_offsets may override the skeleton's bone
    vectors with a (..., J, 3) array so one call covers a batch of bodies
    sharing the tree topology.
    """
    rotations = as_tensor(rotations)
    root_translation = as_tensor(root_translation)
    j = skeleton.joint_count
    if rotations.shape[-2:] != (j, 4):
        raise ValueError(f"rotations must be (..., {j}, 4), got {rotations.shape}")
    rest = skeleton.rest_offsets if rest_offsets is None else np.asarray(rest_offsets, dtype=np.float64)
    if rest.shape[-2:] != (j, 3):
        raise ValueError(f"rest_offsets must be (..., {j}, 3), got {rest.shape}")
    local = quat_to_matrix_t(quat_normalize_t(rotations))
    world_mats = [None] * j
    world_pos = [None] * j
    for k in skeleton.topo_order:
        p = skeleton.parents[k]
        local_k = local[..., k, :, :]
        if p < 0:
            world_mats[k] = local_k
            world_pos[k] = root_translation
        else:
            world_pos[k] = world_pos[p] + matvec_t(world_mats[p], rest[..., k, :])
            world_mats[k] = matmat_t(world_mats[p], local_k)
    return ad.stack(world_mats, axis=-3), ad.stack(world_pos, axis=-2)


def fk_positions_t(skeleton: Skeleton, rotations, root_translation, rest_offsets=None):
    """Differentiable world joint positions (..., J, 3)."""
    _, pos = fk_transforms_t(skeleton, rotations, root_translation, rest_offsets)
    return pos


def lbs_points_t(tpose_points, weights, skeleton: Skeleton, rotations, root_translation):
    """Differentiable linear blend skinning of a single frame.

    tpose_points is a constant (V, 3) array; weights (V, J) and the pose may
    each be Tensors or plain arrays.  When the pose is a plain array the
    joint transforms are computed with the (faster) numpy kernel and only the
    weights participate in the graph.
    """
    pts = np.asarray(tpose_points, dtype=np.float64)
    weights = as_tensor(weights)
    v = pts.shape[0]
    if weights.shape != (v, skeleton.joint_count):
        raise ValueError(f"weights must be ({v}, {skeleton.joint_count}), got {weights.shape}")

    pose_in_graph = isinstance(rotations, Tensor) or isinstance(root_translation, Tensor)
    if pose_in_graph:
        mats, pos = fk_transforms_t(skeleton, rotations, root_translation)
        out = None
        for j in range(skeleton.joint_count):
            centered = pts - skeleton.joint_positions[j]
            moved = Tensor(centered) @ mats[j, :, :].T + pos[j, :]
            term = weights[:, j : j + 1] * moved
            out = term if out is None else out + term
        return out

    from .geometry import PoseFrame

    frame = PoseFrame(np.asarray(rotations, dtype=np.float64), np.asarray(root_translation, dtype=np.float64))
    mats, pos = joint_world_transforms(skeleton, frame)
    out = None
    for j in range(skeleton.joint_count):
        moved = (pts - skeleton.joint_positions[j]) @ mats[j].T + pos[j]
        term = weights[:, j : j + 1] * moved
        out = term if out is None else out + term
    return out
