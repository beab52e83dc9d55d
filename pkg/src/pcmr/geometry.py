"""Non-learned geometric kernel.

Quaternions, kinematic trees, forward kinematics, linear blend skinning,
Procrustes alignment, surface sampling and k-nearest-neighbor queries.

Conventions:
    * Quaternions are (w, x, y, z), unit norm, right-handed, active rotations.
    * All arrays are float64; points are (V, 3), joints (J, 3).
    * A T-pose skeleton has identity joint rotations, so its world joint
      positions are reproduced by FK with identity rotations and the root
      translation set to the T-pose root position.

Everything here is a pure function over immutable inputs and safe to call
from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_KNN_CHUNK = 512


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------

def quat_identity(n: int | None = None) -> np.ndarray:
    """Identity quaternion, or (n, 4) stack of them."""
    if n is None:
        return np.array([1.0, 0.0, 0.0, 0.0])
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return q


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Normalize to unit length along the last axis."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("cannot normalize near-zero quaternion")
    return q / norm


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b; composes rotations (a applied after b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Unit quaternion rotating by `angle` radians about `axis`."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * angle
    q = np.empty(4)
    q[0] = np.cos(half)
    q[1:] = np.sin(half) * axis / norm
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix (...,3,3) of unit quaternion(s)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by quaternion(s) q."""
    mat = quat_to_matrix(q)
    return (mat @ np.asarray(v, dtype=np.float64)[..., None])[..., 0]


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointCloud:
    """Unordered set of 3D points, (V, 3)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"point cloud must be (V, 3) with V >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def translated(self, offset) -> "PointCloud":
        return PointCloud(self.points + np.asarray(offset, dtype=np.float64))


@dataclass(frozen=True)
class Skeleton:
    """Kinematic tree of J joints.

    parents[j] is the parent joint index, -1 for the single root.
    rest_offsets[j] is the T-pose bone vector from parent to joint j
    (row 0 is zero).  joint_positions holds the T-pose world positions.
    """

    parents: np.ndarray
    rest_offsets: np.ndarray
    joint_positions: np.ndarray
    _topo: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        offsets = np.asarray(self.rest_offsets, dtype=np.float64)
        positions = np.asarray(self.joint_positions, dtype=np.float64)
        j = parents.shape[0]
        if offsets.shape != (j, 3) or positions.shape != (j, 3):
            raise ValueError("rest_offsets and joint_positions must be (J, 3)")
        if not (np.all(np.isfinite(offsets)) and np.all(np.isfinite(positions))):
            raise ValueError("skeleton contains non-finite values")
        roots = np.flatnonzero(parents < 0)
        if roots.shape[0] != 1:
            raise ValueError(f"skeleton must have exactly one root, found {roots.shape[0]}")
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_offsets", offsets)
        object.__setattr__(self, "joint_positions", positions)
        object.__setattr__(self, "_topo", tuple(self._toposort()))

    def _toposort(self):
        # Parents first; also rejects cycles and out-of-range parent indices.
        j = self.parents.shape[0]
        if np.any(self.parents >= j):
            raise ValueError("parent index out of range")
        order, seen = [], np.zeros(j, dtype=bool)
        remaining = list(range(j))
        while remaining:
            progressed = False
            rest = []
            for k in remaining:
                p = self.parents[k]
                if p < 0 or seen[p]:
                    order.append(k)
                    seen[k] = True
                    progressed = True
                else:
                    rest.append(k)
            if not progressed:
                raise ValueError("skeleton parent links contain a cycle")
            remaining = rest
        return order

    @property
    def joint_count(self) -> int:
        return self.parents.shape[0]

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parents < 0)[0])

    @property
    def topo_order(self) -> tuple:
        return self._topo

    def bone_lengths(self) -> np.ndarray:
        """Length of each bone; the root entry is 0."""
        return np.linalg.norm(self.rest_offsets, axis=1)

    @classmethod
    def from_joints(cls, joints: np.ndarray, parents: np.ndarray) -> "Skeleton":
        """Build a T-pose skeleton from world joint positions and a parent array."""
        joints = np.asarray(joints, dtype=np.float64)
        parents = np.asarray(parents, dtype=np.int64)
        offsets = np.zeros_like(joints)
        for j in range(parents.shape[0]):
            if parents[j] >= 0:
                offsets[j] = joints[j] - joints[parents[j]]
        return cls(parents=parents, rest_offsets=offsets, joint_positions=joints)


@dataclass(frozen=True)
class PoseFrame:
    """Per-frame local joint rotations plus the world-space root position."""

    rotations: np.ndarray  # (J, 4) unit quaternions
    root_translation: np.ndarray  # (3,)

    def __post_init__(self):
        rot = np.asarray(self.rotations, dtype=np.float64)
        trans = np.asarray(self.root_translation, dtype=np.float64)
        if rot.ndim != 2 or rot.shape[1] != 4:
            raise ValueError(f"rotations must be (J, 4), got {rot.shape}")
        if trans.shape != (3,):
            raise ValueError(f"root_translation must be (3,), got {trans.shape}")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("pose contains non-finite values")
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "root_translation", trans)

    @property
    def joint_count(self) -> int:
        return self.rotations.shape[0]

    def normalized(self) -> "PoseFrame":
        return PoseFrame(quat_normalize(self.rotations), self.root_translation)


def identity_pose(skeleton: Skeleton) -> PoseFrame:
    """The pose whose FK reproduces the skeleton's T-pose exactly."""
    return PoseFrame(quat_identity(skeleton.joint_count), skeleton.joint_positions[skeleton.root].copy())


@dataclass(frozen=True)
class SkinWeights:
    """Per-point skinning weights, (V, J); every row on the probability simplex."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"weights must be (V, J), got {w.shape}")
        check_simplex(w)
        object.__setattr__(self, "weights", w)

    @property
    def point_count(self) -> int:
        return self.weights.shape[0]

    @property
    def joint_count(self) -> int:
        return self.weights.shape[1]


def check_simplex(weights: np.ndarray, tol: float = 1e-6) -> None:
    """Raise unless every row is non-negative and sums to 1 within tol."""
    if np.any(weights < -tol):
        raise ValueError("skin weights contain negative entries")
    sums = weights.sum(axis=-1)
    bad = np.abs(sums - 1.0) > tol
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise ValueError(f"skin weight row {idx} sums to {sums[idx]:.9f}, expected 1")


# ---------------------------------------------------------------------------
# Forward kinematics / skinning
# ---------------------------------------------------------------------------

def forward_kinematics(skeleton: Skeleton, pose: PoseFrame) -> np.ndarray:
    """World joint positions (J, 3) of the skeleton under the pose.

    The root sits at pose.root_translation; every child sits at its parent
    plus the accumulated parent world rotation applied to the rest offset.
    Rotations are normalized before use.
    """
    j = skeleton.joint_count
    if pose.joint_count != j:
        raise ValueError(f"pose has {pose.joint_count} rotations, skeleton has {j} joints")
    rot = quat_normalize(pose.rotations)
    world_rot = np.empty((j, 4))
    positions = np.empty((j, 3))
    for k in skeleton.topo_order:
        p = skeleton.parents[k]
        if p < 0:
            world_rot[k] = rot[k]
            positions[k] = pose.root_translation
        else:
            positions[k] = positions[p] + quat_rotate(world_rot[p], skeleton.rest_offsets[k])
            world_rot[k] = quat_mul(world_rot[p], rot[k])
    return positions


def joint_world_transforms(skeleton: Skeleton, pose: PoseFrame) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint world rotation matrices (J,3,3) and world positions (J,3)."""
    j = skeleton.joint_count
    if pose.joint_count != j:
        raise ValueError(f"pose has {pose.joint_count} rotations, skeleton has {j} joints")
    rot = quat_normalize(pose.rotations)
    world_rot = np.empty((j, 4))
    positions = np.empty((j, 3))
    for k in skeleton.topo_order:
        p = skeleton.parents[k]
        if p < 0:
            world_rot[k] = rot[k]
            positions[k] = pose.root_translation
        else:
            positions[k] = positions[p] + quat_rotate(world_rot[p], skeleton.rest_offsets[k])
            world_rot[k] = quat_mul(world_rot[p], rot[k])
    return quat_to_matrix(world_rot), positions


def linear_blend_skinning(
    tpose_points: PointCloud,
    weights: SkinWeights,
    skeleton: Skeleton,
    pose: PoseFrame,
) -> PointCloud:
    """Deform T-pose points by weight-blended per-joint rigid transforms.

    The transform of joint j maps x to R_j (x - t_j) + p_j, where t_j is the
    T-pose joint position and (R_j, p_j) its world transform under the pose.
    Output points stay in one-to-one correspondence with the input.
    """
    pts = tpose_points.points
    w = weights.weights
    if w.shape[0] != pts.shape[0]:
        raise ValueError(f"{w.shape[0]} weight rows for {pts.shape[0]} points")
    if w.shape[1] != skeleton.joint_count:
        raise ValueError(f"{w.shape[1]} weight columns for {skeleton.joint_count} joints")
    check_simplex(w)
    rot_mats, positions = joint_world_transforms(skeleton, pose)
    tpose_joints = skeleton.joint_positions
    out = np.zeros_like(pts)
    for j in range(skeleton.joint_count):
        moved = (pts - tpose_joints[j]) @ rot_mats[j].T + positions[j]
        out += w[:, j, None] * moved
    return PointCloud(out)


# ---------------------------------------------------------------------------
# Procrustes alignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProcrustesResult:
    """Similarity transform mapping source onto target: x -> scale * R x + t."""

    rotation: np.ndarray  # (3, 3), proper
    translation: np.ndarray  # (3,)
    scale: float
    degenerate: bool

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def procrustes_align(source: np.ndarray, target: np.ndarray, with_scale: bool = True) -> ProcrustesResult:
    """Least-squares similarity (or rigid) alignment of corresponded point sets.

    Closed form via SVD of the cross-covariance; the returned rotation is
    proper (det +1).  Rank-deficient covariance is flagged but still yields a
    best-effort transform.
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"source/target must both be (K, 3), got {src.shape} and {tgt.shape}")
    k = src.shape[0]
    if k < 3:
        raise ValueError(f"need at least 3 corresponded points, got {k}")

    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    xs = src - mu_s
    xt = tgt - mu_t
    cov = xt.T @ xs / k
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    flip = np.ones(3)
    flip[2] = d
    rotation = (u * flip) @ vt

    degenerate = s[0] <= 0 or s[2] <= 1e-9 * s[0]
    var_s = (xs**2).sum() / k
    if with_scale:
        scale = float((s * flip).sum() / var_s) if var_s > 0 else 1.0
        if scale <= 0:
            scale = 1.0
            degenerate = True
    else:
        scale = 1.0
    translation = mu_t - scale * rotation @ mu_s
    return ProcrustesResult(rotation=rotation, translation=translation, scale=scale, degenerate=degenerate)


# ---------------------------------------------------------------------------
# Surface sampling
# ---------------------------------------------------------------------------

def sample_surface(
    vertices: np.ndarray,
    triangles: np.ndarray,
    n_points: int,
    seed: int,
    return_anchors: bool = False,
):
    """Area-weighted uniform surface samples via barycentric coordinates.

    Deterministic for a fixed seed.  With return_anchors, also returns
    (triangle indices, barycentric coords) so the same material points can be
    re-evaluated on a deformed copy of the mesh.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    tris = np.asarray(triangles, dtype=np.int64)
    if tris.ndim != 2 or tris.shape[1] != 3 or tris.shape[0] == 0:
        raise ValueError("mesh must have at least one triangle")
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh is degenerate (zero total area)")

    rng = np.random.default_rng(seed)
    tri_idx = rng.choice(tris.shape[0], size=n_points, p=areas / total)
    r1 = np.sqrt(rng.random(n_points))
    r2 = rng.random(n_points)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    cloud = PointCloud(points_from_anchors(verts, tris, tri_idx, bary))
    if return_anchors:
        return cloud, (tri_idx, bary)
    return cloud


def points_from_anchors(vertices, triangles, tri_idx, bary) -> np.ndarray:
    """Evaluate barycentric anchors on a (possibly deformed) mesh."""
    verts = np.asarray(vertices, dtype=np.float64)
    tris = np.asarray(triangles, dtype=np.int64)[np.asarray(tri_idx, dtype=np.int64)]
    bary = np.asarray(bary, dtype=np.float64)
    return (
        bary[:, 0, None] * verts[tris[:, 0]]
        + bary[:, 1, None] * verts[tris[:, 1]]
        + bary[:, 2, None] * verts[tris[:, 2]]
    )


# ---------------------------------------------------------------------------
# k-nearest-neighbor edges
# ---------------------------------------------------------------------------

def knn_edges(cloud: PointCloud, k: int) -> np.ndarray:
    """Undirected edge list (E, 2) linking each point to its k nearest neighbors.

    Exact brute force.  Duplicate edges are merged; distance ties break toward
    the lower point index; no self-edges.
    """
    pts = cloud.points
    v = pts.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= v:
        raise ValueError(f"k={k} must be smaller than the point count {v}")
    edges = set()
    for start in range(0, v, _KNN_CHUNK):
        stop = min(start + _KNN_CHUNK, v)
        diff = pts[start:stop, None, :] - pts[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        for row in range(stop - start):
            i = start + row
            dist = d2[row].copy()
            dist[i] = np.inf
            # stable sort: equal distances resolve to the lower index
            nearest = np.argsort(dist, kind="stable")[:k]
            for jdx in nearest:
                j = int(jdx)
                edges.add((i, j) if i < j else (j, i))
    out = np.array(sorted(edges), dtype=np.int64)
    return out.reshape(-1, 2)


# ---------------------------------------------------------------------------
# Skeleton scale
# ---------------------------------------------------------------------------

def reference_leg_length(skeleton: Skeleton) -> float:
    """Hip-to-ankle rest distance used to normalize global displacement.

    Measured as the longest root-to-leaf chain among chains that descend
    below the root in T-pose (the legs); if no chain descends, the longest
    chain overall is used.
    """
    j = skeleton.joint_count
    children = [[] for _ in range(j)]
    for k in range(j):
        p = skeleton.parents[k]
        if p >= 0:
            children[p].append(k)
    lengths = skeleton.bone_lengths()
    root = skeleton.root
    root_y = skeleton.joint_positions[root][1]

    best_down = 0.0
    best_any = 0.0
    stack = [(root, 0.0)]
    while stack:
        node, acc = stack.pop()
        if not children[node]:
            best_any = max(best_any, acc)
            if skeleton.joint_positions[node][1] < root_y:
                best_down = max(best_down, acc)
            continue
        for ch in children[node]:
            stack.append((ch, acc + lengths[ch]))
    length = best_down if best_down > 0 else best_any
    if length <= 0:
        raise ValueError("skeleton has zero total bone length")
    return float(length)
