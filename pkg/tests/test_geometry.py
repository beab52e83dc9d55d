import numpy as np
import pytest
from scipy import stats

from pcmr.geometry import (
    PointCloud,
    PoseFrame,
    ProcrustesResult,
    Skeleton,
    SkinWeights,
    forward_kinematics,
    identity_pose,
    joint_world_transforms,
    knn_edges,
    linear_blend_skinning,
    points_from_anchors,
    procrustes_align,
    quat_from_axis_angle,
    quat_identity,
    quat_mul,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
    reference_leg_length,
    sample_surface,
)


def two_joint_chain():
    joints = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    return Skeleton.from_joints(joints, np.array([-1, 0]))


def random_tree_skeleton(rng, j):
    parents = np.full(j, -1, dtype=np.int64)
    for k in range(1, j):
        parents[k] = rng.integers(0, k)
    joints = np.zeros((j, 3))
    for k in range(1, j):
        joints[k] = joints[parents[k]] + rng.normal(size=3)
    return Skeleton.from_joints(joints, parents)


def random_pose(rng, j):
    rot = quat_normalize(rng.normal(size=(j, 4)))
    return PoseFrame(rot, rng.normal(size=3))


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def test_quat_mul_matches_matrix_composition():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = quat_normalize(rng.normal(size=4))
        b = quat_normalize(rng.normal(size=4))
        got = quat_to_matrix(quat_mul(a, b))
        want = quat_to_matrix(a) @ quat_to_matrix(b)
        assert np.allclose(got, want, atol=1e-12)


def test_quat_rotate_preserves_length():
    rng = np.random.default_rng(1)
    q = quat_normalize(rng.normal(size=(20, 4)))
    v = rng.normal(size=(20, 3))
    out = quat_rotate(q, v)
    assert np.allclose(np.linalg.norm(out, axis=1), np.linalg.norm(v, axis=1))


def test_quat_normalize_rejects_zero():
    with pytest.raises(ValueError):
        quat_normalize(np.zeros(4))


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------

def test_fk_identity_reproduces_tpose():
    skel = two_joint_chain()
    pose = PoseFrame(quat_identity(2), np.zeros(3))
    out = forward_kinematics(skel, pose)
    assert np.array_equal(out, skel.joint_positions)


def test_fk_root_rotation_hand_computed():
    # 90 deg about z sends the (0,1,0) offset to (-1,0,0)
    skel = two_joint_chain()
    rot = quat_identity(2)
    rot[0] = quat_from_axis_angle([0, 0, 1], np.pi / 2)
    out = forward_kinematics(skel, PoseFrame(rot, np.zeros(3)))
    assert np.allclose(out[0], [0, 0, 0], atol=1e-12)
    assert np.allclose(out[1], [-1, 0, 0], atol=1e-12)


def test_fk_pure_translation():
    skel = two_joint_chain()
    out = forward_kinematics(skel, PoseFrame(quat_identity(2), np.array([1.0, 2.0, 3.0])))
    assert np.allclose(out, [[1, 2, 3], [1, 3, 3]], atol=1e-15)


def test_fk_identity_pose_invariant_random_trees():
    rng = np.random.default_rng(2)
    for _ in range(20):
        skel = random_tree_skeleton(rng, int(rng.integers(2, 12)))
        out = forward_kinematics(skel, identity_pose(skel))
        assert np.max(np.abs(out - skel.joint_positions)) < 1e-12


def test_fk_child_rotation_does_not_move_child():
    skel = two_joint_chain()
    rot = quat_identity(2)
    rot[1] = quat_from_axis_angle([1, 0, 0], 1.0)
    out = forward_kinematics(skel, PoseFrame(rot, np.zeros(3)))
    assert np.allclose(out[1], [0, 1, 0], atol=1e-15)


def test_fk_dimension_mismatch():
    skel = two_joint_chain()
    with pytest.raises(ValueError):
        forward_kinematics(skel, PoseFrame(quat_identity(3), np.zeros(3)))


def test_skeleton_rejects_cycle_and_multi_root():
    with pytest.raises(ValueError):
        Skeleton.from_joints(np.zeros((2, 3)), np.array([1, 0]))
    with pytest.raises(ValueError):
        Skeleton.from_joints(np.zeros((2, 3)), np.array([-1, -1]))


# ---------------------------------------------------------------------------
# linear blend skinning
# ---------------------------------------------------------------------------

def test_lbs_identity_pose_is_identity():
    rng = np.random.default_rng(3)
    skel = random_tree_skeleton(rng, 5)
    pts = PointCloud(rng.normal(size=(40, 3)))
    w = rng.random((40, 5))
    w /= w.sum(axis=1, keepdims=True)
    out = linear_blend_skinning(pts, SkinWeights(w), skel, identity_pose(skel))
    assert np.max(np.abs(out.points - pts.points)) < 1e-12


def test_lbs_single_joint_translation():
    skel = Skeleton.from_joints(np.zeros((1, 3)), np.array([-1]))
    pts = PointCloud(np.array([[0.5, 0.2, -0.1], [1.0, 1.0, 1.0]]))
    pose = PoseFrame(quat_identity(1), np.array([2.0, 0.0, -1.0]))
    out = linear_blend_skinning(pts, SkinWeights(np.ones((2, 1))), skel, pose)
    assert np.allclose(out.points, pts.points + [2.0, 0.0, -1.0], atol=1e-15)


def per_joint_transform_oracle(pts, skel, pose):
    """Brute force: image of the points under each joint's rigid transform."""
    rot_mats, positions = joint_world_transforms(skel, pose)
    images = []
    for j in range(skel.joint_count):
        images.append((pts - skel.joint_positions[j]) @ rot_mats[j].T + positions[j])
    return images


def test_lbs_half_half_is_midpoint_of_single_joint_images():
    skel = two_joint_chain()
    rot = quat_identity(2)
    rot[1] = quat_from_axis_angle([0, 0, 1], np.pi / 2)
    pose = PoseFrame(rot, np.zeros(3))
    pts = np.array([[0.3, 1.5, 0.0]])
    images = per_joint_transform_oracle(pts, skel, pose)
    expected = 0.5 * images[0] + 0.5 * images[1]
    out = linear_blend_skinning(
        PointCloud(pts), SkinWeights(np.array([[0.5, 0.5]])), skel, pose
    )
    assert np.allclose(out.points, expected, atol=1e-12)


def test_lbs_one_hot_equals_rigid_transform():
    rng = np.random.default_rng(4)
    for _ in range(20):
        j = int(rng.integers(2, 7))
        skel = random_tree_skeleton(rng, j)
        pose = random_pose(rng, j)
        pts = rng.normal(size=(10, 3))
        images = per_joint_transform_oracle(pts, skel, pose)
        pick = int(rng.integers(0, j))
        w = np.zeros((10, j))
        w[:, pick] = 1.0
        out = linear_blend_skinning(PointCloud(pts), SkinWeights(w), skel, pose)
        assert np.max(np.abs(out.points - images[pick])) < 1e-12


def test_lbs_preserves_count_and_order():
    rng = np.random.default_rng(5)
    skel = random_tree_skeleton(rng, 4)
    pts = rng.normal(size=(25, 3))
    w = rng.random((25, 4))
    w /= w.sum(axis=1, keepdims=True)
    pose = random_pose(rng, 4)
    out = linear_blend_skinning(PointCloud(pts), SkinWeights(w), skel, pose)
    assert len(out) == 25
    # moving one input point moves exactly the matching output point
    pts2 = pts.copy()
    pts2[7] += 0.5
    out2 = linear_blend_skinning(PointCloud(pts2), SkinWeights(w), skel, pose)
    changed = np.flatnonzero(np.any(out.points != out2.points, axis=1))
    assert changed.tolist() == [7]


def test_lbs_rejects_non_simplex_rows():
    with pytest.raises(ValueError):
        SkinWeights(np.array([[0.7, 0.7]]))
    with pytest.raises(ValueError):
        SkinWeights(np.array([[-0.2, 1.2]]))
    # LBS re-validates in case the array was mutated after construction
    skel = two_joint_chain()
    w = SkinWeights(np.array([[0.5, 0.5]]))
    w.weights[0, 0] = 0.9
    with pytest.raises(ValueError):
        linear_blend_skinning(PointCloud(np.zeros((1, 3))), w, skel, identity_pose(skel))


# ---------------------------------------------------------------------------
# Procrustes
# ---------------------------------------------------------------------------

def test_procrustes_identity():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(12, 3))
    res = procrustes_align(pts, pts)
    assert np.allclose(res.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(res.translation, 0, atol=1e-12)
    assert abs(res.scale - 1.0) < 1e-12
    assert np.max(np.abs(res.apply(pts) - pts)) < 1e-10


def test_procrustes_exact_recovery():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(15, 3))
    r = quat_to_matrix(quat_normalize(rng.normal(size=4)))
    t = rng.normal(size=3)
    target = pts @ r.T + t
    res = procrustes_align(pts, target)
    assert np.max(np.abs(res.apply(pts) - target)) < 1e-10
    assert not res.degenerate
    assert abs(np.linalg.det(res.rotation) - 1.0) < 1e-10


def test_procrustes_recovers_uniform_scale():
    rng = np.random.default_rng(8)
    pts = rng.normal(size=(10, 3))
    res = procrustes_align(pts, 2.0 * pts)
    assert abs(res.scale - 2.0) < 1e-10


def test_procrustes_rigid_mode_keeps_unit_scale():
    rng = np.random.default_rng(9)
    pts = rng.normal(size=(10, 3))
    res = procrustes_align(pts, 2.0 * pts, with_scale=False)
    assert res.scale == 1.0


def test_procrustes_residual_invariant_under_source_similarity():
    rng = np.random.default_rng(10)
    src = rng.normal(size=(20, 3))
    tgt = src + 0.05 * rng.normal(size=(20, 3))

    def residual(a, b):
        res = procrustes_align(a, b)
        return np.sqrt(np.mean(np.sum((res.apply(a) - b) ** 2, axis=1)))

    base = residual(src, tgt)
    r = quat_to_matrix(quat_normalize(rng.normal(size=4)))
    moved = 3.7 * src @ r.T + np.array([5.0, -2.0, 1.0])
    assert abs(residual(moved, tgt) - base) < 1e-9


def test_procrustes_degenerate_flag_and_errors():
    line = np.stack([np.arange(5.0), np.zeros(5), np.zeros(5)], axis=1)
    res = procrustes_align(line, line + 1.0)
    assert res.degenerate
    assert isinstance(res, ProcrustesResult)
    with pytest.raises(ValueError):
        procrustes_align(line[:2], line[:2])


# ---------------------------------------------------------------------------
# surface sampling
# ---------------------------------------------------------------------------

UNIT_SQUARE_VERTS = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
UNIT_SQUARE_TRIS = np.array([[0, 1, 2], [0, 2, 3]])


def test_sample_surface_uniform_chi_square():
    cloud = sample_surface(UNIT_SQUARE_VERTS, UNIT_SQUARE_TRIS, 10000, seed=42)
    xs = np.clip((cloud.points[:, 0] * 4).astype(int), 0, 3)
    ys = np.clip((cloud.points[:, 1] * 4).astype(int), 0, 3)
    counts = np.bincount(ys * 4 + xs, minlength=16)
    _, p = stats.chisquare(counts)
    assert p > 0.01


def test_sample_surface_single_triangle_barycentric():
    verts = np.array([[0.0, 0, 0], [2, 0, 0], [0, 2, 0]])
    tris = np.array([[0, 1, 2]])
    cloud = sample_surface(verts, tris, 1, seed=0)
    p = cloud.points[0]
    # barycentric coords of p in the triangle
    u = p[0] / 2
    v = p[1] / 2
    w = 1 - u - v
    assert -1e-12 <= u <= 1 and -1e-12 <= v <= 1 and w >= -1e-12


def test_sample_surface_deterministic():
    a = sample_surface(UNIT_SQUARE_VERTS, UNIT_SQUARE_TRIS, 100, seed=7)
    b = sample_surface(UNIT_SQUARE_VERTS, UNIT_SQUARE_TRIS, 100, seed=7)
    assert np.array_equal(a.points, b.points)


def test_sample_surface_anchors_reconstruct():
    cloud, (tri_idx, bary) = sample_surface(
        UNIT_SQUARE_VERTS, UNIT_SQUARE_TRIS, 50, seed=3, return_anchors=True
    )
    again = points_from_anchors(UNIT_SQUARE_VERTS, UNIT_SQUARE_TRIS, tri_idx, bary)
    assert np.array_equal(cloud.points, again)


def test_sample_surface_empty_mesh_error():
    with pytest.raises(ValueError):
        sample_surface(UNIT_SQUARE_VERTS, np.zeros((0, 3), dtype=int), 10, seed=0)


# ---------------------------------------------------------------------------
# kNN edges
# ---------------------------------------------------------------------------

def knn_oracle(pts, k):
    """Exhaustive pairwise-distance oracle with (distance, index) ordering."""
    v = len(pts)
    edges = set()
    for i in range(v):
        cand = []
        for j in range(v):
            if j == i:
                continue
            d2 = sum((pts[i][c] - pts[j][c]) ** 2 for c in range(3))
            cand.append((d2, j))
        cand.sort()
        for _, j in cand[:k]:
            edges.add((min(i, j), max(i, j)))
    return edges


def test_knn_collinear_points():
    cloud = PointCloud(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]))
    edges = knn_edges(cloud, 1)
    assert set(map(tuple, edges)) == {(0, 1), (1, 2)}
    assert set(map(tuple, edges)) == knn_oracle(cloud.points.tolist(), 1)


def test_knn_complete_graph():
    rng = np.random.default_rng(11)
    cloud = PointCloud(rng.normal(size=(8, 3)))
    edges = knn_edges(cloud, 7)
    assert edges.shape[0] == 8 * 7 // 2


def test_knn_duplicate_points_tie_to_lower_index():
    pts = np.array([[0.0, 0, 0], [0.0, 0, 0], [5, 0, 0], [20, 0, 0]])
    edges = set(map(tuple, knn_edges(PointCloud(pts), 1)))
    # points 0 and 1 coincide: both pick each other; 2 is equidistant from
    # 0 and 1 -> tie broken to index 0; no self edges anywhere
    assert (0, 1) in edges
    assert (0, 2) in edges and (1, 2) not in edges
    assert all(a != b for a, b in edges)


def test_knn_matches_oracle_random():
    rng = np.random.default_rng(12)
    for _ in range(10):
        v = int(rng.integers(5, 30))
        k = int(rng.integers(1, v))
        pts = rng.normal(size=(v, 3))
        got = set(map(tuple, knn_edges(PointCloud(pts), k)))
        assert got == knn_oracle(pts.tolist(), k)


def test_knn_symmetric_no_self_edges():
    rng = np.random.default_rng(13)
    cloud = PointCloud(rng.normal(size=(40, 3)))
    edges = knn_edges(cloud, 6)
    assert np.all(edges[:, 0] < edges[:, 1])
    assert len(set(map(tuple, edges))) == edges.shape[0]


def test_knn_k_too_large():
    cloud = PointCloud(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        knn_edges(cloud, 3)


# ---------------------------------------------------------------------------
# reference leg length
# ---------------------------------------------------------------------------

def test_reference_leg_length_prefers_descending_chain():
    # hip at y=1 with a long spine up and a shorter leg down: the leg wins
    joints = np.array([
        [0.0, 1.0, 0.0],   # root / hip
        [0.0, 2.0, 0.0],   # spine
        [0.0, 3.5, 0.0],   # head
        [0.1, 0.5, 0.0],   # thigh
        [0.1, 0.0, 0.0],   # ankle
    ])
    skel = Skeleton.from_joints(joints, np.array([-1, 0, 1, 0, 3]))
    expected = np.linalg.norm(joints[3] - joints[0]) + np.linalg.norm(joints[4] - joints[3])
    assert abs(reference_leg_length(skel) - expected) < 1e-12


def test_reference_leg_length_chain_fallback():
    joints = np.array([[0.0, 0, 0], [0, 1, 0], [0, 2.5, 0]])
    skel = Skeleton.from_joints(joints, np.array([-1, 0, 1]))
    assert abs(reference_leg_length(skel) - 2.5) < 1e-12
