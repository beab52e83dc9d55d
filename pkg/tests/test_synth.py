import numpy as np
import pytest

from pcmr.geometry import PointCloud, forward_kinematics, linear_blend_skinning
from pcmr.synth import (
    MotionConfig,
    canonical_parents,
    capsule_mesh,
    generate_character,
    generate_motion,
    point_segment_distance,
    realize_motion,
    render_sequence,
    softmin_weights,
)


def test_canonical_parents_humanoid_and_chain():
    p8 = canonical_parents(8)
    assert p8.tolist() == [-1, 0, 1, 2, 0, 4, 0, 6]
    p4 = canonical_parents(4)
    assert p4.tolist() == [-1, 0, 1, 2]
    with pytest.raises(ValueError):
        canonical_parents(1)


def test_capsule_mesh_watertight():
    verts, tris = capsule_mesh([0, 0, 0], [0, 1, 0], 0.2)
    edges = {}
    for tri in tris:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            edges[key] = edges.get(key, 0) + 1
    assert all(count == 2 for count in edges.values())
    assert int(tris.max()) == verts.shape[0] - 1


def test_point_segment_distance_basics():
    pts = np.array([[0.0, 2.0, 0.0], [0.0, -1.0, 0.0], [1.0, 0.5, 0.0]])
    d = point_segment_distance(pts, np.zeros(3), np.array([0.0, 1.0, 0.0]))
    assert np.allclose(d, [1.0, 1.0, 1.0])


def test_character_deterministic_per_seed():
    a = generate_character(17)
    b = generate_character(17)
    assert np.array_equal(a.skeleton.joint_positions, b.skeleton.joint_positions)
    assert np.array_equal(a.mesh_vertices, b.mesh_vertices)
    assert np.array_equal(a.vertex_weights.weights, b.vertex_weights.weights)
    c = generate_character(18)
    assert not np.array_equal(a.skeleton.joint_positions, c.skeleton.joint_positions)


def test_120_seeds_give_distinct_bone_lengths():
    seen = set()
    for seed in range(120):
        char = generate_character(seed)
        seen.add(tuple(np.round(char.skeleton.bone_lengths(), 12)))
    assert len(seen) == 120


def test_tpose_mesh_skinned_identity_is_itself():
    char = generate_character(3)
    from pcmr.geometry import identity_pose

    out = linear_blend_skinning(
        PointCloud(char.mesh_vertices),
        char.vertex_weights,
        char.skeleton,
        identity_pose(char.skeleton),
    )
    assert np.max(np.abs(out.points - char.mesh_vertices)) < 1e-12


def test_gt_weights_simplex_and_locality():
    char = generate_character(5)
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(200, 3))
    w = char.skin_weights_at(pts).weights
    assert np.all(w >= 0)
    assert np.max(np.abs(w.sum(axis=1) - 1.0)) < 1e-9
    # a point on the root->spine segment is driven by the root joint
    skel = char.skeleton
    mid = 0.5 * (skel.joint_positions[0] + skel.joint_positions[1])
    w_mid = char.skin_weights_at(mid[None]).weights[0]
    assert np.argmax(w_mid) == 0 and w_mid[0] > 0.5


def test_character_height_and_leg_length_positive():
    char = generate_character(11)
    assert char.height > 0.5
    assert 0.4 < char.leg_length < 1.0


def test_motion_deterministic_and_shapes():
    a = generate_motion(7, 30, joint_count=8)
    b = generate_motion(7, 30, joint_count=8)
    assert np.array_equal(a.rotations, b.rotations)
    assert np.array_equal(a.root_displacement, b.root_displacement)
    assert a.rotations.shape == (30, 8, 4)
    assert np.allclose(np.linalg.norm(a.rotations, axis=-1), 1.0, atol=1e-12)
    assert np.array_equal(a.root_displacement[0], np.zeros(3))
    with pytest.raises(ValueError):
        generate_motion(7, 1)


def test_motion_band_limit_property_sweep():
    # per-frame joint angular change stays under 15 degrees across seeds
    worst = 0.0
    for seed in range(1000):
        m = generate_motion(seed, 45, joint_count=8)
        dots = np.abs(np.sum(m.rotations[1:] * m.rotations[:-1], axis=-1))
        angles = 2.0 * np.arccos(np.clip(dots, -1.0, 1.0))
        worst = max(worst, float(angles.max()))
    assert np.rad2deg(worst) < 15.0


def test_zero_amplitude_is_static_tpose():
    cfg = MotionConfig(amplitude=0.0, root_speed=0.0, root_bob=0.0)
    m = generate_motion(1, 10, joint_count=8, config=cfg)
    expected = np.zeros((10, 8, 4))
    expected[..., 0] = 1.0
    assert np.array_equal(m.rotations, expected)
    assert np.array_equal(m.root_displacement, np.zeros((10, 3)))


def test_realize_motion_scales_root_by_leg_length():
    char = generate_character(2)
    m = generate_motion(3, 12, joint_count=8)
    frames = realize_motion(char, m)
    base = char.skeleton.joint_positions[0]
    for i, f in enumerate(frames):
        assert np.allclose(
            f.root_translation, base + char.leg_length * m.root_displacement[i], atol=1e-12
        )
    with pytest.raises(ValueError):
        realize_motion(char, generate_motion(3, 12, joint_count=6))


def test_render_corresponded_static_motion_constant_cloud():
    char = generate_character(4)
    cfg = MotionConfig(amplitude=0.0, root_speed=0.0, root_bob=0.0)
    m = generate_motion(5, 4, joint_count=8, config=cfg)
    seq = render_sequence(char, m, 100, seed=9, corresponded=True)
    for cloud in seq.clouds:
        assert np.max(np.abs(cloud.points - seq.tpose_cloud.points)) < 1e-12


def test_render_corresponded_matches_gt_lbs():
    char = generate_character(6)
    m = generate_motion(8, 5, joint_count=8)
    seq = render_sequence(char, m, 80, seed=1, corresponded=True)
    for i, frame in enumerate(seq.frames):
        redone = linear_blend_skinning(seq.tpose_cloud, seq.point_weights, char.skeleton, frame)
        assert np.max(np.abs(redone.points - seq.clouds[i].points)) < 1e-10


def test_render_fresh_clouds_all_distinct():
    char = generate_character(7)
    m = generate_motion(9, 6, joint_count=8)
    seq = render_sequence(char, m, 64, seed=2, corresponded=False)
    fingerprints = {seq.clouds[i].points.tobytes() for i in range(seq.n_frames)}
    assert len(fingerprints) == seq.n_frames
    assert seq.tpose_cloud is None


def test_render_joints_match_fk():
    char = generate_character(8)
    m = generate_motion(10, 4, joint_count=8)
    seq = render_sequence(char, m, 32, seed=3, corresponded=True)
    for i, frame in enumerate(seq.frames):
        assert np.array_equal(seq.joints[i], forward_kinematics(char.skeleton, frame))


def test_softmin_weights_bone_driven_by_proximal_joint():
    char = generate_character(12)
    skel = char.skeleton
    # midpoint of the left lower-leg bone (thigh joint 4 -> shin joint 5) is
    # driven by the thigh joint, which pivots that bone
    on_bone = 0.5 * (skel.joint_positions[4] + skel.joint_positions[5])
    w = softmin_weights(on_bone[None], skel, char.temperature).weights[0]
    assert np.argmax(w) == 4 and w[4] > 0.9
    # the ankle end of the shin is still owned by the thigh joint; leaf
    # joints drive nothing
    at_leaf = skel.joint_positions[5]
    w_leaf = softmin_weights(at_leaf[None], skel, char.temperature).weights[0]
    assert np.argmax(w_leaf) == 4
    assert w_leaf[5] < 1e-6
