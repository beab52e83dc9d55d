"""Synthetic articulated characters and motions.

Characters are unions of capsules around the bones of a canonical kinematic
tree, with analytic ground-truth skinning weights (softmin over distance to
the bone segments).  Motions are band-limited sums of sinusoids per joint
axis plus a smooth root drift expressed in units of the character's leg
length, so the same motion recipe can be realized on bodies of any size.

All generators are deterministic under fixed seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    PointCloud,
    PoseFrame,
    Skeleton,
    SkinWeights,
    forward_kinematics,
    linear_blend_skinning,
    quat_mul,
    reference_leg_length,
    sample_surface,
)


def canonical_parents(joint_count: int) -> np.ndarray:
    """Parent array of the canonical tree.

    joint_count >= 6: a spine chain of joint_count-4 joints rooted at the hip
    plus two 2-joint legs hanging from the root.  Below 6 joints the tree
    degenerates to a single chain.
    """
    if joint_count < 2:
        raise ValueError("need at least 2 joints")
    if joint_count < 6:
        return np.array([-1] + list(range(joint_count - 1)), dtype=np.int64)
    spine = joint_count - 4
    parents = [-1] + list(range(spine - 1))
    parents += [0, spine, 0, spine + 2]  # thigh_l, shin_l, thigh_r, shin_r
    return np.array(parents, dtype=np.int64)


# ---------------------------------------------------------------------------
# capsule meshes
# ---------------------------------------------------------------------------

def capsule_mesh(p0, p1, radius, n_around=10, n_cap=3):
    """Watertight capsule around the segment p0..p1; returns (verts, tris)."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    direction = axis / length if length > 1e-9 else np.array([0.0, 1.0, 0.0])
    ref = np.zeros(3)
    ref[np.argmin(np.abs(direction))] = 1.0
    e1 = np.cross(direction, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(direction, e1)
    thetas = 2.0 * np.pi * np.arange(n_around) / n_around
    circle = np.outer(np.cos(thetas), e1) + np.outer(np.sin(thetas), e2)  # (n_around, 3)

    rings = []
    for i in range(n_cap - 1, -1, -1):  # bottom cap: near pole -> equator
        b = i / n_cap * (np.pi / 2.0)
        rings.append(p0 - radius * np.sin(b) * direction + radius * np.cos(b) * circle)
    for i in range(n_cap):  # top cap: equator -> near pole
        b = i / n_cap * (np.pi / 2.0)
        rings.append(p1 + radius * np.sin(b) * direction + radius * np.cos(b) * circle)

    verts = np.vstack([[p0 - radius * direction], *rings, [p1 + radius * direction]])
    south = 0
    north = verts.shape[0] - 1

    def ring_vert(ring, k):
        return 1 + ring * n_around + (k % n_around)

    tris = []
    for k in range(n_around):
        tris.append([south, ring_vert(0, k + 1), ring_vert(0, k)])
    for ring in range(len(rings) - 1):
        for k in range(n_around):
            a0, a1 = ring_vert(ring, k), ring_vert(ring, k + 1)
            b0, b1 = ring_vert(ring + 1, k), ring_vert(ring + 1, k + 1)
            tris.append([a0, a1, b1])
            tris.append([a0, b1, b0])
    last = len(rings) - 1
    for k in range(n_around):
        tris.append([north, ring_vert(last, k), ring_vert(last, k + 1)])
    return verts, np.array(tris, dtype=np.int64)


def point_segment_distance(points, a, b):
    """Distance from each point (V, 3) to the segment a..b."""
    points = np.asarray(points, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.linalg.norm(points - a, axis=-1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=-1)


# ---------------------------------------------------------------------------
# characters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CharacterConfig:
    joint_count: int = 8
    hip_width: tuple = (0.08, 0.16)
    upper_leg: tuple = (0.18, 0.30)
    lower_leg: tuple = (0.30, 0.50)
    torso: tuple = (0.50, 0.85)
    torso_radius: tuple = (0.07, 0.12)
    limb_radius: tuple = (0.04, 0.07)
    chain_bone: tuple = (0.20, 0.50)
    weight_temperature: float = 0.05  # times mean bone length
    capsule_segments: int = 10
    capsule_cap_rings: int = 3


@dataclass(frozen=True)
class SyntheticCharacter:
    skeleton: Skeleton
    capsule_radii: np.ndarray  # per joint; entry j is the bone parent->j, root unused
    mesh_vertices: np.ndarray
    mesh_triangles: np.ndarray
    vertex_weights: SkinWeights
    temperature: float

    @property
    def joint_count(self) -> int:
        return self.skeleton.joint_count

    @property
    def height(self) -> float:
        ys = self.mesh_vertices[:, 1]
        return float(ys.max() - ys.min())

    @property
    def leg_length(self) -> float:
        return reference_leg_length(self.skeleton)

    def skin_weights_at(self, points) -> SkinWeights:
        """Ground-truth skinning field: softmin over bone-segment distances."""
        return softmin_weights(points, self.skeleton, self.temperature)


def softmin_weights(points, skeleton: Skeleton, temperature: float) -> SkinWeights:
    """Softmin over distances to the bone segments each joint drives.

    Joint j owns the segments from j to its children (its rotation pivots
    there); leaf joints drive no geometry and get vanishing weight.  Rows
    land exactly on the probability simplex.
    """
    points = np.asarray(points, dtype=np.float64)
    j_count = skeleton.joint_count
    children = [[] for _ in range(j_count)]
    for k in range(j_count):
        p = skeleton.parents[k]
        if p >= 0:
            children[p].append(k)
    if all(len(c) == 0 for c in children):  # single-joint body follows the root rigidly
        w = np.zeros((points.shape[0], j_count))
        w[:, skeleton.root] = 1.0
        return SkinWeights(w)
    dists = np.full((points.shape[0], j_count), np.inf)
    for j in range(j_count):
        for c in children[j]:
            seg = point_segment_distance(points, skeleton.joint_positions[j], skeleton.joint_positions[c])
            dists[:, j] = np.minimum(dists[:, j], seg)
    logits = -dists / temperature
    logits -= logits.max(axis=1, keepdims=True)  # max is finite: some joint has a child
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return SkinWeights(w)


def _build_mesh(skeleton, radii, config):
    verts, tris = [], []
    offset = 0
    for j in range(skeleton.joint_count):
        p = skeleton.parents[j]
        if p < 0:
            continue
        v, t = capsule_mesh(
            skeleton.joint_positions[p],
            skeleton.joint_positions[j],
            radii[j],
            n_around=config.capsule_segments,
            n_cap=config.capsule_cap_rings,
        )
        verts.append(v)
        tris.append(t + offset)
        offset += v.shape[0]
    return np.vstack(verts), np.vstack(tris)


def generate_character(shape_seed: int, config: CharacterConfig | None = None) -> SyntheticCharacter:
    """Deterministic capsule body; bone lengths and radii sampled per seed."""
    config = config or CharacterConfig()
    rng = np.random.default_rng(shape_seed)
    j = config.joint_count
    parents = canonical_parents(j)
    joints = np.zeros((j, 3))
    radii = np.zeros(j)

    if j >= 6:
        spine = j - 4
        hw = rng.uniform(*config.hip_width)
        upper = rng.uniform(*config.upper_leg)
        lower = rng.uniform(*config.lower_leg)
        root_y = upper + lower
        joints[0] = [0.0, root_y, 0.0]
        torso_total = rng.uniform(*config.torso)
        parts = rng.uniform(0.7, 1.3, size=spine - 1)
        parts = parts / parts.sum() * torso_total
        for k in range(1, spine):
            joints[k] = joints[k - 1] + [0.0, parts[k - 1], 0.0]
            radii[k] = rng.uniform(*config.torso_radius)
        for side, base in ((1.0, spine), (-1.0, spine + 2)):
            joints[base] = joints[0] + [side * hw, -upper, 0.0]
            joints[base + 1] = joints[base] + [0.0, -lower, 0.0]
            radii[base] = rng.uniform(*config.limb_radius)
            radii[base + 1] = rng.uniform(*config.limb_radius)
    else:
        for k in range(1, j):
            joints[k] = joints[k - 1] + [0.0, rng.uniform(*config.chain_bone), 0.0]
            radii[k] = rng.uniform(*config.limb_radius)

    skeleton = Skeleton.from_joints(joints, parents)
    mesh_v, mesh_t = _build_mesh(skeleton, radii, config)
    temperature = config.weight_temperature * float(skeleton.bone_lengths()[1:].mean())
    return SyntheticCharacter(
        skeleton=skeleton,
        capsule_radii=radii,
        mesh_vertices=mesh_v,
        mesh_triangles=mesh_t,
        vertex_weights=softmin_weights(mesh_v, skeleton, temperature),
        temperature=temperature,
    )


# ---------------------------------------------------------------------------
# motions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MotionConfig:
    amplitude: float = 0.5  # max per-axis radians
    frequency: tuple = (0.1, 1.0)  # Hz
    max_sinusoids: int = 3
    root_speed: float = 0.3  # leg lengths per second, horizontal
    root_bob: float = 0.03  # leg lengths, vertical oscillation
    max_step_deg: float = 15.0
    fps: int = 30


@dataclass(frozen=True)
class SyntheticMotion:
    """Character-independent motion recipe.

    Root displacement is relative to the first frame and measured in units of
    the performer's leg length; realizing the motion on a character scales it
    back to meters.
    """

    rotations: np.ndarray  # (n, J, 4) unit quaternions
    root_displacement: np.ndarray  # (n, 3), frame 0 is zero
    fps: int

    @property
    def n_frames(self) -> int:
        return self.rotations.shape[0]

    @property
    def joint_count(self) -> int:
        return self.rotations.shape[1]


def _axis_quat(angles, axis_index):
    n, j = angles.shape
    q = np.zeros((n, j, 4))
    q[..., 0] = np.cos(angles / 2.0)
    q[..., 1 + axis_index] = np.sin(angles / 2.0)
    return q


def generate_motion(
    motion_seed: int,
    n_frames: int,
    joint_count: int = 8,
    config: MotionConfig | None = None,
) -> SyntheticMotion:
    """Deterministic band-limited motion; per-frame joint rotation change
    stays below config.max_step_deg by construction."""
    if n_frames < 2:
        raise ValueError("a motion needs at least 2 frames")
    config = config or MotionConfig()
    rng = np.random.default_rng(motion_seed)
    t = np.arange(n_frames) / config.fps
    max_step = np.deg2rad(config.max_step_deg)

    angles = np.zeros((n_frames, joint_count, 3))
    for j in range(joint_count):
        rate_bound = 0.0
        joint_angles = np.zeros((n_frames, 3))
        for axis in range(3):
            n_sin = int(rng.integers(1, config.max_sinusoids + 1))
            amps = rng.uniform(0.0, config.amplitude, size=n_sin) / n_sin
            freqs = rng.uniform(*config.frequency, size=n_sin)
            phases = rng.uniform(0.0, 2.0 * np.pi, size=n_sin)
            for a, f, ph in zip(amps, freqs, phases):
                joint_angles[:, axis] += a * np.sin(2.0 * np.pi * f * t + ph)
                rate_bound += a * 2.0 * np.pi * f / config.fps
        if rate_bound > 0.95 * max_step:
            joint_angles *= 0.95 * max_step / rate_bound
        angles[:, j, :] = joint_angles

    qx = _axis_quat(angles[..., 0], 0)
    qy = _axis_quat(angles[..., 1], 1)
    qz = _axis_quat(angles[..., 2], 2)
    rotations = quat_mul(qz, quat_mul(qy, qx))

    heading = rng.uniform(0.0, 2.0 * np.pi)
    speed = rng.uniform(0.0, config.root_speed)
    bob_amp = rng.uniform(0.0, config.root_bob)
    bob_freq = rng.uniform(*config.frequency)
    bob_phase = rng.uniform(0.0, 2.0 * np.pi)
    disp = np.zeros((n_frames, 3))
    disp[:, 0] = speed * t * np.cos(heading)
    disp[:, 2] = speed * t * np.sin(heading)
    disp[:, 1] = bob_amp * np.sin(2.0 * np.pi * bob_freq * t + bob_phase)
    disp -= disp[0]
    return SyntheticMotion(rotations=rotations, root_displacement=disp, fps=config.fps)


def realize_motion(character: SyntheticCharacter, motion: SyntheticMotion) -> list[PoseFrame]:
    """Pose frames of the motion performed by the character.

    The root starts at the character's T-pose root and drifts by the motion's
    normalized displacement scaled by the character's leg length.
    """
    if motion.joint_count != character.joint_count:
        raise ValueError(
            f"motion has {motion.joint_count} joints, character has {character.joint_count}"
        )
    leg = character.leg_length
    base = character.skeleton.joint_positions[character.skeleton.root]
    frames = []
    for i in range(motion.n_frames):
        frames.append(PoseFrame(motion.rotations[i], base + leg * motion.root_displacement[i]))
    return frames


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RenderedSequence:
    """Point-cloud sequence plus ground truth for evaluation."""

    clouds: list  # n PointClouds
    joints: np.ndarray  # (n, J, 3) FK ground truth
    frames: list  # n PoseFrames
    corresponded: bool
    tpose_cloud: PointCloud | None = None  # corresponded mode only
    point_weights: SkinWeights | None = None

    @property
    def n_frames(self) -> int:
        return len(self.clouds)


def render_sequence(
    character: SyntheticCharacter,
    motion: SyntheticMotion,
    n_points: int,
    seed: int,
    corresponded: bool = False,
) -> RenderedSequence:
    """Sample the moving body surface.

    Fresh mode draws new surface samples every frame (correspondence-free
    input realism); corresponded mode fixes barycentric anchors once and
    deforms them with the ground-truth weights, so point k tracks the same
    material point in every frame.
    """
    frames = realize_motion(character, motion)
    joints = np.stack([forward_kinematics(character.skeleton, f) for f in frames])

    if corresponded:
        tpose_cloud = sample_surface(character.mesh_vertices, character.mesh_triangles, n_points, seed)
        weights = character.skin_weights_at(tpose_cloud.points)
        clouds = [
            linear_blend_skinning(tpose_cloud, weights, character.skeleton, f) for f in frames
        ]
        return RenderedSequence(
            clouds=clouds,
            joints=joints,
            frames=frames,
            corresponded=True,
            tpose_cloud=tpose_cloud,
            point_weights=weights,
        )

    clouds = []
    for i, f in enumerate(frames):
        posed_verts = linear_blend_skinning(
            PointCloud(character.mesh_vertices),
            character.vertex_weights,
            character.skeleton,
            f,
        ).points
        clouds.append(
            sample_surface(posed_verts, character.mesh_triangles, n_points, seed=[seed, i])
        )
    return RenderedSequence(clouds=clouds, joints=joints, frames=frames, corresponded=False)
