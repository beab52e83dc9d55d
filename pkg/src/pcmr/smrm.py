"""Skeletal motion retargeting.

An encoder GRU summarizes the source joint track (joints relative to the
root plus the normalized root displacement); a decoder GRU conditioned on
the target T-pose skeleton emits per-frame joint quaternions and a root
displacement, which a differentiable FK layer turns into target joints.

Training is unsupervised: cycle consistency on joints, cycle consistency on
rotations, a sequence discriminator played against the generator, and an
acceleration smoothing term.  Inference is online: one frame in, one frame
out, with the recurrent state threaded by the caller.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .diffkin import fk_positions_t, quat_normalize_t
from .geometry import (
    PoseFrame,
    Skeleton,
    forward_kinematics,
    quat_normalize,
    reference_leg_length,
)
from .nn import GRU, Adam, Linear, Module, load_checkpoint, load_into, save_checkpoint
from .synth import CharacterConfig, MotionConfig, generate_character, generate_motion, realize_motion

LAMBDA_ROT = 0.01
LAMBDA_SMOOTH = 0.001
CONTEXT_FRAMES = 30  # 1 s at 30 fps


@dataclass(frozen=True)
class SmrmConfig:
    joint_count: int = 8
    hidden: int = 512
    layers: int = 2
    dropout: float = 0.2
    disc_hidden: int = 256
    disc_layers: int = 2
    condition_every_step: bool = True
    seed: int = 0


@dataclass(frozen=True)
class MotionSequence:
    """A realized motion: per-frame poses on a concrete skeleton, 30 fps."""

    frames: list
    skeleton: Skeleton
    fps: float = 30.0

    def __post_init__(self):
        j = self.skeleton.joint_count
        for f in self.frames:
            if f.joint_count != j:
                raise ValueError("all frames must share the skeleton's joint count")

    @property
    def n_frames(self):
        return len(self.frames)

    def joint_track(self) -> np.ndarray:
        """(n, J, 3) world joint positions via FK."""
        return np.stack([forward_kinematics(self.skeleton, f) for f in self.frames])


class SmrmModel(Module):
    def __init__(self, config: SmrmConfig | None = None):
        super().__init__()
        self.config = config or SmrmConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        j = cfg.joint_count
        self.encoder = self.register_module(
            "encoder", GRU(3 * (j + 1), cfg.hidden, cfg.layers, rng, dropout=cfg.dropout)
        )
        self.decoder = self.register_module(
            "decoder", GRU(3 * j + cfg.hidden, cfg.hidden, cfg.layers, rng, dropout=cfg.dropout)
        )
        self.rot_head = self.register_module("rot_head", Linear(cfg.hidden, 4 * j, rng))
        self.trans_head = self.register_module("trans_head", Linear(cfg.hidden, 3, rng))


def save_model(path, model: SmrmModel):
    save_checkpoint(path, "smrm", model.config.joint_count, model.named_parameters(),
                    extra=dataclasses.asdict(model.config))


def load_model(path) -> SmrmModel:
    header, _ = load_checkpoint(path)
    if header["module"] != "smrm":
        raise ValueError(f"{path}: checkpoint holds module '{header['module']}', expected 'smrm'")
    cfg = SmrmConfig(**header.get("config", {}))
    model = SmrmModel(cfg)
    load_into(model, path, expect_module="smrm")
    return model.eval()


class Discriminator(Module):
    """Sequence realism score in (0, 1) from a GRU over motion features."""

    def __init__(self, config: SmrmConfig | None = None):
        super().__init__()
        self.config = config or SmrmConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed + 1)
        j = cfg.joint_count
        self.gru = self.register_module("gru", GRU(3 * (j + 1), cfg.disc_hidden, cfg.disc_layers, rng))
        self.head = self.register_module("head", Linear(cfg.disc_hidden, 1, rng))

    def score(self, feature_frames):
        """feature_frames: list over time of (B, 3(J+1)); returns (B, 1)."""
        outs, _ = self.gru.run([as_tensor(x) for x in feature_frames])
        return ad.sigmoid(self.head(outs[-1]))


# ---------------------------------------------------------------------------
# skeleton conditioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SkeletonInfo:
    """Constants the model needs about one body."""

    skeleton: Skeleton
    rest_offsets: np.ndarray  # (J, 3)
    tpose_root: np.ndarray  # (3,)
    conditioning: np.ndarray  # (3J,) T-pose joints relative to the root
    leg_length: float

    @classmethod
    def from_skeleton(cls, skeleton: Skeleton) -> "SkeletonInfo":
        root = skeleton.joint_positions[skeleton.root]
        cond = (skeleton.joint_positions - root).reshape(-1)
        return cls(
            skeleton=skeleton,
            rest_offsets=skeleton.rest_offsets.copy(),
            tpose_root=root.copy(),
            conditioning=cond,
            leg_length=reference_leg_length(skeleton),
        )


def motion_features(joints, roots, root_ref, leg_length):
    """Encoder/discriminator features: joints relative to the root (3J) plus
    the root displacement from root_ref in leg-length units (3).

    Works on Tensors (training graph) and plain arrays alike; inputs are
    (B, J, 3) and (B, 3); leg_length is a float or a (B, 1) array.
    """
    joints = as_tensor(joints)
    roots = as_tensor(roots)
    b, j, _ = joints.shape
    rel = joints - roots.reshape(b, 1, 3)
    disp = (roots - as_tensor(root_ref)) * (1.0 / np.asarray(leg_length, dtype=np.float64))
    return ad.concatenate([rel.reshape(b, 3 * j), disp], axis=1)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _decode_frame(model, enc_out, cond, dec_state, first_frame):
    cfg = model.config
    b = enc_out.shape[0]
    if cfg.condition_every_step or first_frame:
        cond_in = as_tensor(np.broadcast_to(cond, (b, cond.shape[-1])).copy()) if isinstance(cond, np.ndarray) else cond
    else:
        cond_in = Tensor(np.zeros((b, 3 * cfg.joint_count)))
    dec_in = ad.concatenate([cond_in, enc_out], axis=1)
    dec_out, dec_state = model.decoder.step(dec_in, dec_state)
    quats = quat_normalize_t(model.rot_head(dec_out).reshape(b, cfg.joint_count, 4))
    disp = model.trans_head(dec_out)
    return quats, disp, dec_state


def retarget_track(
    model: SmrmModel,
    src_joints_frames,
    src_roots_frames,
    src_info,
    tgt_info,
    src_root_ref=None,
):
    """Whole-sequence retargeting used in training.

    src_joints_frames / src_roots_frames: lists over time of (B, J, 3) and
    (B, 3), Tensors or arrays.  src_info/tgt_info: dicts with 'legs' (B,),
    'roots' (B, 3), 'cond' (B, 3J), 'offsets' (B, J, 3) and a 'skeleton' for
    topology.  Returns per-frame lists (rotations (B, J, 4), roots (B, 3),
    joints (B, J, 3)).
    """
    b = src_roots_frames[0].shape[0]
    enc_state = model.encoder.init_state(b)
    dec_state = model.decoder.init_state(b)
    root_ref = src_roots_frames[0] if src_root_ref is None else src_root_ref
    src_leg = src_info["legs"].reshape(b, 1)
    tgt_leg = tgt_info["legs"].reshape(b, 1)
    tgt_root = tgt_info["roots"]
    out_rot, out_root, out_joints = [], [], []
    for i, (joints, roots) in enumerate(zip(src_joints_frames, src_roots_frames)):
        x = motion_features(joints, roots, root_ref, src_leg)
        enc_out, enc_state = model.encoder.step(x, enc_state)
        quats, delta, dec_state = _decode_frame(model, enc_out, tgt_info["cond"], dec_state, i == 0)
        root = as_tensor(tgt_root) + delta * tgt_leg
        joints_out = fk_positions_t(
            tgt_info["skeleton"], quats, root, rest_offsets=tgt_info["offsets"]
        )
        out_rot.append(quats)
        out_root.append(root)
        out_joints.append(joints_out)
    return out_rot, out_root, out_joints


# ---------------------------------------------------------------------------
# online inference
# ---------------------------------------------------------------------------

@dataclass
class SmrmState:
    """Recurrent state threaded through streaming retargeting.

    One state object serves one sequence and must not be shared between
    threads; memory is constant in sequence length.
    """

    enc_state: list
    dec_state: list
    tgt: SkeletonInfo
    src_root_ref: np.ndarray | None = None
    src_leg: float | None = None
    prev_quats: np.ndarray | None = None
    frame_index: int = 0


def init_state(model: SmrmModel, target_tpose: Skeleton) -> SmrmState:
    if target_tpose.joint_count != model.config.joint_count:
        raise ValueError(
            f"target has {target_tpose.joint_count} joints, model expects {model.config.joint_count}"
        )
    return SmrmState(
        enc_state=model.encoder.init_state(1),
        dec_state=model.decoder.init_state(1),
        tgt=SkeletonInfo.from_skeleton(target_tpose),
    )


def _canonical_signs(quats, prev):
    """Flip quaternion signs for temporal continuity; first frame keeps w >= 0."""
    out = quats.copy()
    if prev is None:
        flip = out[:, 0] < 0
    else:
        flip = np.sum(out * prev, axis=1) < 0
    out[flip] *= -1.0
    return out

def retarget_skeletal(model: SmrmModel, source_joints, source_root, source_skeleton, state: SmrmState):
    """Online step: one source frame in, one retargeted PoseFrame out.

    source_joints: (J, 3) world joints of the current source frame;
    source_root: (3,) source root position; source_skeleton: the source
    skeleton (used once, on the first frame, for the leg-length scale).
    """
    cfg = model.config
    joints = np.asarray(source_joints, dtype=np.float64)
    if joints.shape != (cfg.joint_count, 3):
        raise ValueError(f"expected source joints ({cfg.joint_count}, 3), got {joints.shape}")
    if state.src_root_ref is None:
        state.src_root_ref = np.asarray(source_root, dtype=np.float64).copy()
        state.src_leg = reference_leg_length(source_skeleton)
    tgt = state.tgt
    tgt_info = {
        "skeleton": tgt.skeleton,
        "offsets": tgt.rest_offsets[None],
        "roots": tgt.tpose_root[None],
        "cond": tgt.conditioning[None],
        "legs": np.array([tgt.leg_length]),
    }
    x = motion_features(joints[None], np.asarray(source_root, dtype=np.float64)[None],
                        state.src_root_ref[None], state.src_leg)
    enc_out, state.enc_state = model.encoder.step(x, state.enc_state)
    quats, delta, state.dec_state = _decode_frame(
        model, enc_out, tgt_info["cond"], state.dec_state, state.frame_index == 0
    )
    root = tgt.tpose_root + delta.data[0] * tgt.leg_length
    q = _canonical_signs(quats.data[0], state.prev_quats)
    state.prev_quats = q
    state.frame_index += 1
    return PoseFrame(q, root), state


def retarget_sequence(model: SmrmModel, joints_track, roots_track, source_skeleton, target_tpose: Skeleton):
    """Whole-sequence convenience wrapper around the streaming step."""
    state = init_state(model, target_tpose)
    frames = []
    for i in range(len(joints_track)):
        frame, state = retarget_skeletal(model, joints_track[i], roots_track[i], source_skeleton, state)
        frames.append(frame)
    return MotionSequence(frames=frames, skeleton=target_tpose)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def smooth_loss(motion: MotionSequence) -> float:
    """Mean squared second finite difference of the joint track (the root
    joint carries the root translation)."""
    if motion.n_frames < 3:
        raise ValueError("smoothing loss needs at least 3 frames")
    track = motion.joint_track()
    acc = track[2:] - 2.0 * track[1:-1] + track[:-2]
    return float(np.mean(np.sum(acc * acc, axis=-1)))


def smooth_loss_t(joints_frames):
    """Graph version over a list of per-frame (B, J, 3) tensors."""
    if len(joints_frames) < 3:
        raise ValueError("smoothing loss needs at least 3 frames")
    terms = []
    for i in range(1, len(joints_frames) - 1):
        acc = joints_frames[i + 1] - 2.0 * joints_frames[i] + joints_frames[i - 1]
        terms.append((acc * acc).sum(axis=-1).mean())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def flip_to_reference(quats: Tensor, reference: np.ndarray) -> Tensor:
    """Identify q with -q by flipping rows to non-negative dot with the
    reference track (constant sign mask, so gradients pass through)."""
    dots = np.sum(quats.data * reference, axis=-1, keepdims=True)
    signs = np.where(dots < 0, -1.0, 1.0)
    return quats * Tensor(signs)


def rotation_cycle_loss_t(pred_rot_frames, gt_rotations):
    """MSE between predicted and ground-truth quaternions, sign-canonicalized."""
    terms = []
    for i, q in enumerate(pred_rot_frames):
        ref = gt_rotations[i]
        terms.append(ad.squared_difference(flip_to_reference(q, ref), Tensor(ref)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def joint_cycle_loss_t(pred_joint_frames, gt_joints):
    terms = []
    for i, j in enumerate(pred_joint_frames):
        terms.append(ad.squared_difference(j, Tensor(gt_joints[i])))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def cycle_loss(motion: MotionSequence, target_tpose: Skeleton, model: SmrmModel, gt_rotations=None):
    """A->B->A consistency of one motion against one target body.

    Returns (joint_loss, rotation_loss) as floats; gt_rotations defaults to
    the motion's own rotations.
    """
    src_info = SkeletonInfo.from_skeleton(motion.skeleton)
    tgt_info = SkeletonInfo.from_skeleton(target_tpose)
    track = motion.joint_track()
    roots = np.stack([f.root_translation for f in motion.frames])
    if gt_rotations is None:
        gt_rotations = np.stack([quat_normalize(f.rotations) for f in motion.frames])

    def info_dict(info):
        return {
            "skeleton": info.skeleton,
            "offsets": info.rest_offsets[None],
            "roots": info.tpose_root[None],
            "cond": info.conditioning[None],
            "legs": np.array([info.leg_length]),
        }

    src_joints = [track[i][None] for i in range(len(track))]
    src_roots = [roots[i][None] for i in range(len(track))]
    _, roots_b, joints_b = retarget_track(model, src_joints, src_roots, info_dict(src_info), info_dict(tgt_info))
    rot_a, _, joints_a = retarget_track(model, joints_b, roots_b, info_dict(tgt_info), info_dict(src_info))
    jl = joint_cycle_loss_t(joints_a, track[:, None]).item()
    rl = rotation_cycle_loss_t(rot_a, gt_rotations[:, None]).item()
    return jl, rl


def adversarial_losses(disc: Discriminator, real_frames, fake_frames):
    """Non-saturating GAN losses.

    real_frames/fake_frames: lists over time of (B, 3(J+1)) features.
    disc_loss = -log D(real) - log(1 - D(fake)) with the fake branch
    detached; gen_loss = -log D(fake) with gradients flowing to the
    generator.  Returns (gen_loss, disc_loss) tensors.
    """
    eps = 1e-12
    d_fake_gen = disc.score(fake_frames)
    gen_loss = -ad.log(d_fake_gen + eps).mean()
    d_real = disc.score(real_frames)
    detached = [as_tensor(f).detach() if isinstance(f, Tensor) else as_tensor(f) for f in fake_frames]
    d_fake = disc.score(detached)
    disc_loss = -ad.log(d_real + eps).mean() - ad.log(1.0 - d_fake + eps).mean()
    return gen_loss, disc_loss


# ---------------------------------------------------------------------------
# dataset + training
# ---------------------------------------------------------------------------

@dataclass
class SmrmCharacter:
    info: SkeletonInfo
    tracks: list  # per motion: dict(joints (n, J, 3), roots (n, 3), rotations (n, J, 4))


@dataclass
class SmrmDataset:
    characters: list
    context: int = CONTEXT_FRAMES

    def sample_pair(self, rng):
        """(source character, motion window, target character) triple."""
        si = int(rng.integers(0, len(self.characters)))
        ti = int(rng.integers(0, len(self.characters)))
        src = self.characters[si]
        track = src.tracks[int(rng.integers(0, len(src.tracks)))]
        n = track["joints"].shape[0]
        start = int(rng.integers(0, max(1, n - self.context + 1)))
        window = slice(start, start + self.context)
        return src, {k: v[window] for k, v in track.items()}, self.characters[ti]


def build_smrm_dataset(
    character_seeds,
    motions_per_character=3,
    frames_per_motion=90,
    context=CONTEXT_FRAMES,
    seed=0,
    character_config: CharacterConfig | None = None,
    motion_config: MotionConfig | None = None,
) -> SmrmDataset:
    """Ground-truth joint tracks over varied capsule bodies."""
    characters = []
    for cs in character_seeds:
        char = generate_character(cs, character_config)
        info = SkeletonInfo.from_skeleton(char.skeleton)
        tracks = []
        for m in range(motions_per_character):
            motion = generate_motion([seed, cs, m], frames_per_motion, char.joint_count, motion_config)
            frames = realize_motion(char, motion)
            joints = np.stack([forward_kinematics(char.skeleton, f) for f in frames])
            roots = np.stack([f.root_translation for f in frames])
            tracks.append({"joints": joints, "roots": roots, "rotations": motion.rotations.copy()})
        characters.append(SmrmCharacter(info=info, tracks=tracks))
    return SmrmDataset(characters=characters, context=context)


def _batch_info(characters):
    return {
        "skeleton": characters[0].info.skeleton,
        "offsets": np.stack([c.info.rest_offsets for c in characters]),
        "roots": np.stack([c.info.tpose_root for c in characters]),
        "cond": np.stack([c.info.conditioning for c in characters]),
        "legs": np.array([c.info.leg_length for c in characters]),
    }


def eval_cycle_loss(model: SmrmModel, dataset: SmrmDataset, n_pairs=16, seed=0):
    """Mean A->B->A joint cycle loss over fixed sampled pairs (eval mode).

    Comparing this before and after training measures learning on the same
    data with dropout off.
    """
    was_training = model.training
    model.eval()
    rng = np.random.default_rng([seed, 21])
    totals = []
    for _ in range(n_pairs):
        src, window, tgt = dataset.sample_pair(rng)
        n = window["joints"].shape[0]
        src_info = _batch_info([src])
        tgt_info = _batch_info([tgt])
        src_joints = [window["joints"][i][None] for i in range(n)]
        src_roots = [window["roots"][i][None] for i in range(n)]
        _, roots_b, joints_b = retarget_track(model, src_joints, src_roots, src_info, tgt_info)
        _, _, joints_a = retarget_track(model, joints_b, roots_b, tgt_info, src_info)
        totals.append(joint_cycle_loss_t(joints_a, src_joints).item())
    model.train(was_training)
    return float(np.mean(totals))


def training_losses(
    model: SmrmModel,
    disc: Discriminator,
    src_info,
    tgt_info,
    src_joints,
    src_roots,
    gt_rot,
    lambda_rot=LAMBDA_ROT,
    lambda_smooth=LAMBDA_SMOOTH,
):
    """One training objective evaluation: A->B->A cycle, rotation cycle,
    smoothing on the A->B result, and the adversarial pair.

    Returns (total generator loss, discriminator loss, parts dict).
    """
    n = len(src_joints)
    _, roots_b, joints_b = retarget_track(model, src_joints, src_roots, src_info, tgt_info)
    rot_a, _, joints_a = retarget_track(model, joints_b, roots_b, tgt_info, src_info)
    l_cycle = joint_cycle_loss_t(joints_a, src_joints)
    l_rot = rotation_cycle_loss_t(rot_a, gt_rot)
    l_smooth = smooth_loss_t(joints_b)
    fake_frames = [
        motion_features(joints_b[i], roots_b[i], roots_b[0].detach(), tgt_info["legs"].reshape(-1, 1))
        for i in range(n)
    ]
    real_frames = [
        motion_features(src_joints[i], src_roots[i], src_roots[0], src_info["legs"].reshape(-1, 1))
        for i in range(n)
    ]
    l_gen, l_disc = adversarial_losses(disc, real_frames, fake_frames)
    total = l_cycle + l_gen + lambda_rot * l_rot + lambda_smooth * l_smooth
    parts = {"cycle": l_cycle, "rot": l_rot, "smooth": l_smooth, "gen": l_gen}
    return total, l_disc, parts


@dataclass
class SmrmTrainResult:
    model: SmrmModel
    discriminator: Discriminator
    losses: dict
    checkpoint: str | None = None


def train_smrm(
    dataset: SmrmDataset,
    config: SmrmConfig | None = None,
    steps=300,
    batch_size=4,
    lr=1e-4,
    lambda_rot=LAMBDA_ROT,
    lambda_smooth=LAMBDA_SMOOTH,
    seed=0,
    checkpoint_path=None,
    log_every=0,
) -> SmrmTrainResult:
    """Alternating generator/discriminator training (1:1) of
    L = cycle + adversarial + lambda_rot * rotation + lambda_smooth * smoothing."""
    config = config or SmrmConfig()
    model = SmrmModel(config)
    disc = Discriminator(config)
    model.train()
    disc.train()
    opt_g = Adam(model.parameters(), lr=lr)
    opt_d = Adam(disc.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 13])
    history = {"cycle": [], "rot": [], "smooth": [], "gen": [], "disc": [], "total": []}

    for step in range(steps):
        sources, windows, targets = [], [], []
        for _ in range(batch_size):
            src, window, tgt = dataset.sample_pair(rng)
            sources.append(src)
            windows.append(window)
            targets.append(tgt)
        n = windows[0]["joints"].shape[0]
        src_info = _batch_info(sources)
        tgt_info = _batch_info(targets)
        src_joints = [np.stack([w["joints"][i] for w in windows]) for i in range(n)]
        src_roots = [np.stack([w["roots"][i] for w in windows]) for i in range(n)]
        gt_rot = [np.stack([w["rotations"][i] for w in windows]) for i in range(n)]

        total, l_disc, parts = training_losses(
            model, disc, src_info, tgt_info, src_joints, src_roots, gt_rot,
            lambda_rot=lambda_rot, lambda_smooth=lambda_smooth,
        )
        value = total.item()
        if not np.isfinite(value):
            if checkpoint_path:
                save_model(checkpoint_path, model)
            raise FloatingPointError(f"smrm training diverged at step {step} (loss {value})")

        opt_g.zero_grad()
        disc.zero_grad()
        total.backward()
        opt_g.step()

        opt_d.zero_grad()
        model.zero_grad()
        l_disc.backward()
        opt_d.step()

        for key, tensor in parts.items():
            history[key].append(tensor.item())
        history["disc"].append(l_disc.item())
        history["total"].append(value)
        if log_every and step % log_every == 0:
            print(
                f"smrm step {step}: cycle {parts['cycle'].item():.5f} rot {parts['rot'].item():.5f} "
                f"smooth {parts['smooth'].item():.5f} gen {parts['gen'].item():.5f} disc {l_disc.item():.5f}"
            )

    model.eval()
    disc.eval()
    if checkpoint_path:
        save_model(checkpoint_path, model)
    return SmrmTrainResult(model=model, discriminator=disc, losses=history, checkpoint=checkpoint_path)
