"""Skinning-field predictor.

Maps (query point, T-pose skeleton) to a simplex of per-joint skinning
weights.  The input feature is the ordered vector of distances from the
query to each T-pose joint, which makes the field translation invariant by
construction; an alternative mode feeds the raw per-joint offset components
instead (root-aligned, which for a T-pose is the world frame).

Training minimizes the LBS reconstruction error over corresponded pairs of
T-pose and posed scans; gradients flow through LBS into the MLP.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffkin import lbs_points_t
from .geometry import PointCloud, Skeleton, SkinWeights, linear_blend_skinning
from .nn import Adam, Linear, Module, load_checkpoint, load_into, save_checkpoint
from .synth import CharacterConfig, MotionConfig, generate_character, generate_motion, render_sequence

FEATURE_MODES = ("distance", "offset")


@dataclass(frozen=True)
class SkinConfig:
    joint_count: int = 8
    hidden: int = 256
    dropout: float = 0.2
    feature_mode: str = "distance"
    seed: int = 0

    @property
    def input_dim(self) -> int:
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}, got {self.feature_mode!r}")
        return self.joint_count if self.feature_mode == "distance" else 3 * self.joint_count


def skin_features(points, tpose_skeleton: Skeleton, mode="distance") -> np.ndarray:
    """Per-point features; (V, J) distances or (V, 3J) offsets."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    joints = tpose_skeleton.joint_positions
    offsets = pts[:, None, :] - joints[None, :, :]
    if mode == "distance":
        return np.linalg.norm(offsets, axis=-1)
    if mode == "offset":
        return offsets.reshape(pts.shape[0], -1)
    raise ValueError(f"feature_mode must be one of {FEATURE_MODES}, got {mode!r}")


class SkinModel(Module):
    """Three linear layers with dropout, softmax output onto the simplex."""

    def __init__(self, config: SkinConfig | None = None):
        super().__init__()
        self.config = config or SkinConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        self.l1 = self.register_module("l1", Linear(cfg.input_dim, cfg.hidden, rng))
        self.l2 = self.register_module("l2", Linear(cfg.hidden, cfg.hidden, rng))
        self.l3 = self.register_module("l3", Linear(cfg.hidden, cfg.joint_count, rng))
        self._drop_rng = np.random.default_rng(rng.integers(0, 2**63))

    def forward(self, features) -> Tensor:
        x = Tensor(features) if not isinstance(features, Tensor) else features
        x = ad.relu(self.l1(x))
        x = ad.dropout(x, self.config.dropout, self._drop_rng, training=self.training)
        x = ad.relu(self.l2(x))
        x = ad.dropout(x, self.config.dropout, self._drop_rng, training=self.training)
        return ad.softmax(self.l3(x))


def save_model(path, model: SkinModel):
    save_checkpoint(path, "skin", model.config.joint_count, model.named_parameters(),
                    extra=dataclasses.asdict(model.config))


def load_model(path) -> SkinModel:
    header, _ = load_checkpoint(path)
    if header["module"] != "skin":
        raise ValueError(f"{path}: checkpoint holds module '{header['module']}', expected 'skin'")
    cfg = SkinConfig(**header.get("config", {}))
    model = SkinModel(cfg)
    load_into(model, path, expect_module="skin")
    return model.eval()


def predict_skin_weights(model: SkinModel, points: PointCloud, tpose_skeleton: Skeleton) -> SkinWeights:
    """Weight rows on the simplex for every point of the cloud."""
    if tpose_skeleton.joint_count != model.config.joint_count:
        raise ValueError(
            f"skeleton has {tpose_skeleton.joint_count} joints, model expects {model.config.joint_count}"
        )
    feats = skin_features(points, tpose_skeleton, model.config.feature_mode)
    return SkinWeights(model.forward(feats).data)


def skin_loss(model: SkinModel, tpose_points, posed_points, rotations, root_translation, tpose_skeleton):
    """Mean LBS reconstruction residual over corresponded point pairs."""
    tpose_points = np.asarray(tpose_points, dtype=np.float64)
    posed_points = np.asarray(posed_points, dtype=np.float64)
    if tpose_points.shape != posed_points.shape:
        raise ValueError(
            f"correspondence mismatch: {tpose_points.shape} T-pose vs {posed_points.shape} posed points"
        )
    feats = skin_features(tpose_points, tpose_skeleton, model.config.feature_mode)
    weights = model.forward(feats)
    recon = lbs_points_t(tpose_points, weights, tpose_skeleton, rotations, root_translation)
    return ad.l2norm(recon - Tensor(posed_points), axis=-1).mean()


def animate(tpose_cloud: PointCloud, tpose_skeleton: Skeleton, pose_stream, model=None, weights=None):
    """Stream of skinned frames in fixed correspondence with the T-pose cloud.

    Weights are predicted once (or supplied from a cache) and reused for
    every frame; one LBS pass per pose.
    """
    if weights is None:
        if model is None:
            raise ValueError("animate needs a model or cached weights")
        weights = predict_skin_weights(model, tpose_cloud, tpose_skeleton)
    if weights.point_count != len(tpose_cloud):
        raise ValueError(f"{weights.point_count} weight rows for {len(tpose_cloud)} points")
    for pose in pose_stream:
        if pose.joint_count != tpose_skeleton.joint_count:
            raise ValueError(
                f"pose has {pose.joint_count} joints, skeleton has {tpose_skeleton.joint_count}"
            )
        yield linear_blend_skinning(tpose_cloud, weights, tpose_skeleton, pose)


# ---------------------------------------------------------------------------
# dataset + training
# ---------------------------------------------------------------------------

@dataclass
class SkinSample:
    tpose_points: np.ndarray  # (N, 3)
    posed_points: np.ndarray  # (N, 3), in correspondence
    rotations: np.ndarray  # (J, 4) explaining the posed points
    root_translation: np.ndarray  # (3,)
    skeleton: Skeleton  # T-pose skeleton (regressed or ground truth)


def build_skin_dataset(
    character_seeds,
    frames_per_character=8,
    n_points=400,
    seed=0,
    character_config: CharacterConfig | None = None,
    motion_config: MotionConfig | None = None,
    skeleton_provider=None,
) -> list:
    """Corresponded (T-pose, posed) scan pairs with their explaining pose.

    skeleton_provider optionally maps a T-pose cloud to the skeleton used in
    training (e.g. a trained skeleton regressor); ground truth by default.
    """
    samples = []
    for cs in character_seeds:
        char = generate_character(cs, character_config)
        motion = generate_motion([seed, cs], frames_per_character, char.joint_count, motion_config)
        seq = render_sequence(char, motion, n_points, seed=[seed, cs, 2], corresponded=True)
        skeleton = char.skeleton if skeleton_provider is None else skeleton_provider(seq.tpose_cloud)
        for i, frame in enumerate(seq.frames):
            samples.append(
                SkinSample(
                    tpose_points=seq.tpose_cloud.points,
                    posed_points=seq.clouds[i].points,
                    rotations=frame.rotations.copy(),
                    root_translation=frame.root_translation.copy(),
                    skeleton=skeleton,
                )
            )
    return samples


@dataclass
class SkinTrainResult:
    model: SkinModel
    losses: list
    checkpoint: str | None = None


def train_skin(
    dataset,
    config: SkinConfig | None = None,
    steps=5000,
    points_per_step=256,
    lr=1e-4,
    seed=0,
    checkpoint_path=None,
    log_every=0,
) -> SkinTrainResult:
    """Minimize the LBS reconstruction residual over corresponded pairs."""
    model = SkinModel(config)
    model.train()
    opt = Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 5])
    losses = []
    for step in range(steps):
        sample = dataset[int(rng.integers(0, len(dataset)))]
        n = sample.tpose_points.shape[0]
        take = min(points_per_step, n)
        idx = rng.choice(n, size=take, replace=False)
        loss = skin_loss(
            model,
            sample.tpose_points[idx],
            sample.posed_points[idx],
            sample.rotations,
            sample.root_translation,
            sample.skeleton,
        )
        value = loss.item()
        if not np.isfinite(value):
            if checkpoint_path:
                save_model(checkpoint_path, model)
            raise FloatingPointError(f"skin training diverged at step {step} (loss {value})")
        losses.append(value)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and step % log_every == 0:
            print(f"skin step {step}: loss {value:.6f}")
    model.eval()
    if checkpoint_path:
        save_model(checkpoint_path, model)
    return SkinTrainResult(model=model, losses=losses, checkpoint=checkpoint_path)
