"""Skeleton regressor: order-invariant point-cloud encoder for joint positions.

A shared per-point MLP with two feature-transform blocks feeds a symmetric
max-pool, so the regressed joints are exactly invariant to the order of the
input points.  The head regresses world-space positions of the canonical
tree's joints.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import PointCloud, Skeleton, linear_blend_skinning, sample_surface
from .nn import Adam, FeatureTransform, Linear, Module, load_checkpoint, load_into, save_checkpoint
from .synth import CharacterConfig, MotionConfig, canonical_parents, generate_character, generate_motion, realize_motion

MIN_POINTS = 64


@dataclass(frozen=True)
class SkrConfig:
    joint_count: int = 8
    n_points: int = 1024
    trunk: tuple = (64, 128, 1024)
    head: tuple = (512, 256)
    dropout: float = 0.3
    stn_widths: tuple = (64, 128)
    stn_head: int = 64
    seed: int = 0


class SkrModel(Module):
    def __init__(self, config: SkrConfig | None = None):
        super().__init__()
        self.config = config or SkrConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        t0, t1, t2 = cfg.trunk
        h0, h1 = cfg.head
        self.stn_input = self.register_module(
            "stn_input", FeatureTransform(3, rng, widths=cfg.stn_widths, head_width=cfg.stn_head)
        )
        self.conv1 = self.register_module("conv1", Linear(3, t0, rng))
        self.stn_feature = self.register_module(
            "stn_feature", FeatureTransform(t0, rng, widths=cfg.stn_widths, head_width=cfg.stn_head)
        )
        self.conv2 = self.register_module("conv2", Linear(t0, t1, rng))
        self.conv3 = self.register_module("conv3", Linear(t1, t2, rng))
        self.fc1 = self.register_module("fc1", Linear(t2, h0, rng))
        self.fc2 = self.register_module("fc2", Linear(h0, h1, rng))
        self.out = self.register_module("out", Linear(h1, 3 * cfg.joint_count, rng))
        self._drop_rng = np.random.default_rng(rng.integers(0, 2**63))

    def forward(self, points) -> Tensor:
        """Joint positions (J, 3) regressed from one (V, 3) cloud."""
        pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
        if pts.shape[0] < MIN_POINTS:
            raise ValueError(f"need at least {MIN_POINTS} points, got {pts.shape[0]} (pooling degenerates)")
        x = self.stn_input(Tensor(pts))
        x = ad.relu(self.conv1(x))
        x = self.stn_feature(x)
        x = ad.relu(self.conv2(x))
        x = ad.relu(self.conv3(x))
        pooled = ad.tmax(x, axis=0).reshape(1, -1)
        h = ad.relu(self.fc1(pooled))
        h = ad.relu(self.fc2(h))
        h = ad.dropout(h, self.config.dropout, self._drop_rng, training=self.training)
        return self.out(h).reshape(self.config.joint_count, 3)


def save_model(path, model: SkrModel):
    save_checkpoint(path, "skr", model.config.joint_count, model.named_parameters(),
                    extra=dataclasses.asdict(model.config))


def load_model(path) -> SkrModel:
    header, _ = load_checkpoint(path)
    if header["module"] != "skr":
        raise ValueError(f"{path}: checkpoint holds module '{header['module']}', expected 'skr'")
    raw = header.get("config", {})
    cfg = SkrConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    model = SkrModel(cfg)
    load_into(model, path, expect_module="skr")
    return model.eval()


def regress_skeleton(model: SkrModel, cloud: PointCloud) -> Skeleton:
    """Predicted skeleton on the canonical tree; rest offsets are derived
    from the predicted joints, which is exact when the input is a T-pose."""
    joints = model.forward(cloud).data
    return Skeleton.from_joints(joints, canonical_parents(model.config.joint_count))


def skr_loss(predicted: Tensor, gt_joints) -> Tensor:
    """Plain MSE against ground-truth joints; no auxiliary terms."""
    return ad.squared_difference(predicted, Tensor(np.asarray(gt_joints, dtype=np.float64)))


# ---------------------------------------------------------------------------
# dataset + training
# ---------------------------------------------------------------------------

@dataclass
class SkrEntry:
    posed_vertices: np.ndarray
    triangles: np.ndarray
    joints: np.ndarray  # (J, 3)


@dataclass
class SkrDataset:
    entries: list
    n_points: int
    translation_range: float = 0.5
    resample: bool = True  # False pins each entry to one fixed sampling

    def sample(self, index, seed):
        """Fresh surface sampling (and a fresh global offset) per epoch."""
        entry = self.entries[index]
        rng = np.random.default_rng(seed if self.resample else [index, 0])
        cloud = sample_surface(entry.posed_vertices, entry.triangles, self.n_points, seed=rng.integers(2**31))
        if self.translation_range > 0:
            offset = rng.uniform(-self.translation_range, self.translation_range, size=3)
            return cloud.points + offset, entry.joints + offset
        return cloud.points, entry.joints

    def __len__(self):
        return len(self.entries)


def build_skr_dataset(
    character_seeds,
    poses_per_character=4,
    n_points=1024,
    seed=0,
    character_config: CharacterConfig | None = None,
    motion_config: MotionConfig | None = None,
    translation_range=0.5,
) -> SkrDataset:
    """Posed capsule bodies with ground-truth joints from FK."""
    from .geometry import forward_kinematics

    entries = []
    for cs in character_seeds:
        char = generate_character(cs, character_config)
        motion = generate_motion([seed, cs], poses_per_character * 10, char.joint_count, motion_config)
        frames = realize_motion(char, motion)
        rng = np.random.default_rng([seed, cs, 1])
        picks = rng.choice(len(frames), size=poses_per_character, replace=False)
        for p in picks:
            frame = frames[int(p)]
            posed = linear_blend_skinning(
                PointCloud(char.mesh_vertices), char.vertex_weights, char.skeleton, frame
            ).points
            entries.append(SkrEntry(posed, char.mesh_triangles, forward_kinematics(char.skeleton, frame)))
    return SkrDataset(entries, n_points=n_points, translation_range=translation_range)


@dataclass
class TrainResult:
    model: object
    losses: list
    checkpoint: str | None = None


def train_skr(
    dataset: SkrDataset,
    config: SkrConfig | None = None,
    steps=1500,
    batch_size=8,
    lr=1e-4,
    seed=0,
    checkpoint_path=None,
    log_every=0,
) -> TrainResult:
    """Minimize the joint-position MSE; emits the loss curve and an optional
    checkpoint.  Aborts on non-finite loss, keeping the last good checkpoint."""
    model = SkrModel(config)
    model.train()
    opt = Adam(model.parameters(), lr=lr)
    order_rng = np.random.default_rng([seed, 77])
    losses = []
    for step in range(steps):
        idx = order_rng.integers(0, len(dataset), size=batch_size)
        opt.zero_grad()
        total = None
        for i, di in enumerate(idx):
            pts, joints = dataset.sample(int(di), seed=[seed, step, i])
            loss = skr_loss(model.forward(pts), joints)
            total = loss if total is None else total + loss
        total = total * (1.0 / batch_size)
        value = total.item()
        if not np.isfinite(value):
            if checkpoint_path:
                save_model(checkpoint_path, model)
            raise FloatingPointError(f"skr training diverged at step {step} (loss {value})")
        losses.append(value)
        total.backward()
        opt.step()
        if log_every and step % log_every == 0:
            print(f"skr step {step}: loss {value:.6f}")
    model.eval()
    if checkpoint_path:
        save_model(checkpoint_path, model)
    return TrainResult(model=model, losses=losses, checkpoint=checkpoint_path)
