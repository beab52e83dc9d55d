"""Command-line orchestrator.

Subcommands cover synthetic data generation, the three training stages,
online retargeting, evaluation, viewable exports and the temporal-context
sweep.  Exit codes: 0 success, 2 configuration errors, 3 I/O errors
(missing files, malformed formats, stage-order violations), 4 numerical
failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import fileio, metrics, skin, skr, smrm
from .autodiff import NonFiniteError
from .config import PipelineConfig, load_config
from .fileio import ParseError
from .geometry import PointCloud, forward_kinematics, linear_blend_skinning
from .skin import SkinConfig, predict_skin_weights
from .skr import SkrConfig, regress_skeleton
from .smrm import SmrmConfig, init_state, retarget_skeletal
from .synth import CharacterConfig, generate_character, generate_motion, render_sequence

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class StageOrderError(FileNotFoundError):
    """A stage dependency (checkpoint or input) is missing."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _add_config_flags(parser):
    parser.add_argument("--config", default=None, help="key=value config file")
    for f in dataclasses.fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar="V", help=argparse.SUPPRESS)


def _config_from_args(args) -> PipelineConfig:
    overrides = {}
    for f in dataclasses.fields(PipelineConfig):
        val = getattr(args, f"cfg_{f.name}", None)
        if val is not None:
            overrides[f.name] = val
    return load_config(args.config, overrides)


def _require(path, what):
    if not Path(path).exists():
        raise StageOrderError(f"{what} not found: {path} (run the earlier stage first)")
    return Path(path)


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_loss_curve(path, losses):
    with open(path, "w") as f:
        f.write("step,loss\n")
        for i, v in enumerate(losses):
            f.write(f"{i},{v!r}\n")


def _character_config(cfg: PipelineConfig) -> CharacterConfig:
    return CharacterConfig(joint_count=cfg.joint_count)


def _skr_config(cfg: PipelineConfig) -> SkrConfig:
    return SkrConfig(
        joint_count=cfg.joint_count,
        n_points=cfg.n_points,
        trunk=cfg.ints("skr_trunk"),
        head=cfg.ints("skr_head"),
        dropout=cfg.dropout_skr,
        seed=cfg.seed,
    )


def _smrm_config(cfg: PipelineConfig) -> SmrmConfig:
    return SmrmConfig(
        joint_count=cfg.joint_count,
        hidden=cfg.smrm_hidden,
        layers=cfg.smrm_layers,
        dropout=cfg.dropout_smrm,
        disc_hidden=cfg.disc_hidden,
        condition_every_step=cfg.condition_every_step,
        seed=cfg.seed,
    )


def _skin_config(cfg: PipelineConfig) -> SkinConfig:
    return SkinConfig(
        joint_count=cfg.joint_count,
        hidden=cfg.skin_hidden,
        dropout=cfg.dropout_skin,
        feature_mode=cfg.skin_feature_mode,
        seed=cfg.seed,
    )


def _source_frames(source):
    """Yield source frame paths one at a time: a directory of PLYs, or '-'
    for newline-separated paths on stdin (the streaming contract)."""
    if source == "-":
        for line in sys.stdin:
            line = line.strip()
            if line:
                yield Path(line)
        return
    src = Path(source)
    if not src.is_dir():
        raise StageOrderError(f"source frame directory not found: {src}")
    frames = sorted(src.glob("*.ply"))
    if not frames:
        raise FileNotFoundError(f"no .ply frames in {src}")
    yield from frames


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _config_from_args(args)
    out = _out_dir(Path(cfg.out_dir))
    char_cfg = _character_config(cfg)
    source = generate_character(args.source_character, char_cfg)
    target = generate_character(args.target_character, char_cfg)
    motion = generate_motion(args.motion_seed, args.frames, cfg.joint_count)

    src_dir = _out_dir(out / "source")
    seq = render_sequence(source, motion, cfg.n_points, seed=cfg.seed, corresponded=False)
    entries = []
    for i, cloud in enumerate(seq.clouds):
        name = f"frame_{i:04d}.ply"
        fileio.write_ply(src_dir / name, cloud)
        entries.append((name, {"frame": i}))
    fileio.write_manifest(src_dir / "manifest.txt", entries)
    fileio.write_skeleton(src_dir / "skeleton.txt", source.skeleton)
    fileio.write_motion(src_dir / "motion.txt", seq.frames, fps=cfg.fps)

    tgt_dir = _out_dir(out / "target")
    gt = render_sequence(target, motion, cfg.n_points, seed=cfg.seed + 1, corresponded=True)
    fileio.write_ply(tgt_dir / "tpose.ply", gt.tpose_cloud)
    fileio.write_skeleton(tgt_dir / "skeleton.txt", target.skeleton)

    gt_dir = _out_dir(out / "gt")
    for i, cloud in enumerate(gt.clouds):
        fileio.write_ply(gt_dir / f"frame_{i:04d}.ply", cloud)
    fileio.write_motion(gt_dir / "motion.txt", gt.frames, fps=cfg.fps)
    print(f"gen-data: {len(seq.clouds)} source frames, target T-pose and ground truth under {out}")
    return EXIT_OK


def cmd_train_skr(args):
    cfg = _config_from_args(args)
    ckpt_dir = _out_dir(Path(cfg.checkpoint_dir))
    dataset = skr.build_skr_dataset(
        range(cfg.n_characters),
        poses_per_character=max(2, cfg.motions_per_character * 2),
        n_points=cfg.n_points,
        seed=cfg.seed,
        character_config=_character_config(cfg),
    )
    path = ckpt_dir / "skr.ckpt"
    result = skr.train_skr(
        dataset,
        config=_skr_config(cfg),
        steps=cfg.skr_steps,
        batch_size=cfg.skr_batch,
        lr=cfg.learning_rate,
        seed=cfg.seed,
        checkpoint_path=path,
        log_every=args.log_every,
    )
    _write_loss_curve(ckpt_dir / "skr_loss.csv", result.losses)
    print(f"train-skr: {cfg.skr_steps} steps, final loss {result.losses[-1]:.6f}, checkpoint {path}")
    return EXIT_OK


def cmd_train_smrm(args):
    cfg = _config_from_args(args)
    ckpt_dir = _out_dir(Path(cfg.checkpoint_dir))
    dataset = smrm.build_smrm_dataset(
        range(cfg.n_characters),
        motions_per_character=cfg.motions_per_character,
        frames_per_motion=cfg.frames_per_motion,
        context=cfg.context,
        seed=cfg.seed,
        character_config=_character_config(cfg),
    )
    path = ckpt_dir / "smrm.ckpt"
    result = smrm.train_smrm(
        dataset,
        config=_smrm_config(cfg),
        steps=cfg.smrm_steps,
        batch_size=cfg.smrm_batch,
        lr=cfg.learning_rate,
        lambda_rot=cfg.lambda_rot,
        lambda_smooth=cfg.lambda_smooth,
        seed=cfg.seed,
        checkpoint_path=path,
        log_every=args.log_every,
    )
    _write_loss_curve(ckpt_dir / "smrm_loss.csv", result.losses["total"])
    _write_loss_curve(ckpt_dir / "smrm_cycle_loss.csv", result.losses["cycle"])
    print(
        f"train-smrm: {cfg.smrm_steps} steps, cycle loss {result.losses['cycle'][0]:.5f} -> "
        f"{result.losses['cycle'][-1]:.5f}, checkpoint {path}"
    )
    return EXIT_OK


def cmd_train_skin(args):
    cfg = _config_from_args(args)
    ckpt_dir = _out_dir(Path(cfg.checkpoint_dir))
    provider = None
    if args.use_skr_skeletons:
        skr_model = skr.load_model(_require(ckpt_dir / "skr.ckpt", "skeleton regressor checkpoint"))
        provider = lambda cloud: regress_skeleton(skr_model, cloud)
    dataset = skin.build_skin_dataset(
        range(cfg.n_characters),
        frames_per_character=max(4, cfg.frames_per_motion // 8),
        n_points=cfg.n_points,
        seed=cfg.seed,
        character_config=_character_config(cfg),
        skeleton_provider=provider,
    )
    path = ckpt_dir / "skin.ckpt"
    result = skin.train_skin(
        dataset,
        config=_skin_config(cfg),
        steps=cfg.skin_steps,
        points_per_step=cfg.skin_points,
        lr=cfg.learning_rate,
        seed=cfg.seed,
        checkpoint_path=path,
        log_every=args.log_every,
    )
    _write_loss_curve(ckpt_dir / "skin_loss.csv", result.losses)
    print(f"train-skin: {cfg.skin_steps} steps, final loss {result.losses[-1]:.6f}, checkpoint {path}")
    return EXIT_OK


def run_retarget(skr_model, smrm_model, skin_model, tpose_cloud, frame_paths, out_dir, fps=30):
    """The online pipeline: regress target once, then stream source frames.

    Each output PLY is written before the next input frame is read; memory
    is bounded by one frame plus the recurrent state.
    """
    out = _out_dir(out_dir)
    target_skeleton = regress_skeleton(skr_model, tpose_cloud)
    weights = predict_skin_weights(skin_model, tpose_cloud, target_skeleton)
    fileio.write_weight_cache(out / "target_weights.bin", weights)
    fileio.write_skeleton(out / "target_skeleton.txt", target_skeleton)
    state = init_state(smrm_model, target_skeleton)
    poses = []
    count = 0
    for path in frame_paths:
        cloud = PointCloud(fileio.read_ply(path)[0])
        src_skel = regress_skeleton(skr_model, cloud)
        frame, state = retarget_skeletal(
            smrm_model, src_skel.joint_positions, src_skel.joint_positions[src_skel.root], src_skel, state
        )
        out_cloud = linear_blend_skinning(tpose_cloud, weights, target_skeleton, frame)
        fileio.write_ply(out / f"frame_{count:04d}.ply", out_cloud)
        poses.append(frame)
        count += 1
    if poses:
        fileio.write_motion(out / "motion.txt", poses, fps=fps)
    return count


def cmd_retarget(args):
    cfg = _config_from_args(args)
    ckpt_dir = Path(cfg.checkpoint_dir)
    skr_model = skr.load_model(_require(args.skr or ckpt_dir / "skr.ckpt", "skeleton regressor checkpoint"))
    smrm_model = smrm.load_model(_require(args.smrm or ckpt_dir / "smrm.ckpt", "motion retargeting checkpoint"))
    skin_model = skin.load_model(_require(args.skin or ckpt_dir / "skin.ckpt", "skinning checkpoint"))
    tpose_cloud = PointCloud(fileio.read_ply(_require(args.target_tpose, "target T-pose cloud"))[0])
    count = run_retarget(
        skr_model, smrm_model, skin_model, tpose_cloud, _source_frames(args.source),
        Path(cfg.out_dir), fps=cfg.fps,
    )
    print(f"retarget: {count} frames written to {cfg.out_dir}")
    return EXIT_OK


def _read_frame_dir(path):
    frames = sorted(Path(path).glob("frame_*.ply"))
    if not frames:
        raise FileNotFoundError(f"no frame_*.ply files in {path}")
    return [fileio.read_ply(p)[0] for p in frames]


def cmd_eval(args):
    cfg = _config_from_args(args)
    gt_clouds = _read_frame_dir(_require(args.gt, "ground-truth frame directory"))
    pred_clouds = _read_frame_dir(_require(args.pred, "predicted frame directory"))
    gt_skel = fileio.read_skeleton(_require(args.gt_skeleton, "ground-truth skeleton"))
    pred_skel = fileio.read_skeleton(_require(args.pred_skeleton, "predicted skeleton"))
    gt_frames, fps = fileio.read_motion(_require(args.gt_motion, "ground-truth motion"))
    pred_frames, _ = fileio.read_motion(_require(args.pred_motion, "predicted motion"))
    gt_joints = np.stack([forward_kinematics(gt_skel, f) for f in gt_frames])
    pred_joints = np.stack([forward_kinematics(pred_skel, f) for f in pred_frames])
    procrustes = None if cfg.procrustes == "none" else cfg.procrustes
    report = metrics.evaluate_sequences(
        gt_joints, pred_joints, gt_clouds, pred_clouds, procrustes=procrustes, fps=fps,
    )
    out = _out_dir(Path(cfg.out_dir))
    (out / "report.txt").write_text(report.to_text())
    (out / "report.csv").write_text(report.to_csv())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_export_ply(args):
    cfg = _config_from_args(args)
    out = _out_dir(Path(cfg.out_dir))
    char = generate_character(args.character, _character_config(cfg))
    motion = generate_motion(args.motion_seed, args.frames, cfg.joint_count)
    seq = render_sequence(char, motion, cfg.n_points, seed=cfg.seed, corresponded=args.corresponded)
    for i, cloud in enumerate(seq.clouds):
        fileio.write_ply(out / f"frame_{i:04d}.ply", cloud)
    fileio.write_ply(out / "mesh_tpose.ply", char.mesh_vertices, char.mesh_triangles)
    fileio.write_skeleton(out / "skeleton.txt", char.skeleton)
    fileio.write_motion(out / "motion.txt", seq.frames, fps=cfg.fps)
    print(f"export-ply: {len(seq.clouds)} frames written to {out}")
    return EXIT_OK


def cmd_sweep_context(args):
    """Train the retargeting stage at several temporal contexts and report
    the full metric set for each (the experiment design of the context
    study; desk-scale trends are informative, not asserted)."""
    cfg = _config_from_args(args)
    contexts = [int(t) for t in args.contexts.split(",")]
    ckpt_dir = Path(cfg.checkpoint_dir)
    skr_model = skr.load_model(_require(args.skr or ckpt_dir / "skr.ckpt", "skeleton regressor checkpoint"))
    skin_model = skin.load_model(_require(args.skin or ckpt_dir / "skin.ckpt", "skinning checkpoint"))
    out = _out_dir(Path(cfg.out_dir))

    dataset = smrm.build_smrm_dataset(
        range(cfg.n_characters),
        motions_per_character=cfg.motions_per_character,
        frames_per_motion=cfg.frames_per_motion,
        context=cfg.context,
        seed=cfg.seed,
        character_config=_character_config(cfg),
    )
    char_cfg = _character_config(cfg)
    source = generate_character(cfg.n_characters + 1, char_cfg)  # held out
    target = generate_character(cfg.n_characters + 2, char_cfg)
    motion = generate_motion(cfg.seed + 991, args.eval_frames, cfg.joint_count)

    rows = []
    for context in contexts:
        dataset.context = context
        result = smrm.train_smrm(
            dataset,
            config=_smrm_config(cfg),
            steps=cfg.smrm_steps,
            batch_size=cfg.smrm_batch,
            lr=cfg.learning_rate,
            lambda_rot=cfg.lambda_rot,
            lambda_smooth=cfg.lambda_smooth,
            seed=cfg.seed,
        )
        report = end_to_end_eval(
            skr_model, result.model, skin_model, source, target, motion, cfg
        )
        rows.append((context, report))
        print(f"context {context:3d}: " + "  ".join(
            f"{k} {v:.4f}" for k, v in report.values().items()
        ))

    with open(out / "context_sweep.csv", "w") as f:
        f.write("context," + ",".join(metrics.METRIC_NAMES) + "\n")
        for context, report in rows:
            vals = report.values()
            f.write(f"{context}," + ",".join(repr(vals[k]) for k in metrics.METRIC_NAMES) + "\n")
    print(f"sweep-context: table written to {out / 'context_sweep.csv'}")
    return EXIT_OK


def end_to_end_eval(skr_model, smrm_model, skin_model, source, target, motion, cfg: PipelineConfig):
    """Retarget a fresh-sampled source sequence onto a target character and
    score it against the ground-truth retargeting."""
    src_seq = render_sequence(source, motion, cfg.n_points, seed=cfg.seed + 5, corresponded=False)
    gt_seq = render_sequence(target, motion, cfg.n_points, seed=cfg.seed + 6, corresponded=True)

    target_skeleton = regress_skeleton(skr_model, gt_seq.tpose_cloud)
    weights = predict_skin_weights(skin_model, gt_seq.tpose_cloud, target_skeleton)
    state = init_state(smrm_model, target_skeleton)
    pred_clouds, pred_joints = [], []
    for cloud in src_seq.clouds:
        src_skel = regress_skeleton(skr_model, cloud)
        frame, state = retarget_skeletal(
            smrm_model, src_skel.joint_positions, src_skel.joint_positions[src_skel.root], src_skel, state
        )
        pred_clouds.append(linear_blend_skinning(gt_seq.tpose_cloud, weights, target_skeleton, frame).points)
        pred_joints.append(forward_kinematics(target_skeleton, frame))

    procrustes = None if cfg.procrustes == "none" else cfg.procrustes
    return metrics.evaluate_sequences(
        gt_seq.joints,
        np.stack(pred_joints),
        [c.points for c in gt_seq.clouds],
        pred_clouds,
        procrustes=procrustes,
        fps=cfg.fps,
    )


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="pcmr",
        description="Correspondence-free online motion retargeting for point-cloud sequences",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic retargeting scenario")
    p.add_argument("--source-character", type=int, default=100)
    p.add_argument("--target-character", type=int, default=200)
    p.add_argument("--motion-seed", type=int, default=300)
    p.add_argument("--frames", type=int, default=30)
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_data)

    for name, fn in (("train-skr", cmd_train_skr), ("train-smrm", cmd_train_smrm), ("train-skin", cmd_train_skin)):
        p = sub.add_parser(name, help=f"stage training: {name.split('-')[1]}")
        p.add_argument("--log-every", type=int, default=0)
        if name == "train-skin":
            p.add_argument("--use-skr-skeletons", action="store_true",
                           help="train against regressed instead of ground-truth skeletons")
        _add_config_flags(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("retarget", help="stream source frames onto a target body")
    p.add_argument("--source", required=True, help="directory of PLY frames, or '-' for paths on stdin")
    p.add_argument("--target-tpose", required=True)
    p.add_argument("--skr", default=None)
    p.add_argument("--smrm", default=None)
    p.add_argument("--skin", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_retarget)

    p = sub.add_parser("eval", help="score a retargeted sequence against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt-skeleton", required=True)
    p.add_argument("--pred-skeleton", required=True)
    p.add_argument("--gt-motion", required=True)
    p.add_argument("--pred-motion", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-ply", help="render a synthetic sequence to viewable PLY frames")
    p.add_argument("--character", type=int, default=0)
    p.add_argument("--motion-seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--corresponded", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_export_ply)

    p = sub.add_parser("sweep-context", help="temporal-context study: train and evaluate per context")
    p.add_argument("--contexts", default="5,10,15,30,60")
    p.add_argument("--eval-frames", type=int, default=30)
    p.add_argument("--skr", default=None)
    p.add_argument("--skin", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep_context)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, StageOrderError, FileNotFoundError, OSError) as exc:
        print(f"error (i/o): {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, NonFiniteError) as exc:
        print(f"error (numerical): {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error (config): {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
