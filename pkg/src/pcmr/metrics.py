"""Evaluation metrics for retargeted motion against ground truth.

Skeletal metrics (MPJPE, Acc) and surface metrics (MPVD, MDEL) with optional
per-frame Procrustes alignment of the prediction to the ground truth.  The
PA variants default to similarity alignment (scale included); rigid
alignment and sequence-level alignment are selectable.  Acc is reported in
meters per frame squared at the sequence's frame rate.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, knn_edges, procrustes_align

VALID_PROCRUSTES = (None, "rigid", "similarity")


def _as_track(seq):
    """(n, P, 3) float array from an array or a list of PointClouds."""
    if isinstance(seq, np.ndarray):
        arr = np.asarray(seq, dtype=np.float64)
    else:
        arr = np.stack([c.points if isinstance(c, PointCloud) else np.asarray(c) for c in seq])
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"sequence must be (n, P, 3), got {arr.shape}")
    return arr


def _check_pair(gt, pred):
    gt, pred = _as_track(gt), _as_track(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"ground truth {gt.shape} and prediction {pred.shape} differ")
    return gt, pred


def _aligned(gt, pred, procrustes, per_frame=True):
    if procrustes not in VALID_PROCRUSTES:
        raise ValueError(f"procrustes must be one of {VALID_PROCRUSTES}, got {procrustes!r}")
    if procrustes is None:
        return pred
    with_scale = procrustes == "similarity"
    if per_frame:
        out = np.empty_like(pred)
        for i in range(pred.shape[0]):
            out[i] = procrustes_align(pred[i], gt[i], with_scale=with_scale).apply(pred[i])
        return out
    flat_pred = pred.reshape(-1, 3)
    res = procrustes_align(flat_pred, gt.reshape(-1, 3), with_scale=with_scale)
    return res.apply(flat_pred).reshape(pred.shape)


def mpjpe(gt_joints, pred_joints, procrustes=None, per_frame=True):
    """Mean Euclidean joint distance over frames and joints (meters)."""
    gt, pred = _check_pair(gt_joints, pred_joints)
    pred = _aligned(gt, pred, procrustes, per_frame)
    per = np.linalg.norm(pred - gt, axis=-1).mean(axis=1)
    return float(per.mean()), per


def accel_error(gt_joints, pred_joints, procrustes=None, per_frame=True):
    """Mean norm of the difference of second finite differences (m/frame^2)."""
    gt, pred = _check_pair(gt_joints, pred_joints)
    if gt.shape[0] < 3:
        raise ValueError("acceleration error needs at least 3 frames")
    pred = _aligned(gt, pred, procrustes, per_frame)
    acc_gt = gt[2:] - 2.0 * gt[1:-1] + gt[:-2]
    acc_pred = pred[2:] - 2.0 * pred[1:-1] + pred[:-2]
    per = np.linalg.norm(acc_pred - acc_gt, axis=-1).mean(axis=1)
    return float(per.mean()), per


def mpvd(gt_clouds, pred_clouds, procrustes=None, per_frame=True):
    """Mean per-vertex distance over corresponded cloud sequences (meters)."""
    return mpjpe(gt_clouds, pred_clouds, procrustes=procrustes, per_frame=per_frame)


def mdel(gt_clouds, pred_clouds, k=6, per_frame_edges=True):
    """Mean absolute difference in edge length over the ground truth's k-NN
    edges (meters); intrinsic, so rigid motion of the prediction is free."""
    gt, pred = _check_pair(gt_clouds, pred_clouds)
    if gt.shape[1] <= k:
        raise ValueError(f"need more than {k} points per cloud, got {gt.shape[1]}")
    edges = None
    per = np.empty(gt.shape[0])
    for i in range(gt.shape[0]):
        if edges is None or per_frame_edges:
            edges = knn_edges(PointCloud(gt[i]), k)
        len_gt = np.linalg.norm(gt[i][edges[:, 0]] - gt[i][edges[:, 1]], axis=-1)
        len_pred = np.linalg.norm(pred[i][edges[:, 0]] - pred[i][edges[:, 1]], axis=-1)
        per[i] = np.abs(len_gt - len_pred).mean()
    return float(per.mean()), per


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

METRIC_NAMES = ("mpjpe", "pa_mpjpe", "acc", "pa_acc", "mpvd", "pa_mpvd", "mdel")


@dataclass
class EvalReport:
    mpjpe: float
    pa_mpjpe: float
    acc: float
    pa_acc: float
    mpvd: float
    pa_mpvd: float
    mdel: float
    frames: int
    fps: float
    config: str
    per_frame: dict = field(default_factory=dict)

    def values(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.config.encode()).hexdigest()[:12]

    def to_text(self) -> str:
        lines = [f"frames {self.frames}  fps {self.fps:g}  config {self.config}"]
        for name, value in self.values().items():
            lines.append(f"{name:>9s}  {value:.6f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        rows = ["metric,value,frames,config"]
        for name, value in self.values().items():
            rows.append(f"{name},{value!r},{self.frames},{self.config_hash}")
        return "\n".join(rows) + "\n"


def evaluate_sequences(
    gt_joints,
    pred_joints,
    gt_clouds=None,
    pred_clouds=None,
    procrustes="similarity",
    per_frame_alignment=True,
    per_frame_edges=True,
    knn=6,
    fps=30.0,
) -> EvalReport:
    """Full metric suite; surface metrics are skipped when clouds are None."""
    m, m_f = mpjpe(gt_joints, pred_joints)
    pm, pm_f = mpjpe(gt_joints, pred_joints, procrustes=procrustes, per_frame=per_frame_alignment)
    a, a_f = accel_error(gt_joints, pred_joints)
    pa, pa_f = accel_error(gt_joints, pred_joints, procrustes=procrustes, per_frame=per_frame_alignment)
    per_frame = {"mpjpe": m_f, "pa_mpjpe": pm_f, "acc": a_f, "pa_acc": pa_f}
    if gt_clouds is not None and pred_clouds is not None:
        v, v_f = mpvd(gt_clouds, pred_clouds)
        pv, pv_f = mpvd(gt_clouds, pred_clouds, procrustes=procrustes, per_frame=per_frame_alignment)
        e, e_f = mdel(gt_clouds, pred_clouds, k=knn, per_frame_edges=per_frame_edges)
        per_frame.update({"mpvd": v_f, "pa_mpvd": pv_f, "mdel": e_f})
    else:
        v = pv = e = float("nan")
    n = _as_track(gt_joints).shape[0]
    config = (
        f"procrustes={procrustes} per_frame_alignment={per_frame_alignment} "
        f"per_frame_edges={per_frame_edges} knn={knn} fps={fps:g}"
    )
    return EvalReport(
        mpjpe=m, pa_mpjpe=pm, acc=a, pa_acc=pa, mpvd=v, pa_mpvd=pv, mdel=e,
        frames=n, fps=fps, config=config, per_frame=per_frame,
    )
