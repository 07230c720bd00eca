"""Supervised losses over refinement traces and standard depth metrics.

The stage losses are discounted toward the final stage (weight 1.0 on the
last stage). Pixel norms are means over valid pixels so loss magnitudes do
not scale with resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import DepthMap, Pose, warp_coords
from .tensor import Tensor

DEFAULT_GAMMA = 0.85
LOG_CLAMP_MIN = 1e-3


@dataclass
class LossReport:
    depth_loss: float
    pose_loss: float
    total: float
    depth_stages: list
    pose_stages: list


@dataclass
class MetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    pixel_count: int
    cap: float
    median_scaled: bool

    def to_line(self):
        """Tab-separated values in standard benchmark column order."""
        vals = [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log,
                self.delta1, self.delta2, self.delta3]
        return "\t".join(f"{v:.6f}" for v in vals)


def stage_weights(m, gamma=DEFAULT_GAMMA):
    """Discount weights gamma^(m-s) for stages s = 1..m (last stage = 1)."""
    return [gamma ** (m - s) for s in range(1, m + 1)]


def _masked_mean(values, mask):
    count = int(mask.sum())
    if count == 0:
        raise ValueError("loss over an empty valid mask")
    weighted = T.mul(values, Tensor(mask.astype(float)))
    return T.mul(T.tsum(weighted), 1.0 / count)


def depth_loss(trace, gt: DepthMap, gamma=DEFAULT_GAMMA):
    """Discounted mean absolute depth error over the stage-end predictions."""
    m = len(trace.depths)
    total = None
    for w, d in zip(stage_weights(m, gamma), trace.depths):
        diff = T.absolute(T.sub(d.values, gt.values))
        mask = d.valid_mask & gt.valid_mask
        term = T.mul(_masked_mean(diff, mask[None]), w)
        total = term if total is None else T.add(total, term)
    return total


def pose_loss(trace, gt_depth: DepthMap, gt_poses, cam, gamma=DEFAULT_GAMMA):
    """Discounted reprojection deviation between estimated and true poses.

    Pixels are back-projected with the ground-truth depth and reprojected
    under both pose hypotheses; the per-pixel deviation is |du| + |dv|,
    averaged over pixels in front of the camera under both transforms.
    """
    m = len(trace.poses)
    gt_const = DepthMap(gt_depth.values.detach(), gt_depth.valid_mask)
    total = None
    for w, poses_s in zip(stage_weights(m, gamma), trace.poses):
        for pose_est, pose_gt in zip(poses_s, gt_poses):
            coords_est, front_est = warp_coords(cam, gt_const, pose_est.matrix())
            with T.no_grad():
                coords_gt, front_gt = warp_coords(cam, gt_const, pose_gt.matrix())
            dev = T.tsum(T.absolute(T.sub(coords_est, coords_gt.detach())), axis=0)
            mask = front_est & front_gt & gt_depth.valid_mask
            term = T.mul(_masked_mean(dev, mask), w)
            total = term if total is None else T.add(total, term)
    return total


def total_loss(depth_term, pose_term):
    return T.add(depth_term, pose_term)


def loss_report(trace, gt_depth, gt_poses, cam, gamma=DEFAULT_GAMMA):
    """Scalar losses plus the per-stage breakdown, as plain floats."""
    m = len(trace.depths)
    weights = stage_weights(m, gamma)
    d_stages = []
    for w, d in zip(weights, trace.depths):
        mask = d.valid_mask & gt_depth.valid_mask
        diff = np.abs(d.values.data - gt_depth.values.data)[0]
        d_stages.append(w * float(diff[mask].mean()))
    p_stages = []
    gt_const = DepthMap(gt_depth.values.detach(), gt_depth.valid_mask)
    with T.no_grad():
        for w, poses_s in zip(weights, trace.poses):
            acc = 0.0
            for pose_est, pose_gt in zip(poses_s, gt_poses):
                ce, fe = warp_coords(cam, gt_const, pose_est.matrix())
                cg, fg = warp_coords(cam, gt_const, pose_gt.matrix())
                dev = np.abs(ce.data - cg.data).sum(axis=0)
                mask = fe & fg & gt_depth.valid_mask
                acc += w * float(dev[mask].mean())
            p_stages.append(acc)
    d_total = float(np.sum(d_stages))
    p_total = float(np.sum(p_stages))
    return LossReport(d_total, p_total, d_total + p_total, d_stages, p_stages)


def eval_metrics(pred: DepthMap, gt: DepthMap, cap=80.0, median_scaling=True,
                 region=None):
    """Benchmark depth metrics over pixels with 0 < gt <= cap.

    region, when given, further restricts evaluation to a boolean pixel mask
    (used for the dynamic-object probe).
    """
    if pred.shape != gt.shape:
        raise ValueError(f"eval_metrics: shape mismatch {pred.shape} vs {gt.shape}")
    d_hat = gt.values.data[0]
    d = pred.values.data[0]
    valid = gt.valid_mask & pred.valid_mask & (d_hat > 0) & (d_hat <= cap)
    if region is not None:
        valid = valid & region
    if not valid.any():
        raise ValueError("eval_metrics: no valid pixels")
    d = d[valid]
    d_hat = d_hat[valid]
    if median_scaling:
        d = d * (np.median(d_hat) / np.median(d))
    abs_rel = float(np.mean(np.abs(d - d_hat) / d_hat))
    sq_rel = float(np.mean((d - d_hat) ** 2 / d_hat))
    rmse = float(np.sqrt(np.mean((d - d_hat) ** 2)))
    d_log = np.clip(d, LOG_CLAMP_MIN, cap)
    rmse_log = float(np.sqrt(np.mean((np.log(d_log) - np.log(d_hat)) ** 2)))
    ratio = np.maximum(d / d_hat, d_hat / d)
    deltas = [float(np.mean(ratio < 1.25 ** k)) for k in (1, 2, 3)]
    return MetricReport(abs_rel, sq_rel, rmse, rmse_log, *deltas,
                        pixel_count=int(valid.sum()), cap=cap,
                        median_scaled=median_scaling)


def _objective_gradcheck_cases(rng):
    from .gradcheck import gradcheck
    from .geometry import Camera
    from .refiner import RefinementTrace

    def depth_case():
        gt = DepthMap.from_array(rng.uniform(1, 5, (4, 4)))
        preds = [Tensor(rng.uniform(1, 5, (1, 4, 4)), requires_grad=True) for _ in range(3)]

        def f(*ds):
            trace = RefinementTrace(
                depths=[DepthMap(d, np.ones((4, 4), bool)) for d in ds])
            return depth_loss(trace, gt)

        return gradcheck(f, preds, tol=1e-5)

    yield "depth_loss", depth_case

    def pose_case():
        cam = Camera(8.0, 8.0, 2.5, 2.5, 6, 6)
        gt = DepthMap.from_array(rng.uniform(2, 5, (6, 6)))
        gt_pose = Pose(np.concatenate([rng.uniform(-0.05, 0.05, 3),
                                       rng.uniform(-0.2, 0.2, 3)]))
        tw = Tensor(np.concatenate([rng.uniform(-0.05, 0.05, 3),
                                    rng.uniform(-0.2, 0.2, 3)]), requires_grad=True)

        def f(tw):
            trace = RefinementTrace(depths=[gt], poses=[[Pose(tw)]])
            return pose_loss(trace, gt, [gt_pose], cam)

        return gradcheck(f, [tw], tol=1e-4)

    yield "pose_loss wrt twist", pose_case
