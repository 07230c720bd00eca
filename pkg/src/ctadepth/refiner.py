"""Alternating depth/pose refinement with context-aware temporal attention.

Each stage runs n depth updates with all poses frozen, then n pose updates
per neighbor with the depth frozen. Cost maps are built at 1/4 resolution;
attention queries/keys come from context features plus the long-range
geometry embedding, values from temporal features extracted from the cost
map. Delta heads are zero-initialized so an untrained refiner is exactly
the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import DepthMap, Pose, average_cost, cost_map, downsample_depth
from .model import ModelConfig
from .nn import AttentionBlock, Conv, ConvGRUCell, Linear, ParamStore, conv_gru, cross_attention
from .tensor import Tensor

POSE_DELTA_SCALE = 0.01
FEATURE_STRIDE = 4


@dataclass
class RefineInputs:
    """Per-sample quantities that stay fixed through the refinement."""
    cam: object                 # full-resolution Camera
    f_r: object                 # fused reference feature [C,h,w] at 1/4
    f_is: list                  # fused neighbor features
    f_rc: object                # depth context feature
    f_ics: list                 # pose context features, one per neighbor
    lge: object                 # long-range geometry embedding (or None)

    @property
    def cam_feat(self):
        return self.cam.scaled(FEATURE_STRIDE)


@dataclass
class RefinementTrace:
    """Stage-end depth maps and poses (index 0 = after the first stage)."""
    depths: list = field(default_factory=list)
    poses: list = field(default_factory=list)   # per stage: list of Pose per neighbor

    def __len__(self):
        return len(self.depths)


class Refiner:
    def __init__(self, store: ParamStore, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        c = cfg.c_tmp
        self.temporal = [Conv(store, "refiner.temporal.0", 1, c // 2, k=3),
                         Conv(store, "refiner.temporal.1", c // 2, c, k=3)]
        self.depth_cta = AttentionBlock(store, "refiner.depth_cta", cfg.c_ctx, cfg.c_qk, c)
        self.pose_cta = AttentionBlock(store, "refiner.pose_cta", cfg.c_ctx, cfg.c_qk, c)
        self.depth_gru = ConvGRUCell(store, "refiner.depth_gru", c, c)
        self.pose_gru = ConvGRUCell(store, "refiner.pose_gru", c, c)
        self.depth_delta = Conv(store, "refiner.depth_delta", c, 1, k=3, zero=True)
        self.pose_delta_conv = Conv(store, "refiner.pose_delta.conv", c, c, k=3)
        self.pose_delta_fc = Linear(store, "refiner.pose_delta.fc", c, 6, zero=True)
        self.depth_hidden_init = Conv(store, "refiner.depth_h0", cfg.c_ctx, c, k=1)
        self.pose_hidden_init = Conv(store, "refiner.pose_h0", cfg.c_ctx, c, k=1)
        self.lge_phi = [Conv(store, "refiner.lge_phi.0", c, c, k=1),
                        Conv(store, "refiner.lge_phi.1", c, cfg.c_qk, k=3)]
        self.stats = {"lge_calls": 0, "depth_delta_calls": 0, "pose_delta_calls": 0}

    # -- shared pieces -----------------------------------------------------

    def temporal_features(self, cost_values):
        return self.temporal[1](T.relu(self.temporal[0](cost_values)))

    def lge_embed(self, f_r, long_range_feats, cam_feat, depth_q, poses):
        """Sum of per-frame geometry embeddings built from long-range cost maps.

        depth_q and poses are the initial estimates at feature resolution;
        the result is computed once per sample and reused by every CTA.
        """
        if len(long_range_feats) < 1:
            raise ValueError("lge_embed needs at least one long-range frame (N >= 2)")
        self.stats["lge_calls"] += 1
        total = None
        for f_j, pose_j in zip(long_range_feats, poses):
            cm = cost_map(f_r, f_j, cam_feat, depth_q, pose_j)
            ft = self.temporal_features(cm.values)
            emb = self.lge_phi[1](T.relu(self.lge_phi[0](ft)))
            total = emb if total is None else T.add(total, emb)
        return total

    def init_hidden(self, inputs):
        h_d = T.tanh(self.depth_hidden_init(inputs.f_rc))
        h_ps = [T.tanh(self.pose_hidden_init(f_ic)) for f_ic in inputs.f_ics]
        return h_d, h_ps

    # -- refinement steps --------------------------------------------------

    def depth_refine_step(self, h_d, depth, poses, inputs):
        """One depth update with every pose frozen; returns (depth', h_d')."""
        cfg = self.cfg
        d_q = downsample_depth(depth, FEATURE_STRIDE)
        maps = [cost_map(inputs.f_r, f_i, inputs.cam_feat, d_q, p.detached())
                for f_i, p in zip(inputs.f_is, poses)]
        ft = self.temporal_features(average_cost(maps).values)
        f_rd = cross_attention(self.depth_cta, inputs.f_rc, ft, inputs.lge)
        h_d = conv_gru(self.depth_gru, h_d, f_rd)
        self.stats["depth_delta_calls"] += 1
        delta = self.depth_delta(h_d)
        h, w = depth.shape
        delta = T.resize_bilinear(delta, (h, w))
        values = T.clamp(T.add(depth.values, delta), cfg.d_min, cfg.d_max)
        return DepthMap(values, depth.valid_mask), h_d

    def pose_refine_step(self, h_p, pose, depth, f_i, f_ic, inputs):
        """One pose update for a single neighbor with depth frozen."""
        d_q = downsample_depth(DepthMap(depth.values.detach(), depth.valid_mask),
                               FEATURE_STRIDE)
        cm = cost_map(inputs.f_r, f_i, inputs.cam_feat, d_q, pose)
        ft = self.temporal_features(cm.values)
        f_ip = cross_attention(self.pose_cta, f_ic, ft, inputs.lge)
        h_p = conv_gru(self.pose_gru, h_p, f_ip)
        self.stats["pose_delta_calls"] += 1
        pooled = T.global_avg_pool(T.relu(self.pose_delta_conv(h_p)))
        delta = T.mul(self.pose_delta_fc(pooled), POSE_DELTA_SCALE)
        return Pose(T.add(pose.twist, delta)).canonicalized(), h_p

    def refine(self, inputs, depth0, poses0, m=3, n=4):
        """Alternate m stages of n depth then n-per-neighbor pose updates."""
        if m < 1 or n < 1:
            raise ValueError(f"refine needs m, n >= 1, got m={m}, n={n}")
        depth = depth0
        poses = list(poses0)
        h_d, h_ps = self.init_hidden(inputs)
        trace = RefinementTrace()
        for _ in range(m):
            for _ in range(n):
                depth, h_d = self.depth_refine_step(h_d, depth, poses, inputs)
            for i, (f_i, f_ic) in enumerate(zip(inputs.f_is, inputs.f_ics)):
                for _ in range(n):
                    poses[i], h_ps[i] = self.pose_refine_step(
                        h_ps[i], poses[i], depth, f_i, f_ic, inputs)
            trace.depths.append(depth)
            trace.poses.append(list(poses))
        return trace
