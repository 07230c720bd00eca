"""Initial-prediction network: multi-scale encoder with PPM and cross-scale
attention fusion, depth and shared pose heads, and the depth/pose context
nets.

Everything runs at desk scale: a 4-stage plain conv encoder (strides 2)
instead of a pretrained backbone, with the fused matching feature produced
at 1/4 input resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import DepthMap, Pose
from .nn import AttentionBlock, Conv, Linear, PPMBlock, ParamStore, conv_gru, cross_attention, ppm
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (16, 32, 64, 96)
    c_ctx: int = 24      # context feature channels
    c_qk: int = 24       # attention query/key channels (also LGE channels)
    c_tmp: int = 24      # temporal feature / attention value channels
    d_min: float = 0.5
    d_max: float = 20.0

    @property
    def prior_scale(self):
        # zero-init depth head output softplus(0) lands at the depth midpoint
        return 0.5 * (self.d_min + self.d_max) / math.log(2.0)


class Model:
    """MAE feature extractor plus initial depth/pose heads and context nets."""

    def __init__(self, store: ParamStore, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        w1, w2, w3, w4 = cfg.widths
        self.enc = []
        cin = 3
        for i, cout in enumerate(cfg.widths):
            self.enc.append((Conv(store, f"enc{i}.a", cin, cout, k=3, stride=2),
                             Conv(store, f"enc{i}.b", cout, cout, k=3)))
            cin = cout
        # the deepest level is 4x6 at the 64x96 desk resolution, so the
        # largest pyramid bin is capped at 4
        self.ppm = PPMBlock(store, "ppm", w4, w4, bins=(1, 2, 3, 4))
        # deepest-to-shallowest fusion; each block queries with that level's
        # encoder feature and attends over the running fused map
        self.attn4 = AttentionBlock(store, "xscale4", w4, cfg.c_qk, w4)
        self.attn3 = AttentionBlock(store, "xscale3", w3, cfg.c_qk, w3)
        self.attn2 = AttentionBlock(store, "xscale2", w2, cfg.c_qk, w2)
        self.attn1 = AttentionBlock(store, "xscale1", w1, cfg.c_qk, w2)
        self.up4 = Conv(store, "up4", w4, w3 * 4, k=1)
        self.up3 = Conv(store, "up3", w3, w2 * 4, k=1)

        self.depth_head = [Conv(store, "depth_head.0", w2, w2, k=3),
                           Conv(store, "depth_head.1", w2, 1, k=3, zero=True)]
        self.pose_head_convs = [Conv(store, "pose_head.0", 2 * w2, w2, k=3),
                                Conv(store, "pose_head.1", w2, w2, k=3)]
        self.pose_head_fc = Linear(store, "pose_head.fc", w2, 6, zero=True)

        self.ctx_depth = _ContextNet(store, "ctx_depth", 3, cfg.c_ctx)
        self.ctx_pose = _ContextNet(store, "ctx_pose", 6, cfg.c_ctx)

    # -- forward passes ----------------------------------------------------

    def mae_forward(self, image):
        """Return the 4-level pyramid and the fused matching feature at 1/4.

        image: Tensor[3,H,W] with H, W divisible by 16.
        """
        h, w = image.data.shape[1:]
        if h % 16 or w % 16:
            raise ValueError(f"image size {h}x{w} must be divisible by 16")
        pyramid = []
        x = image
        for ca, cb in self.enc:
            x = T.relu(cb(T.relu(ca(x))))
            pyramid.append(x)
        f1, f2, f3, f4 = pyramid
        fused = cross_attention(self.attn4, f4, ppm(self.ppm, f4))
        fused = T.pixel_shuffle(self.up4(fused), 2)
        fused = cross_attention(self.attn3, f3, fused)
        fused = T.pixel_shuffle(self.up3(fused), 2)
        fused = cross_attention(self.attn2, f2, fused)
        f1_pooled = T.adaptive_avg_pool(f1, fused.data.shape[1:])
        fused = cross_attention(self.attn1, f1_pooled, fused)
        return pyramid, fused

    def predict_depth(self, fused):
        """Initial depth from the fused reference feature, at full resolution."""
        cfg = self.cfg
        x = self.depth_head[1](T.relu(self.depth_head[0](fused)))
        d = T.mul(T.softplus(x), cfg.prior_scale)
        h, w = fused.data.shape[1:]
        d = T.resize_bilinear(d, (h * 4, w * 4))
        d = T.clamp(d, cfg.d_min, cfg.d_max)
        return DepthMap(d, np.ones(d.data.shape[1:], dtype=bool))

    def predict_pose(self, fused_r, fused_i):
        """Initial relative pose for one neighbor; head parameters are shared."""
        x = T.concat([fused_r, fused_i], axis=0)
        for conv in self.pose_head_convs:
            x = T.relu(conv(x))
        return Pose(self.pose_head_fc(T.global_avg_pool(x)))

    def initial_predict(self, fused_r, fused_neighbors):
        depth = self.predict_depth(fused_r)
        poses = [self.predict_pose(fused_r, f_i) for f_i in fused_neighbors]
        return depth, poses

    def context_forward(self, image_r, image_i):
        """Depth context from the reference; pose context from the pair."""
        f_rc = self.ctx_depth(image_r)
        f_ic = self.ctx_pose(T.concat([image_r, image_i], axis=0))
        return f_rc, f_ic


class _ContextNet:
    """Two stride-2 convs and a 1x1 projection down to 1/4 resolution."""

    def __init__(self, store, name, cin, cout):
        self.convs = [Conv(store, f"{name}.0", cin, cout // 2, k=3, stride=2),
                      Conv(store, f"{name}.1", cout // 2, cout, k=3, stride=2)]
        self.proj = Conv(store, f"{name}.proj", cout, cout, k=1)

    def __call__(self, x):
        for conv in self.convs:
            x = T.relu(conv(x))
        return self.proj(x)


def parameter_count(store):
    return sum(p.data.size for p in store.params.values())
