"""Alternating depth/pose refinement and the long-range embedding."""

import numpy as np
import pytest

from ctadepth import tensor as T
from ctadepth.geometry import Camera, DepthMap, Pose, downsample_depth
from ctadepth.model import Model, ModelConfig
from ctadepth.nn import ParamStore
from ctadepth.refiner import (FEATURE_STRIDE, POSE_DELTA_SCALE, RefineInputs,
                              Refiner)
from ctadepth.tensor import Tensor

rng = np.random.default_rng(31)

CAM = Camera(80.0, 80.0, 47.5, 31.5, 96, 64)


def _setup(seed=0):
    store = ParamStore(seed)
    model = Model(store)
    refiner = Refiner(store)
    return store, model, refiner


def _inputs(model, refiner, images=None, n_neighbors=3):
    if images is None:
        images = [Tensor(rng.random((3, 64, 96))) for _ in range(n_neighbors + 1)]
    f_r = model.mae_forward(images[0])[1]
    f_is = [model.mae_forward(im)[1] for im in images[1:]]
    depth0, poses0 = model.initial_predict(f_r, f_is)
    f_rc = model.ctx_depth(images[0])
    f_ics = [model.ctx_pose(T.concat([images[0], im], axis=0)) for im in images[1:]]
    d_q = downsample_depth(depth0, FEATURE_STRIDE)
    lge = refiner.lge_embed(f_r, f_is[1:], CAM.scaled(FEATURE_STRIDE), d_q,
                            [p.detached() for p in poses0[1:]])
    return RefineInputs(CAM, f_r, f_is, f_rc, f_ics, lge), depth0, poses0


def test_zero_init_refine_is_identity():
    _, model, refiner = _setup()
    inputs, depth0, poses0 = _inputs(model, refiner)
    trace = refiner.refine(inputs, depth0, poses0, m=3, n=4)
    assert len(trace.depths) == 3
    for d in trace.depths:
        assert np.array_equal(d.values.data, depth0.values.data)
    for stage_poses in trace.poses:
        for p, p0 in zip(stage_poses, poses0):
            assert np.array_equal(p.twist.data, p0.twist.data)


def test_lge_computed_once_regardless_of_iterations():
    _, model, refiner = _setup()
    inputs, depth0, poses0 = _inputs(model, refiner)
    assert refiner.stats["lge_calls"] == 1
    refiner.refine(inputs, depth0, poses0, m=3, n=4)
    assert refiner.stats["lge_calls"] == 1
    assert refiner.stats["depth_delta_calls"] == 12     # m * n
    assert refiner.stats["pose_delta_calls"] == 36      # m * n * neighbors


def test_lge_additive_over_frames():
    _, model, refiner = _setup()
    images = [Tensor(rng.random((3, 64, 96))) for _ in range(4)]
    f_r = model.mae_forward(images[0])[1]
    f_js = [model.mae_forward(im)[1] for im in images[1:]]
    depth_q = downsample_depth(
        DepthMap.from_array(np.full((64, 96), 8.0)), FEATURE_STRIDE)
    cam_feat = CAM.scaled(FEATURE_STRIDE)
    poses = [Pose(np.concatenate([rng.uniform(-0.02, 0.02, 3),
                                  rng.uniform(-0.1, 0.1, 3)])) for _ in range(3)]
    joint = refiner.lge_embed(f_r, f_js, cam_feat, depth_q, poses).data
    parts = [refiner.lge_embed(f_r, [f], cam_feat, depth_q, [p]).data
             for f, p in zip(f_js, poses)]
    assert joint == pytest.approx(sum(parts), abs=1e-12)


def test_lge_requires_long_range_frame():
    _, model, refiner = _setup()
    f_r = model.mae_forward(Tensor(rng.random((3, 64, 96))))[1]
    depth_q = downsample_depth(
        DepthMap.from_array(np.full((64, 96), 8.0)), FEATURE_STRIDE)
    with pytest.raises(ValueError):
        refiner.lge_embed(f_r, [], CAM.scaled(FEATURE_STRIDE), depth_q, [])


def test_refine_rejects_bad_iteration_counts():
    _, model, refiner = _setup()
    inputs, depth0, poses0 = _inputs(model, refiner)
    with pytest.raises(ValueError):
        refiner.refine(inputs, depth0, poses0, m=0, n=4)
    with pytest.raises(ValueError):
        refiner.refine(inputs, depth0, poses0, m=3, n=0)


def test_refined_depth_stays_in_range():
    store, model, refiner = _setup()
    # nudge the delta head away from zero so updates actually move depth
    store.params["refiner.depth_delta.w"].data[:] = \
        rng.standard_normal(store.params["refiner.depth_delta.w"].data.shape) * 0.5
    inputs, depth0, poses0 = _inputs(model, refiner)
    trace = refiner.refine(inputs, depth0, poses0, m=2, n=2)
    cfg = refiner.cfg
    for d in trace.depths:
        assert d.values.data.min() >= cfg.d_min - 1e-12
        assert d.values.data.max() <= cfg.d_max + 1e-12
    assert not np.array_equal(trace.depths[-1].values.data, depth0.values.data)


def test_pose_update_scale_bounded():
    store, model, refiner = _setup()
    fc = store.params["refiner.pose_delta.fc.w"]
    fc.data[:] = rng.standard_normal(fc.data.shape)
    inputs, depth0, poses0 = _inputs(model, refiner)
    trace = refiner.refine(inputs, depth0, poses0, m=1, n=1)
    for p, p0 in zip(trace.poses[0], poses0):
        step = np.abs(p.twist.data - p0.twist.data).max()
        assert 0 < step  # the head moved the pose
        # |delta| <= scale * |fc output|; pooled features are bounded by 1
        # only loosely, so just check the step is small
        assert step < 50 * POSE_DELTA_SCALE


def test_gradients_reach_initial_depth_through_refinement():
    store, model, refiner = _setup()
    inputs, depth0, poses0 = _inputs(model, refiner)
    trace = refiner.refine(inputs, depth0, poses0, m=1, n=1)
    loss = T.tmean(trace.depths[-1].values)
    loss.backward()
    # the final 1x1 head is zero-initialized, so the first layer to receive
    # a nonzero gradient is its own weight
    head_w = store.params["depth_head.1.w"]
    assert head_w.grad is not None and np.abs(head_w.grad).sum() > 0


def test_hidden_state_persists_across_stages():
    # with a non-zero delta head, later stages start from the previous
    # hidden state, so stage outputs differ from re-running stage one
    store, model, refiner = _setup()
    store.params["refiner.depth_delta.w"].data[:] = 0.1
    inputs, depth0, poses0 = _inputs(model, refiner)
    trace2 = refiner.refine(inputs, depth0, poses0, m=2, n=1)
    trace1 = refiner.refine(inputs, depth0, poses0, m=1, n=1)
    assert not np.array_equal(trace2.depths[1].values.data,
                              trace1.depths[0].values.data)
