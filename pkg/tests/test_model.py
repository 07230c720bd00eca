"""Feature extractor, initial depth/pose heads and context networks."""

import numpy as np
import pytest

from ctadepth import tensor as T
from ctadepth.model import Model, ModelConfig, parameter_count
from ctadepth.nn import ParamStore
from ctadepth.refiner import Refiner
from ctadepth.tensor import Tensor

rng = np.random.default_rng(21)


@pytest.fixture(scope="module")
def model():
    store = ParamStore(0)
    return store, Model(store)


def test_mae_pyramid_shapes(model):
    _, m = model
    pyr, fused = m.mae_forward(Tensor(rng.random((3, 64, 96))))
    assert [p.data.shape for p in pyr] == [(16, 32, 48), (32, 16, 24),
                                           (64, 8, 12), (96, 4, 6)]
    assert fused.data.shape == (32, 16, 24)


def test_mae_rejects_unaligned_size(model):
    _, m = model
    with pytest.raises(ValueError):
        m.mae_forward(Tensor(rng.random((3, 60, 90))))


def test_initial_depth_is_midpoint_at_zero_init(model):
    # the depth head is zero-initialized, so before training the prediction
    # is the constant softplus(0) * scale = (d_min + d_max) / 2 everywhere
    _, m = model
    _, fused = m.mae_forward(Tensor(rng.random((3, 64, 96))))
    depth = m.predict_depth(fused)
    mid = 0.5 * (m.cfg.d_min + m.cfg.d_max)
    assert depth.values.data.shape == (1, 64, 96)
    assert depth.values.data == pytest.approx(np.full((1, 64, 96), mid))
    assert depth.valid_mask.all()


def test_initial_pose_is_identity_at_zero_init(model):
    _, m = model
    _, f_r = m.mae_forward(Tensor(rng.random((3, 64, 96))))
    _, f_i = m.mae_forward(Tensor(rng.random((3, 64, 96))))
    pose = m.predict_pose(f_r, f_i)
    assert not pose.twist.data.any()


def test_depth_within_configured_range(model):
    _, m = model
    _, fused = m.mae_forward(Tensor(rng.random((3, 64, 96))))
    d = m.predict_depth(fused).values.data
    assert d.min() >= m.cfg.d_min and d.max() <= m.cfg.d_max


def test_pose_head_shared_between_neighbors(model):
    _, m = model
    img = Tensor(rng.random((3, 64, 96)))
    _, f_r = m.mae_forward(img)
    depth, poses = m.initial_predict(f_r, [f_r, f_r, f_r])
    assert len(poses) == 3
    base = poses[0].twist.data
    for p in poses[1:]:
        assert np.array_equal(p.twist.data, base)


def test_context_nets_quarter_resolution(model):
    _, m = model
    a = Tensor(rng.random((3, 64, 96)))
    b = Tensor(rng.random((3, 64, 96)))
    f_rc, f_ic = m.context_forward(a, b)
    assert f_rc.data.shape == (m.cfg.c_ctx, 16, 24)
    assert f_ic.data.shape == (m.cfg.c_ctx, 16, 24)


def test_context_pose_depends_on_both_images(model):
    _, m = model
    a = Tensor(rng.random((3, 64, 96)))
    b = Tensor(rng.random((3, 64, 96)))
    c = Tensor(rng.random((3, 64, 96)))
    _, f_ab = m.context_forward(a, b)
    _, f_ac = m.context_forward(a, c)
    assert not np.array_equal(f_ab.data, f_ac.data)


def test_parameter_budget():
    store = ParamStore(0)
    Model(store)
    Refiner(store)
    total = parameter_count(store)
    assert total < 2_000_000, f"parameter count {total} exceeds the budget"


def test_forward_deterministic(model):
    _, m = model
    img = Tensor(rng.random((3, 64, 96)))
    a = m.mae_forward(img)[1].data
    b = m.mae_forward(img)[1].data
    assert np.array_equal(a, b)


def test_custom_depth_range_respected():
    store = ParamStore(0)
    cfg = ModelConfig(d_min=1.0, d_max=4.0)
    m = Model(store, cfg)
    _, fused = m.mae_forward(Tensor(rng.random((3, 64, 96))))
    d = m.predict_depth(fused).values.data
    assert d == pytest.approx(np.full_like(d, 2.5))
