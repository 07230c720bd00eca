"""Synthetic renderer: analytic scenes, determinism, masks and file IO."""

import numpy as np
import pytest

from ctadepth import synth
from ctadepth import tensor as T
from ctadepth.geometry import Camera, warp_coords

rng = np.random.default_rng(17)

CAM = Camera(86.4, 86.4, 47.5, 31.5, 96, 64)


def _flat_plane_spec(depth=5.0, twists=((0.0,) * 6,) * 2, seed=3):
    return synth.SceneSpec(
        seed=seed, height=64, width=96, cam=CAM,
        planes=(synth.PlaneSpec((0.0, 0.0, depth), (0.0, 0.0, -1.0)),),
        quads=(), cam_twists=tuple(twists), n_frames=len(twists) + 1)


def test_static_flat_plane_constant_depth_identity_poses():
    frames = synth.render_frames(_flat_plane_spec(depth=5.0))
    for f in frames:
        assert f.depth == pytest.approx(np.full((64, 96), 5.0))
        assert np.array_equal(f.w2c, np.eye(4))
        assert not f.dyn_mask.any()


def test_pure_z_translation_reduces_depth_by_step():
    tw = (0.0, 0.0, 0.0, 0.0, 0.0, -0.25)
    frames = synth.render_frames(_flat_plane_spec(depth=5.0, twists=(tw, tw)))
    for i, f in enumerate(frames):
        assert f.depth == pytest.approx(np.full((64, 96), 5.0 - 0.25 * i))


def test_render_deterministic():
    a = synth.render_frames(synth.default_scene(seed=4))
    b = synth.render_frames(synth.default_scene(seed=4))
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.image, fb.image)
        assert np.array_equal(fa.depth, fb.depth)
        assert np.array_equal(fa.dyn_mask, fb.dyn_mask)


def test_different_seed_changes_textures():
    a = synth.render_frames(synth.default_scene(seed=0))[0]
    b = synth.render_frames(synth.default_scene(seed=1))[0]
    assert not np.array_equal(a.image, b.image)


def test_default_scene_depth_within_range():
    spec = synth.default_scene()
    for f in synth.render_frames(spec):
        assert f.depth.min() >= spec.d_min
        assert f.depth.max() <= spec.d_max


def test_dynamic_mask_marks_moving_quad_only():
    spec = synth.default_scene()
    frames = synth.render_frames(spec)
    assert frames[0].dyn_mask.any()
    static_spec = synth.SceneSpec(
        seed=spec.seed, height=spec.height, width=spec.width, cam=spec.cam,
        planes=spec.planes,
        quads=tuple(synth.QuadSpec(q.center, q.edge_u, q.edge_v,
                                   velocity=(0.0, 0.0, 0.0)) for q in spec.quads),
        cam_twists=spec.cam_twists, n_frames=spec.n_frames)
    for f in synth.render_frames(static_spec):
        assert not f.dyn_mask.any()


def test_gt_warp_reproduces_static_frame():
    # smooth single-plane scene: reprojecting the next frame through the gt
    # depth and pose must reproduce the reference up to interpolation error
    tw = (0.0, 0.002, 0.0, 0.01, 0.004, -0.05)
    spec = synth.SceneSpec(
        seed=5, height=64, width=96, cam=CAM,
        planes=(synth.PlaneSpec((0, 0, 5.0), (0.05, 0.08, -1.0), tex_scale=0.3),),
        quads=(), cam_twists=(tw, tw, tw), n_frames=4)
    s = synth.render(spec)[0]
    with T.no_grad():
        coords, front = warp_coords(CAM, s.gt_depth, s.gt_poses[1].matrix())
        warped, valid = T.bilinear_sample(s.images_n[1], coords)
    mask = front & valid
    assert mask.sum() > 3000
    err = np.abs(warped.data - s.image_r.data).max(axis=0)[mask]
    assert err.max() * 255.0 < 2.0


def test_gt_depth_and_pose_mutually_consistent():
    # the transformed Z of every pixel equals the neighbor's depth at the
    # landing point; inverse depth is linear over a plane, so interpolating
    # it is exact
    tw = (0.0, 0.002, 0.0, 0.01, 0.004, -0.05)
    spec = synth.SceneSpec(
        seed=5, height=64, width=96, cam=CAM,
        planes=(synth.PlaneSpec((0, 0, 5.0), (0.05, 0.08, -1.0), tex_scale=0.3),),
        quads=(), cam_twists=(tw, tw, tw), n_frames=4)
    frames = synth.render_frames(spec)
    s = synth.render(spec)[0]
    d = s.gt_depth.values.data[0]
    with T.no_grad():
        m = s.gt_poses[1].matrix().data
    ys, xs = np.mgrid[0:64, 0:96].astype(float)
    pts = np.stack([(xs - CAM.cx) / CAM.fx * d, (ys - CAM.cy) / CAM.fy * d,
                    d, np.ones_like(d)])
    moved = np.einsum("ij,jhw->ihw", m, pts)
    u = moved[0] / moved[2] * CAM.fx + CAM.cx
    v = moved[1] / moved[2] * CAM.fy + CAM.cy
    inb = (u >= 0) & (u <= 94) & (v >= 0) & (v <= 62)
    inv_d = 1.0 / frames[s.neighbor_indices[1]].depth
    x0, y0 = np.floor(u).astype(int).clip(0, 94), np.floor(v).astype(int).clip(0, 62)
    fu, fv = u - x0, v - y0
    interp = (inv_d[y0, x0] * (1 - fu) * (1 - fv) + inv_d[y0, x0 + 1] * fu * (1 - fv)
              + inv_d[y0 + 1, x0] * (1 - fu) * fv + inv_d[y0 + 1, x0 + 1] * fu * fv)
    resid = np.abs(moved[2] - 1.0 / interp)[inb]
    assert resid.max() < 1e-6


def test_dynamic_pixels_break_static_warp():
    spec = synth.default_scene(seed=2)
    frames = synth.render_frames(spec)
    s = synth.render(spec)[1]
    with T.no_grad():
        coords, front = warp_coords(CAM, s.gt_depth, s.gt_poses[1].matrix())
        warped, valid = T.bilinear_sample(s.images_n[1], coords)
    err = np.abs(warped.data - s.image_r.data).mean(axis=0)
    base = front & valid
    nb_dyn = frames[s.neighbor_indices[1]].dyn_mask
    xi = np.clip(np.round(coords.data[0]).astype(int), 0, 95)
    yi = np.clip(np.round(coords.data[1]).astype(int), 0, 63)
    static = base & ~s.dyn_mask & ~nb_dyn[yi, xi]
    dyn = base & s.dyn_mask
    assert dyn.sum() > 50
    assert err[dyn].mean() > err[static].mean()


def test_samples_have_expected_neighbor_structure():
    spec = synth.default_scene()
    samples = synth.render(spec)
    for s in samples:
        assert len(s.images_n) == 3
        assert s.neighbor_indices == [s.index - 1, s.index + 1, s.index + 2]
        assert s.image_r.data.shape == (3, 64, 96)
        assert (s.gt_depth.values.data > 0).all()


def test_make_splits_disjoint_and_deterministic():
    spec = synth.default_scene()
    samples = synth.render(spec)
    tr1, ev1 = synth.make_splits(samples, 0.8, seed=9)
    tr2, ev2 = synth.make_splits(samples, 0.8, seed=9)
    assert [s.index for s in tr1] == [s.index for s in tr2]
    assert [s.index for s in ev1] == [s.index for s in ev2]
    train_idx = {s.index for s in tr1}
    eval_idx = {s.index for s in ev1}
    assert not train_idx & eval_idx
    assert train_idx | eval_idx == {s.index for s in samples}
    with pytest.raises(ValueError):
        synth.make_splits(samples[:1], 0.8, seed=0)


def test_ppm_roundtrip_bitwise(tmp_path):
    img = rng.integers(0, 256, (64, 96, 3), dtype=np.uint8)
    path = tmp_path / "img.ppm"
    synth.write_ppm(path, img)
    assert np.array_equal(synth.read_ppm(path), img)
    # twice through gives identical bytes
    synth.write_ppm(tmp_path / "img2.ppm", synth.read_ppm(path))
    assert (tmp_path / "img.ppm").read_bytes() == (tmp_path / "img2.ppm").read_bytes()


def test_pfm_roundtrip_bitwise(tmp_path):
    arr = rng.random((64, 96)).astype(np.float32)
    path = tmp_path / "d.pfm"
    synth.write_pfm(path, arr)
    assert np.array_equal(synth.read_pfm(path), arr)


def test_pfm_header_layout(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "d.pfm"
    synth.write_pfm(path, arr)
    blob = path.read_bytes()
    assert blob.startswith(b"Pf\n3 2\n-1.0\n")
    # rows are stored bottom-to-top, little endian
    first_row = np.frombuffer(blob, dtype="<f4", count=3, offset=len(b"Pf\n3 2\n-1.0\n"))
    assert np.array_equal(first_row, arr[1])


def test_manifest_roundtrip(tmp_path):
    spec = synth.default_scene(n_frames=4)
    frames = synth.render_frames(spec)
    path = tmp_path / "manifest.txt"
    synth.write_manifest(path, frames, spec.cam)
    entries, intr = synth.read_manifest(path)
    assert [e[0] for e in entries] == [0, 1, 2, 3]
    assert intr == (spec.cam.fx, spec.cam.fy, spec.cam.cx, spec.cam.cy)
    from ctadepth.geometry import se3_log
    for (idx, tw), f in zip(entries, frames):
        assert tw == pytest.approx(se3_log(f.w2c), abs=1e-12)


def test_scene_dir_roundtrip(tmp_path):
    spec = synth.default_scene(n_frames=6)
    out = tmp_path / "scene"
    synth.save_scene_dir(out, spec)
    samples, cam = synth.load_scene_dir(out)
    direct = synth.render(spec)
    assert len(samples) == len(direct)
    for got, want in zip(samples, direct):
        assert got.index == want.index
        assert np.array_equal(got.image_r.data, want.image_r.data)
        assert np.array_equal(got.dyn_mask, want.dyn_mask)
        # depth goes through float32 on disk
        assert got.gt_depth.values.data == pytest.approx(
            want.gt_depth.values.data, abs=1e-5)
        for pg, pw in zip(got.gt_poses, want.gt_poses):
            assert pg.twist.data == pytest.approx(pw.twist.data, abs=1e-9)
    assert (cam.fx, cam.cx) == (spec.cam.fx, spec.cam.cx)


def test_invalid_scene_specs_rejected():
    with pytest.raises(ValueError):
        synth.SceneSpec(seed=0, height=64, width=96, cam=CAM, planes=(),
                        quads=(), cam_twists=((0.0,) * 6,), n_frames=2)
    with pytest.raises(ValueError):
        _flat_plane_spec(twists=((0.0,) * 6,) * 5).__class__(
            seed=0, height=64, width=96, cam=CAM,
            planes=(synth.PlaneSpec((0, 0, 5.0), (0, 0, -1.0)),),
            quads=(), cam_twists=((0.0,) * 6,), n_frames=5)


def test_value_noise_deterministic_and_bounded():
    u = rng.random((32, 32)) * 10
    v = rng.random((32, 32)) * 10
    a = synth.value_noise(u, v, key=12)
    b = synth.value_noise(u, v, key=12)
    c = synth.value_noise(u, v, key=13)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.min() >= 0.0 and a.max() <= 1.0
