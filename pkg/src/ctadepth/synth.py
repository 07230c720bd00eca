"""Deterministic synthetic dynamic-scene renderer and dataset IO.

Scenes are a handful of textured planes and moving quads rendered by
per-pixel ray intersection with an analytic z-buffer, so the ground-truth
depth, relative poses and dynamic-object masks are exact by construction.
Textures come from seeded integer-hash value noise, which keeps two renders
of the same spec bitwise identical.

Datasets on disk are binary PPM images, PFM depth/mask maps and a plain
text manifest with per-frame camera twists and intrinsics.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import Camera, DepthMap, Pose, pose_exp, se3_log

_NOISE_OCTAVES = 4


# ---------------------------------------------------------------------------
# scene description


@dataclass(frozen=True)
class PlaneSpec:
    """Infinite textured plane given by a point and outward normal."""
    point: tuple
    normal: tuple
    tex_scale: float = 1.0


@dataclass(frozen=True)
class QuadSpec:
    """Bounded textured quad; edge vectors are half-extents from the center.

    A nonzero velocity (scene units per frame) makes the quad a dynamic
    object: its pixels go into the sample's dynamic mask.
    """
    center: tuple
    edge_u: tuple
    edge_v: tuple
    velocity: tuple = (0.0, 0.0, 0.0)
    tex_scale: float = 1.0

    @property
    def moving(self):
        return any(v != 0.0 for v in self.velocity)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int
    width: int
    cam: Camera
    planes: tuple
    quads: tuple
    cam_twists: tuple          # per-frame camera increments, length n_frames - 1
    n_frames: int
    d_min: float = 0.5
    d_max: float = 20.0
    neighbor_offsets: tuple = (-1, 1, 2)

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError(f"scene needs at least 2 frames, got {self.n_frames}")
        if len(self.cam_twists) != self.n_frames - 1:
            raise ValueError(f"expected {self.n_frames - 1} camera twists, "
                             f"got {len(self.cam_twists)}")
        if not self.planes and not self.quads:
            raise ValueError("scene has no surfaces")
        if 0 in self.neighbor_offsets:
            raise ValueError("neighbor offset 0 is the reference frame itself")


@dataclass
class Frame:
    index: int
    image: np.ndarray          # [H,W,3] uint8
    depth: np.ndarray          # [H,W] float64, camera-space z
    dyn_mask: np.ndarray       # [H,W] bool, moving-quad pixels
    w2c: np.ndarray            # [4,4] world-to-camera transform


@dataclass
class Sample:
    """One training/eval item: a reference frame plus its neighbors."""
    index: int
    image_r: T.Tensor          # [3,H,W] in [0,1]
    images_n: list             # neighbor images, same layout
    gt_depth: DepthMap
    gt_poses: list             # Pose per neighbor (reference -> neighbor)
    dyn_mask: np.ndarray       # [H,W] bool
    neighbor_indices: list = field(default_factory=list)


def default_scene(seed=0, height=64, width=96, n_frames=12):
    """The fixed smoke-test scene: tilted ground, backdrop, two quads.

    One quad drifts sideways (the dynamic object), the other is static; the
    camera moves forward with a slight lateral component.
    """
    cam = Camera(fx=width * 0.9, fy=width * 0.9,
                 cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                 width=width, height=height)
    planes = (
        PlaneSpec(point=(0.0, 1.6, 0.0), normal=(0.0, -1.0, 0.12), tex_scale=0.7),
        PlaneSpec(point=(0.0, 0.0, 14.0), normal=(0.0, 0.0, -1.0), tex_scale=0.35),
    )
    quads = (
        QuadSpec(center=(-0.9, 0.1, 5.0), edge_u=(0.8, 0.0, 0.0),
                 edge_v=(0.0, 0.8, 0.0), velocity=(0.1, 0.0, 0.05), tex_scale=1.4),
        QuadSpec(center=(1.3, -0.4, 8.0), edge_u=(1.0, 0.0, 0.2),
                 edge_v=(0.0, 1.0, 0.0), tex_scale=1.1),
    )
    step = np.array([0.0015, 0.0, 0.0, 0.015, 0.0, -0.12])
    twists = tuple(tuple(step) for _ in range(n_frames - 1))
    return SceneSpec(seed=seed, height=height, width=width, cam=cam,
                     planes=planes, quads=quads, cam_twists=twists,
                     n_frames=n_frames)


# ---------------------------------------------------------------------------
# procedural texture


def _hash01(ix, iy, key):
    """Uniform [0,1) lattice values from integer coordinates, seeded by key."""
    h = ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
    h ^= iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
    h ^= np.uint64(key & 0xFFFFFFFFFFFFFFFF)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(29)
    h *= np.uint64(0xC4CEB9FE1A85EC53)
    h ^= h >> np.uint64(32)
    return h.astype(np.float64) / 2.0 ** 64


def value_noise(u, v, key, octaves=_NOISE_OCTAVES):
    """Multi-octave bilinear value noise in [0,1], seeded and deterministic."""
    out = np.zeros_like(u, dtype=np.float64)
    amp_total = 0.0
    for o in range(octaves):
        freq, amp = 2.0 ** o, 0.5 ** o
        uu, vv = u * freq, v * freq
        iu, iv = np.floor(uu), np.floor(vv)
        fu, fv = uu - iu, vv - iv
        # smoothstep fade keeps the gradient continuous across lattice cells
        fu = fu * fu * (3.0 - 2.0 * fu)
        fv = fv * fv * (3.0 - 2.0 * fv)
        iu = iu.astype(np.int64)
        iv = iv.astype(np.int64)
        k = key + 7919 * o
        v00 = _hash01(iu, iv, k)
        v10 = _hash01(iu + 1, iv, k)
        v01 = _hash01(iu, iv + 1, k)
        v11 = _hash01(iu + 1, iv + 1, k)
        top = v00 + (v10 - v00) * fu
        bot = v01 + (v11 - v01) * fu
        out += amp * (top + (bot - top) * fv)
        amp_total += amp
    return out / amp_total


def _surface_color(a, b, key, tex_scale):
    """RGB texture from plane-local coordinates, one noise field per channel."""
    chans = [value_noise(a * tex_scale, b * tex_scale, key + 104729 * c)
             for c in range(3)]
    return np.stack(chans, axis=-1)


# ---------------------------------------------------------------------------
# rendering


def _plane_frame(normal):
    """Two in-plane axes for texture coordinates, chosen deterministically."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


def _camera_trajectory(spec):
    """World-to-camera transform per frame; frame 0 is the world frame."""
    mats = [np.eye(4)]
    with T.no_grad():
        for tw in spec.cam_twists:
            inc = pose_exp(np.asarray(tw, dtype=float)).data
            mats.append(inc @ mats[-1])
    return mats


def render_frame(spec, index, w2c):
    """Rasterize one frame by ray casting against every surface."""
    cam = spec.cam
    grid = cam.pixel_grid()
    dirs_cam = np.stack([(grid[0] - cam.cx) / cam.fx,
                         (grid[1] - cam.cy) / cam.fy,
                         np.ones_like(grid[0])])            # [3,H,W]
    c2w = np.linalg.inv(w2c)
    r_c2w, origin = c2w[:3, :3], c2w[:3, 3]
    dirs_w = np.einsum("ij,jhw->ihw", r_c2w, dirs_cam)

    z_buf = np.full((spec.height, spec.width), np.inf)
    color = np.zeros((spec.height, spec.width, 3))
    dyn = np.zeros((spec.height, spec.width), dtype=bool)

    def splat(z, hit_mask, col, moving):
        closer = hit_mask & (z < z_buf)
        z_buf[closer] = z[closer]
        color[closer] = col[closer]
        dyn[closer] = moving

    for si, plane in enumerate(spec.planes):
        p = np.asarray(plane.point, dtype=float)
        n = np.asarray(plane.normal, dtype=float)
        denom = np.einsum("i,ihw->hw", n, dirs_w)
        hit = np.abs(denom) > 1e-9
        s = np.where(hit, np.dot(n, p - origin) / np.where(hit, denom, 1.0), np.inf)
        hit &= s > 0
        pts = origin[:, None, None] + s * dirs_w
        au, av = _plane_frame(plane.normal)
        a = np.einsum("i,ihw->hw", au, pts - p[:, None, None])
        b = np.einsum("i,ihw->hw", av, pts - p[:, None, None])
        col = _surface_color(a, b, spec.seed + 31 * si, plane.tex_scale)
        splat(np.where(hit, s, np.inf), hit, col, moving=False)

    for si, quad in enumerate(spec.quads):
        center = np.asarray(quad.center, dtype=float) + \
            index * np.asarray(quad.velocity, dtype=float)
        eu = np.asarray(quad.edge_u, dtype=float)
        ev = np.asarray(quad.edge_v, dtype=float)
        n = np.cross(eu, ev)
        n /= np.linalg.norm(n)
        denom = np.einsum("i,ihw->hw", n, dirs_w)
        hit = np.abs(denom) > 1e-9
        s = np.where(hit, np.dot(n, center - origin) / np.where(hit, denom, 1.0), np.inf)
        hit &= s > 0
        rel = origin[:, None, None] + s * dirs_w - center[:, None, None]
        a = np.einsum("i,ihw->hw", eu, rel) / np.dot(eu, eu)
        b = np.einsum("i,ihw->hw", ev, rel) / np.dot(ev, ev)
        hit &= (np.abs(a) <= 1.0) & (np.abs(b) <= 1.0)
        col = _surface_color(a, b, spec.seed + 57 + 31 * si, quad.tex_scale)
        splat(np.where(hit, s, np.inf), hit, col, moving=quad.moving)

    covered = np.isfinite(z_buf)
    if not covered.all():
        # backstop so the depth map stays dense; default scenes fully cover
        z_buf[~covered] = spec.d_max
    depth = np.clip(z_buf, spec.d_min, spec.d_max)
    image = np.clip(np.round(color * 255.0), 0, 255).astype(np.uint8)
    return Frame(index=index, image=image, depth=depth, dyn_mask=dyn, w2c=w2c)


def render_frames(spec):
    traj = _camera_trajectory(spec)
    frames = [render_frame(spec, i, traj[i]) for i in range(spec.n_frames)]
    for qi, quad in enumerate(spec.quads):
        seen = any(f.dyn_mask.any() for f in frames) if quad.moving else True
        if quad.moving and not seen:
            warnings.warn(f"quad {qi} never visible in any frame; degenerate scene")
    return frames


def _image_tensor(image_u8):
    return T.Tensor(image_u8.astype(np.float64).transpose(2, 0, 1) / 255.0)


def _relative_pose(frames, r, i):
    return Pose(se3_log(frames[i].w2c @ np.linalg.inv(frames[r].w2c)))


def render(spec):
    """Render the scene and assemble samples around every eligible frame."""
    frames = render_frames(spec)
    offsets = spec.neighbor_offsets
    samples = []
    for r in range(spec.n_frames):
        idxs = [r + o for o in offsets]
        if any(i < 0 or i >= spec.n_frames for i in idxs):
            continue
        samples.append(Sample(
            index=r,
            image_r=_image_tensor(frames[r].image),
            images_n=[_image_tensor(frames[i].image) for i in idxs],
            gt_depth=DepthMap.from_array(frames[r].depth),
            gt_poses=[_relative_pose(frames, r, i) for i in idxs],
            dyn_mask=frames[r].dyn_mask,
            neighbor_indices=idxs))
    if not samples:
        raise ValueError("no frame has all neighbor offsets in range")
    return samples


def make_splits(samples, train_frac, seed):
    """Deterministic disjoint train/eval split over samples."""
    if len(samples) < 2:
        raise ValueError(f"need at least 2 samples to split, got {len(samples)}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(train_frac * len(samples)))
    n_train = min(max(n_train, 1), len(samples) - 1)
    train = [samples[i] for i in sorted(order[:n_train])]
    evals = [samples[i] for i in sorted(order[n_train:])]
    return train, evals


# ---------------------------------------------------------------------------
# file formats


def write_ppm(path, image_u8):
    """Binary PPM, maxval 255."""
    img = np.asarray(image_u8)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_ppm expects uint8 [H,W,3], got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(data[m.end():], dtype=np.uint8, count=h * w * 3)
    return pixels.reshape(h, w, 3).copy()


def write_pfm(path, values):
    """Grayscale PFM, little-endian (negative scale), rows bottom to top."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"write_pfm expects a 2-d array, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"(Pf)\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a grayscale PFM")
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data[m.end():], dtype=dtype, count=h * w).reshape(h, w)
    return arr[::-1].astype(np.float32)


def write_manifest(path, frames, cam):
    """Per-frame camera twist plus intrinsics, space-separated text."""
    lines = ["# frame_index w0 w1 w2 t0 t1 t2 fx fy cx cy"]
    for f in frames:
        tw = se3_log(f.w2c)
        fields = [str(f.index)] + [repr(float(v)) for v in tw] + \
            [repr(float(v)) for v in (cam.fx, cam.fy, cam.cx, cam.cy)]
        lines.append(" ".join(fields))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path):
    """Returns (list of (frame_index, twist array), Camera-intrinsic tuple)."""
    entries = []
    intrinsics = None
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 11:
                raise ValueError(f"{path}: expected 11 fields, got {len(parts)}: {line!r}")
            idx = int(parts[0])
            tw = np.array([float(v) for v in parts[1:7]])
            intr = tuple(float(v) for v in parts[7:11])
            if intrinsics is None:
                intrinsics = intr
            elif intr != intrinsics:
                raise ValueError(f"{path}: intrinsics change at frame {idx}")
            entries.append((idx, tw))
    if not entries:
        raise ValueError(f"{path}: empty manifest")
    return entries, intrinsics


def save_scene_dir(out_dir, spec, frames=None):
    """Write a rendered scene as PPM/PFM files plus the manifest."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    if frames is None:
        frames = render_frames(spec)
    for f in frames:
        write_ppm(os.path.join(out_dir, f"frame_{f.index:04d}.ppm"), f.image)
        write_pfm(os.path.join(out_dir, f"depth_{f.index:04d}.pfm"), f.depth)
        write_pfm(os.path.join(out_dir, f"mask_{f.index:04d}.pfm"),
                  f.dyn_mask.astype(np.float32))
    write_manifest(os.path.join(out_dir, "manifest.txt"), frames, spec.cam)
    return frames


def load_scene_dir(data_dir, neighbor_offsets=(-1, 1, 2)):
    """Rebuild samples from a directory written by save_scene_dir."""
    import os
    entries, intr = read_manifest(os.path.join(data_dir, "manifest.txt"))
    frames = []
    for idx, tw in entries:
        image = read_ppm(os.path.join(data_dir, f"frame_{idx:04d}.ppm"))
        depth = read_pfm(os.path.join(data_dir, f"depth_{idx:04d}.pfm"))
        mask_path = os.path.join(data_dir, f"mask_{idx:04d}.pfm")
        mask = read_pfm(mask_path) > 0.5 if os.path.exists(mask_path) \
            else np.zeros(depth.shape, dtype=bool)
        with T.no_grad():
            w2c = pose_exp(tw).data
        frames.append(Frame(index=idx, image=image,
                            depth=depth.astype(np.float64),
                            dyn_mask=mask, w2c=w2c))
    h, w = frames[0].image.shape[:2]
    cam = Camera(fx=intr[0], fy=intr[1], cx=intr[2], cy=intr[3], width=w, height=h)
    by_index = {f.index: k for k, f in enumerate(frames)}
    samples = []
    for f in frames:
        idxs = [f.index + o for o in neighbor_offsets]
        if any(i not in by_index for i in idxs):
            continue
        ks = [by_index[i] for i in idxs]
        samples.append(Sample(
            index=f.index,
            image_r=_image_tensor(f.image),
            images_n=[_image_tensor(frames[k].image) for k in ks],
            gt_depth=DepthMap.from_array(f.depth),
            gt_poses=[Pose(se3_log(frames[k].w2c @ np.linalg.inv(f.w2c))) for k in ks],
            dyn_mask=f.dyn_mask,
            neighbor_indices=idxs))
    if not samples:
        raise ValueError(f"{data_dir}: no frame has all neighbors present")
    return samples, cam
