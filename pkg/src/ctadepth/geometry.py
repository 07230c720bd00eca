"""Pinhole camera model, SE(3) twist algebra, inverse warping and cost maps.

A pose is a 6-vector twist (axis-angle rotation, translation) kept as a
Tensor so pose updates stay differentiable; it is exponentiated to a 4x4
rigid transform when applied. The cost map is the per-pixel feature-space
L2 distance between reference features and the neighbor features sampled at
the reprojected location of each reference pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

Z_EPS = 1e-6


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside "
                             f"{self.width}x{self.height} image")

    def scaled(self, factor):
        """Intrinsics for a feature map at 1/factor resolution."""
        return Camera(self.fx / factor, self.fy / factor,
                      (self.cx + 0.5) / factor - 0.5, (self.cy + 0.5) / factor - 0.5,
                      self.width // factor, self.height // factor)

    def pixel_grid(self):
        """Array[2,H,W] of pixel-center coordinates (x, y)."""
        ys, xs = np.mgrid[0:self.height, 0:self.width].astype(float)
        return np.stack([xs, ys])


@dataclass
class DepthMap:
    values: Tensor            # [1,H,W], metric depth
    valid_mask: np.ndarray    # [H,W] bool

    @classmethod
    def from_array(cls, arr, valid=None):
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 2:
            arr = arr[None]
        if valid is None:
            valid = np.ones(arr.shape[1:], dtype=bool)
        return cls(Tensor(arr), valid)

    @property
    def shape(self):
        return self.values.data.shape[1:]


@dataclass
class CostMap:
    values: Tensor            # [1,H,W], >= 0; zero on invalid pixels
    valid_mask: np.ndarray    # [H,W] bool


class Pose:
    """Relative rigid transform parameterized by a 6-dim twist (omega, t)."""

    def __init__(self, twist):
        if isinstance(twist, Tensor):
            self.twist = twist
        else:
            twist = np.asarray(twist, dtype=float).reshape(6)
            self.twist = Tensor(twist)

    @classmethod
    def identity(cls):
        return cls(np.zeros(6))

    @classmethod
    def from_matrix(cls, matrix):
        return cls(se3_log(matrix))

    def matrix(self):
        return pose_exp(self.twist)

    def detached(self):
        return Pose(self.twist.detach())

    def canonicalized(self):
        """Wrap the rotation to the ||omega|| < pi representative."""
        w = self.twist.data[:3]
        theta = float(np.linalg.norm(w))
        if theta < np.pi:
            return self
        turns = np.round(theta / (2 * np.pi))
        target = theta - 2 * np.pi * turns
        if abs(target) >= np.pi:
            target -= np.sign(target) * 2 * np.pi
        factor = target / theta
        omega = T.mul(self.twist[0:3], factor)
        return Pose(T.concat([omega, self.twist[3:6]]))

    def __repr__(self):
        return f"Pose(twist={np.array2string(self.twist.data, precision=4)})"


def _scalars(vals):
    return T.concat([T.reshape(v if isinstance(v, Tensor) else Tensor(v), (1,))
                     for v in vals])


def pose_exp(twist):
    """SE(3) exponential of a 6-twist -> differentiable 4x4 matrix.

    Rotation by the Rodrigues formula; the translation component goes
    through the V matrix so that exp(-twist) is exactly the inverse
    transform of exp(twist).
    """
    twist = T.as_tensor(twist)
    omega = twist[0:3]
    rho = twist[3:6]
    zero = Tensor(0.0)
    w0, w1, w2 = omega[0], omega[1], omega[2]
    k = T.reshape(_scalars([zero, -w2, w1, w2, zero, -w0, -w1, w0, zero]), (3, 3))
    kk = T.matmul(k, k)
    theta_sq = T.tsum(T.mul(omega, omega))
    if theta_sq.data.item() < 1e-14:
        # Taylor series around zero keeps exp(0) exactly the identity
        a = 1.0 - theta_sq * (1.0 / 6.0)
        b = 0.5 - theta_sq * (1.0 / 24.0)
        c = 1.0 / 6.0 - theta_sq * (1.0 / 120.0)
    else:
        theta = T.sqrt(theta_sq)
        a = T.sin(theta) / theta
        b = (1.0 - T.cos(theta)) / theta_sq
        c = (1.0 - a) / theta_sq

    def mat(s0, sk, skk):
        out = Tensor(np.eye(3)) if s0 is None else T.mul(Tensor(np.eye(3)), s0)
        out = out + T.mul(T.expand(T.reshape(sk, (1, 1)), (3, 3)), k)
        return out + T.mul(T.expand(T.reshape(skk, (1, 1)), (3, 3)), kk)

    r = mat(None, a, b)
    v = mat(None, b, c)
    top = T.concat([r, T.matmul(v, T.reshape(rho, (3, 1)))], axis=1)
    bottom = Tensor(np.array([[0.0, 0.0, 0.0, 1.0]]))
    return T.concat([top, bottom], axis=0)


def se3_log(matrix):
    """Twist of a 4x4 rigid transform (numpy in, numpy out).

    Inverse of pose_exp for rotation angles below pi; used for ground-truth
    bookkeeping, so it is not differentiable.
    """
    m = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix, dtype=float)
    r = m[:3, :3]
    t = m[:3, 3]
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta > np.pi - 1e-3:
        raise ValueError(f"se3_log: rotation angle {theta:.4f} too close to pi")
    vee = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-7:
        omega = vee
        k = _skew(omega)
        v_inv = np.eye(3) - 0.5 * k + (1.0 / 12.0) * (k @ k)
    else:
        omega = vee * (theta / np.sin(theta))
        k = _skew(omega)
        coeff = (1.0 - theta * np.cos(theta / 2.0) / (2.0 * np.sin(theta / 2.0))) / theta ** 2
        v_inv = np.eye(3) - 0.5 * k + coeff * (k @ k)
    return np.concatenate([omega, v_inv @ t])


def _skew(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def pose_compose(a, b):
    """Composition of 4x4 transforms (apply b first, then a)."""
    return T.matmul(a, b)


def pose_inverse(m):
    """Inverse of a 4x4 rigid transform."""
    r = m[0:3, 0:3]
    t = m[0:3, 3:4]
    rt = T.transpose(r)
    top = T.concat([rt, T.neg(T.matmul(rt, t))], axis=1)
    bottom = Tensor(np.array([[0.0, 0.0, 0.0, 1.0]]))
    return T.concat([top, bottom], axis=0)


def project(cam, points):
    """Pinhole projection of points[3,H,W] to pixel coords[2,H,W].

    Returns (coords, front_mask); front_mask is False where Z <= Z_EPS and
    the projected coordinates there are computed against a unit depth.
    """
    z = points[2]
    front = points.data[2] > Z_EPS
    guard = Tensor(np.where(front, 0.0, 1.0))
    z_safe = T.add(T.mul(z, Tensor(front.astype(float))), guard)
    u = T.mul(points[0] / z_safe, cam.fx) + cam.cx
    v = T.mul(points[1] / z_safe, cam.fy) + cam.cy
    return T.stack([u, v]), front


def unproject(cam, depth):
    """Back-project a DepthMap to camera-space points[3,H,W]."""
    if np.any(depth.values.data[0][depth.valid_mask] <= 0):
        raise ValueError("unproject: nonpositive depth on a valid pixel")
    h, w = depth.shape
    grid = cam.pixel_grid()
    xdir = Tensor((grid[0] - cam.cx) / cam.fx)
    ydir = Tensor((grid[1] - cam.cy) / cam.fy)
    z = depth.values[0]
    return T.stack([T.mul(xdir, z), T.mul(ydir, z), z])


def warp_coords(cam, depth, pose_matrix):
    """Reproject every reference pixel through depth and pose.

    Returns (coords[2,H,W] in the neighbor image, front_mask[H,W]).
    """
    h, w = depth.shape
    points = unproject(cam, depth)
    flat = T.reshape(points, (3, h * w))
    r = pose_matrix[0:3, 0:3]
    t = pose_matrix[0:3, 3:4]
    moved = T.matmul(r, flat) + T.expand(t, (3, h * w))
    return project(cam, T.reshape(moved, (3, h, w)))


def cost_map(f_r, f_i, cam_feat, depth, pose):
    """Per-pixel feature-space L2 distance after inverse warping.

    f_r, f_i: Tensor[C,h,w] at feature resolution; depth at the same
    resolution with matching intrinsics. Differentiable wrt features, depth
    values and the pose twist.
    """
    if f_r.data.shape != f_i.data.shape:
        raise ValueError(f"cost_map: feature shapes differ, {f_r.data.shape} vs {f_i.data.shape}")
    h, w = f_r.data.shape[1:]
    if depth.shape != (h, w):
        raise ValueError(f"cost_map: depth {depth.shape} does not match features {(h, w)}")
    m = pose.matrix() if isinstance(pose, Pose) else pose
    coords, front = warp_coords(cam_feat, depth, m)
    warped, sample_valid = T.bilinear_sample(f_i, coords)
    diff = T.sub(warped, f_r)
    cost = T.l2_norm(diff, axis=0)
    valid = front & sample_valid & depth.valid_mask
    cost = T.mul(cost, Tensor(valid.astype(float)))
    return CostMap(T.reshape(cost, (1, h, w)), valid)


def average_cost(maps):
    """Per-pixel mean over the maps where valid; invalid only if all are."""
    if not maps:
        raise ValueError("average_cost of empty list")
    if len({m.values.data.shape for m in maps}) != 1:
        raise ValueError("average_cost: inconsistent shapes")
    count = np.sum([m.valid_mask for m in maps], axis=0).astype(float)
    valid = count > 0
    scale = Tensor((1.0 / np.maximum(count, 1.0))[None])
    total = maps[0].values
    for m in maps[1:]:
        total = T.add(total, m.values)
    return CostMap(T.mul(total, scale), valid)


def downsample_depth(depth, factor):
    """Nearest-neighbor depth downsample to 1/factor resolution."""
    values = T.resize_nearest(depth.values,
                              (depth.shape[0] // factor, depth.shape[1] // factor))
    h2, w2 = values.data.shape[1:]
    ys, xs = _nearest_indices(depth.shape, (h2, w2))
    return DepthMap(values, depth.valid_mask[ys[:, None], xs[None, :]])


def _nearest_indices(src, dst):
    sy, sx = src[0] / dst[0], src[1] / dst[1]
    ys = np.clip(np.round((np.arange(dst[0]) + 0.5) * sy - 0.5), 0, src[0] - 1).astype(np.intp)
    xs = np.clip(np.round((np.arange(dst[1]) + 0.5) * sx - 0.5), 0, src[1] - 1).astype(np.intp)
    return ys, xs


def _geometry_gradcheck_cases(rng):
    from .gradcheck import gradcheck

    def make_inputs():
        cam = Camera(7.0, 7.0, 2.5, 2.5, 6, 6)
        f_r = Tensor(rng.standard_normal((4, 6, 6)), requires_grad=True)
        f_i = Tensor(rng.standard_normal((4, 6, 6)), requires_grad=True)
        d = Tensor(rng.uniform(2.0, 4.0, (1, 6, 6)), requires_grad=True)
        tw = Tensor(np.concatenate([rng.uniform(-0.03, 0.03, 3), rng.uniform(-0.1, 0.1, 3)]),
                    requires_grad=True)
        return cam, [f_r, f_i, d, tw]

    def cost_fn(cam):
        def f(f_r, f_i, d, tw):
            cm = cost_map(f_r, f_i, cam, DepthMap(d, np.ones((6, 6), bool)), Pose(tw))
            return T.tsum(cm.values)
        return f

    def run_cost():
        cam, inputs = make_inputs()
        return gradcheck(cost_fn(cam), inputs, tol=1e-4)

    yield "cost_map wrt features/depth/twist", run_cost

    def run_exp():
        tw = Tensor(np.concatenate([rng.uniform(-1.5, 1.5, 3), rng.uniform(-1, 1, 3)]),
                    requires_grad=True)
        probe = Tensor(rng.standard_normal((4, 4)))
        return gradcheck(lambda t: T.tsum(T.mul(pose_exp(t), probe)), [tw], tol=1e-5)

    yield "pose_exp", run_exp
