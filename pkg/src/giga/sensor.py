"""Depth rendering by sphere tracing plus the multiplicative/additive noise model."""

import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from . import quat
from .scene import RigidTransform, sdf_eval

HIT_EPS = 1e-4
MAX_STEPS = 256
DEPTH_FLOOR = 1e-4


@dataclass(frozen=True, eq=False)
class PinholeCamera:
    """Intrinsics in pixels; extrinsic maps camera frame to world.

    Camera frame follows the usual computer-vision convention: x right,
    y down, z along the optical axis. Pixel (row v, col u) has its center
    at (u + 0.5, v + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: RigidTransform
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def ray_directions(self):
        """World-frame unit ray directions, (H, W, 3), plus axial cosines."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        uu, vv = np.meshgrid(u, v, indexing="xy")
        d_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
        d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
        d_world = d_cam @ self.extrinsic.matrix.T
        axial = d_cam[..., 2].copy()  # cos between ray and optical axis
        return d_world, axial

    def to_json_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "quat": [float(x) for x in self.extrinsic.rotation],
            "translation": [float(x) for x in self.extrinsic.translation],
        }

    @classmethod
    def from_json_dict(cls, d):
        ext = RigidTransform(np.array(d["quat"]), np.array(d["translation"]))
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], ext, d["width"], d["height"])


@dataclass(eq=False)
class DepthImage:
    values: np.ndarray  # (H, W) meters; 0 where invalid
    valid: np.ndarray   # (H, W) bool
    clamp_events: int = 0


@dataclass(frozen=True)
class NoiseParams:
    gamma_k: float = 1000.0
    gamma_theta: float = 0.001
    sigma: float = 0.005
    bandwidth: float = float(np.sqrt(2.0))

    def __post_init__(self):
        if self.gamma_k <= 0 or self.gamma_theta <= 0 or self.bandwidth <= 0:
            raise ValueError("gamma and kernel parameters must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def camera_on_sphere(l, r, theta, phi, width=120, height=120, fov_deg=60.0):
    """Camera at spherical (r, polar theta, azimuth phi) about the workspace
    center, looking at the center, up chosen as world +z projected off the
    optical axis (the camera never sits at the pole here)."""
    if l <= 0:
        raise ValueError("workspace size must be positive")
    center = np.full(3, l / 2.0)
    pos = center + r * np.array([
        np.sin(theta) * np.cos(phi),
        np.sin(theta) * np.sin(phi),
        np.cos(theta),
    ])
    z_axis = center - pos
    z_axis /= np.linalg.norm(z_axis)
    up = np.array([0.0, 0.0, 1.0])
    up_proj = up - np.dot(up, z_axis) * z_axis
    nrm = np.linalg.norm(up_proj)
    if nrm < 1e-12:
        up_proj = np.array([1.0, 0.0, 0.0])
    else:
        up_proj /= nrm
    y_axis = -up_proj
    x_axis = np.cross(y_axis, z_axis)
    rot = quat.from_matrix(np.stack([x_axis, y_axis, z_axis], axis=1))
    fy = (height / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    return PinholeCamera(fy, fy, width / 2.0, height / 2.0,
                         RigidTransform(rot, pos), width, height)


def place_camera(l, width=120, height=120, fov_deg=60.0):
    """The single fixed view: r = 2l, polar pi/3, azimuth 0."""
    return camera_on_sphere(l, 2.0 * l, np.pi / 3.0, 0.0, width, height, fov_deg)


def render_depth(scene, cam):
    """Sphere-trace every pixel; depth is distance along the optical axis.

    A ray misses when it leaves a workspace bound enlarged by l/2 on every
    side or exhausts the step budget; missed pixels are flagged invalid.
    """
    dirs, axial = cam.ray_directions()
    origin = cam.extrinsic.translation
    h, w = cam.height, cam.width
    d_flat = dirs.reshape(-1, 3)
    ax_flat = axial.reshape(-1)

    l = scene.workspace_size
    lo, hi = -0.5 * l, 1.5 * l
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / d_flat
        t2 = (hi - origin) / d_flat
    t_near = np.nanmax(np.minimum(t1, t2), axis=1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=1)
    t = np.maximum(t_near, 0.0)
    alive = t_far > t

    depth = np.zeros(d_flat.shape[0])
    hit = np.zeros(d_flat.shape[0], dtype=bool)
    for _ in range(MAX_STEPS):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        p = origin + t[idx, None] * d_flat[idx]
        d = sdf_eval(scene, p)
        new_hit = d < HIT_EPS
        hit_idx = idx[new_hit]
        hit[hit_idx] = True
        depth[hit_idx] = t[hit_idx] * ax_flat[hit_idx]
        alive[hit_idx] = False
        go = idx[~new_hit]
        t[go] += d[~new_hit]
        alive[go] &= t[go] <= t_far[go]
    return DepthImage(depth.reshape(h, w), hit.reshape(h, w))


def apply_noise(img, params, seed, alpha_override=None):
    """y = alpha * yhat + eps on valid pixels.

    One alpha ~ Gamma(k, theta) per image; eps is white Gaussian noise
    smoothed by a unit-mass truncated Gaussian kernel (radius 5, separable),
    generated in row-major pixel order for seed reproducibility. Outputs are
    clamped at DEPTH_FLOOR and clamp events counted.
    """
    rng = np.random.default_rng(seed)
    alpha = rng.gamma(params.gamma_k, params.gamma_theta)
    if alpha_override is not None:
        alpha = alpha_override
    white = rng.normal(0.0, 1.0, size=img.values.shape)
    if params.sigma == 0.0:
        eps = np.zeros_like(img.values)
    else:
        eps = params.sigma * _smooth(white, params.bandwidth)
    out = img.values.copy()
    out[img.valid] = alpha * out[img.valid] + eps[img.valid]
    below = img.valid & (out < DEPTH_FLOOR)
    out[below] = DEPTH_FLOOR
    return DepthImage(out, img.valid.copy(), clamp_events=int(below.sum()))


def gaussian_kernel1d(bandwidth, radius=5):
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / bandwidth) ** 2)
    return k / k.sum()


def _smooth(field, bandwidth):
    k = gaussian_kernel1d(bandwidth)
    out = convolve1d(field, k, axis=0, mode="reflect")
    return convolve1d(out, k, axis=1, mode="reflect")


def back_project(cam, img):
    """World points for all valid pixels. Returns (points (n,3), (rows, cols))."""
    vs, us = np.nonzero(img.valid)
    z = img.values[vs, us]
    x = (us + 0.5 - cam.cx) / cam.fx * z
    y = (vs + 0.5 - cam.cy) / cam.fy * z
    p_cam = np.stack([x, y, z], axis=1)
    return cam.extrinsic.local_to_world(p_cam), (vs, us)


def save_depth(path_base, img, cam, seed):
    """Flat little-endian float32 raster (invalid pixels 0) + JSON sidecar."""
    arr = np.where(img.valid, img.values, 0.0).astype("<f4")
    with open(str(path_base) + ".bin", "wb") as f:
        f.write(arr.tobytes(order="C"))
    sidecar = {
        "width": cam.width, "height": cam.height,
        "intrinsics": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy},
        "extrinsic": {"quat": [float(x) for x in cam.extrinsic.rotation],
                      "translation": [float(x) for x in cam.extrinsic.translation]},
        "seed": seed,
    }
    with open(str(path_base) + ".json", "w") as f:
        json.dump(sidecar, f, sort_keys=True)


def load_depth(path_base):
    with open(str(path_base) + ".json") as f:
        meta = json.load(f)
    raw = np.fromfile(str(path_base) + ".bin", dtype="<f4")
    vals = raw.reshape(meta["height"], meta["width"]).astype(float)
    ext = RigidTransform(np.array(meta["extrinsic"]["quat"]),
                         np.array(meta["extrinsic"]["translation"]))
    intr = meta["intrinsics"]
    cam = PinholeCamera(intr["fx"], intr["fy"], intr["cx"], intr["cy"],
                        ext, meta["width"], meta["height"])
    return DepthImage(vals, vals > 0.0), cam, meta["seed"]
