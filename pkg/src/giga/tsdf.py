"""Projective TSDF fusion of depth images into the N^3 grid fed to the encoder."""

import json
from dataclasses import dataclass

import numpy as np


class ConfigMismatch(ValueError):
    """Camera intrinsics disagree with the image raster."""


class OutOfBounds(ValueError):
    """Query point lies outside the grid volume."""


@dataclass(eq=False)
class TsdfGrid:
    """Truncated signed distance grid over the workspace cube.

    values are unitless in [-1, 1] (signed distance over tau); weight 0
    marks a never-observed voxel. Origin is the workspace corner.
    """

    resolution: int
    workspace_size: float
    values: np.ndarray
    weights: np.ndarray

    @classmethod
    def empty(cls, resolution=40, workspace_size=0.30):
        n = resolution
        return cls(n, workspace_size, np.zeros((n, n, n)), np.zeros((n, n, n)))

    @property
    def voxel_size(self):
        return self.workspace_size / self.resolution

    @property
    def tau(self):
        return 4.0 * self.voxel_size

    def voxel_centers(self):
        """(N^3, 3) world coordinates, x-fastest order."""
        n = self.resolution
        idx = np.arange(n)
        zz, yy, xx = np.meshgrid(idx, idx, idx, indexing="ij")
        ijk = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)
        return (ijk + 0.5) * self.voxel_size

    def index_grid(self):
        """values reshaped to (N, N, N) with axes (x, y, z)."""
        n = self.resolution
        return self.values.reshape(n, n, n) if self.values.ndim == 1 else self.values


def integrate_depth(grid, img, cam):
    """Fuse one depth image into the grid (weighted running average).

    Per voxel center: project into the image; when the hit pixel is valid
    and the voxel is not more than tau behind the surface, merge
    clamp(d / tau, -1, 1) where d = pixel depth - voxel camera depth.
    """
    if img.values.shape != (cam.height, cam.width):
        raise ConfigMismatch(f"image {img.values.shape} vs camera "
                             f"{(cam.height, cam.width)}")
    n = grid.resolution
    centers = grid.voxel_centers()  # z-major raveling handled below
    p_cam = cam.extrinsic.world_to_local(centers)
    z = p_cam[:, 2]
    in_front = z > 1e-9
    u = np.full(len(z), -1.0)
    v = np.full(len(z), -1.0)
    u[in_front] = p_cam[in_front, 0] / z[in_front] * cam.fx + cam.cx
    v[in_front] = p_cam[in_front, 1] / z[in_front] * cam.fy + cam.cy
    ui = np.floor(u).astype(int)
    vi = np.floor(v).astype(int)
    inside = in_front & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
    ui_c, vi_c = np.clip(ui, 0, cam.width - 1), np.clip(vi, 0, cam.height - 1)
    pix_valid = img.valid[vi_c, ui_c] & inside
    d = img.values[vi_c, ui_c] - z
    update = pix_valid & (d > -grid.tau)

    tsdf = np.clip(d / grid.tau, -1.0, 1.0)
    # voxel_centers is x-fastest; values array is indexed [x, y, z], whose
    # C-order ravel is z-fastest, so scatter through an explicit re-layout
    # (copies, so the input grid is never mutated)
    vals = np.array(grid.values.transpose(2, 1, 0)).reshape(-1)
    wts = np.array(grid.weights.transpose(2, 1, 0)).reshape(-1)
    w_old = wts[update]
    vals[update] = (vals[update] * w_old + tsdf[update]) / (w_old + 1.0)
    wts[update] = w_old + 1.0
    new_vals = np.ascontiguousarray(vals.reshape(n, n, n).transpose(2, 1, 0))
    new_wts = np.ascontiguousarray(wts.reshape(n, n, n).transpose(2, 1, 0))
    return TsdfGrid(n, grid.workspace_size, new_vals, new_wts)


def fuse(scene_img_cam_pairs, resolution=40, workspace_size=0.30):
    grid = TsdfGrid.empty(resolution, workspace_size)
    for img, cam in scene_img_cam_pairs:
        grid = integrate_depth(grid, img, cam)
    return grid


def sample_trilinear(grid, p):
    """Trilinear interpolation of grid values at world point(s) p."""
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = p[None] if single else p
    n = grid.resolution
    if np.any(pts < 0.0) or np.any(pts > grid.workspace_size):
        raise OutOfBounds("query outside the workspace volume")
    g = pts / grid.voxel_size - 0.5
    i0 = np.floor(g).astype(int)
    frac = g - i0
    i0c = np.clip(i0, 0, n - 1)
    i1c = np.clip(i0 + 1, 0, n - 1)
    # clamp the fraction too so border queries extend the edge value
    frac = np.where(i0 < 0, 0.0, frac)
    frac = np.where(i0 + 1 > n - 1, 1.0, frac)
    out = np.zeros(len(pts))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix = i1c[:, 0] if dx else i0c[:, 0]
                iy = i1c[:, 1] if dy else i0c[:, 1]
                iz = i1c[:, 2] if dz else i0c[:, 2]
                wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
                wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                out += grid.values[ix, iy, iz] * wx * wy * wz
    return out[0] if single else out


def save_grid(path_base, grid):
    """Little-endian float32 in x-fastest order + JSON header."""
    flat = grid.values.transpose(2, 1, 0).reshape(-1).astype("<f4")
    with open(str(path_base) + ".bin", "wb") as f:
        f.write(flat.tobytes())
    header = {
        "N": grid.resolution,
        "voxel_size": grid.voxel_size,
        "origin": [0.0, 0.0, 0.0],
        "tau": grid.tau,
    }
    with open(str(path_base) + ".json", "w") as f:
        json.dump(header, f, sort_keys=True)


def load_grid(path_base):
    with open(str(path_base) + ".json") as f:
        header = json.load(f)
    n = header["N"]
    raw = np.fromfile(str(path_base) + ".bin", dtype="<f4").astype(float)
    vals = raw.reshape(n, n, n).transpose(2, 1, 0)
    grid = TsdfGrid(n, header["voxel_size"] * n, vals, np.ones((n, n, n)))
    return grid
