"""Mesh extraction from the occupancy decoder and reconstruction metrics.

Marching cubes runs on a scalar grid sampled at cell centers and emits a
triangle mesh with outward (gradient-aligned) normals.  Reconstruction
quality is scored by Monte-Carlo volumetric IoU against the analytic
scene, either over the whole workspace or restricted to the between-finger
regions of successful grasps.
"""

import dataclasses
import logging

import numpy as np

from ._mc_tables import EDGE_CROSSINGS, TRIANGLES
from .detect import grid_centers
from .oracle import GripperModel
from .scene import occupancy_eval

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
OCC_THRESHOLD = 0.5

# edge index -> (axis, lower-corner offset) in the cell frame
_EDGE_AXIS = (0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2)
_EDGE_BASE = ((0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 0),
              (0, 0, 1), (1, 0, 1), (0, 1, 1), (0, 0, 1),
              (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0))
_CORNERS = ((0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
            (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1))


@dataclasses.dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray   # [V, 3] meters
    triangles: np.ndarray  # [T, 3] vertex indices

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle indices out of range")
        if len(t) and _areas(v, t).min() <= DEGENERATE_AREA:
            raise ValueError("degenerate triangle in mesh")

    def __len__(self):
        return len(self.triangles)

    def volume(self):
        """Signed volume via the divergence theorem (outward normals)."""
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def _areas(verts, tris):
    a, b, c = (verts[tris[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def marching_cubes(field, isolevel, origin=(0.0, 0.0, 0.0), spacing=1.0):
    """Isosurface of a sampled scalar grid as a triangle mesh.

    field[i, j, k] is the value at origin + (i, j, k) * spacing.  Normals
    point toward increasing field values, so signed-distance-style fields
    (negative inside) get outward-facing surfaces.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3 or min(field.shape) < 2:
        raise ValueError("field must be a 3-d grid, >= 2 samples per axis")
    nx, ny, nz = field.shape

    below = field < isolevel
    index = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int32)
    for bit, (dx, dy, dz) in enumerate(_CORNERS):
        index |= (below[dx:dx + nx - 1, dy:dy + ny - 1, dz:dz + nz - 1]
                  .astype(np.int32) << bit)
    cells = np.argwhere((index != 0) & (index != 0xFF))
    if len(cells) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    codes = index[cells[:, 0], cells[:, 1], cells[:, 2]]

    tri_rows = np.asarray(TRIANGLES, dtype=np.int64)[codes]  # [A, 16]
    cell_ids = []
    local_edges = []
    for t in range(0, 15, 3):
        live = tri_rows[:, t] >= 0
        if not np.any(live):
            break
        cell_ids.append(np.flatnonzero(live))
        local_edges.append(tri_rows[live, t:t + 3])
    cell_ids = np.concatenate(cell_ids)
    local_edges = np.concatenate(local_edges)          # [T, 3]

    # global edge key: axis plus lattice coordinate of the lower corner
    base = np.asarray(_EDGE_BASE, dtype=np.int64)[local_edges]
    axis = np.asarray(_EDGE_AXIS, dtype=np.int64)[local_edges]
    corner = cells[cell_ids][:, None, :] + base        # [T, 3, 3]
    keys = ((axis * nx + corner[..., 0]) * ny + corner[..., 1]) * nz \
        + corner[..., 2]
    uniq, inverse = np.unique(keys.reshape(-1), return_inverse=True)
    # table winding faces the below-isolevel side; flip toward the gradient
    tris = inverse.reshape(-1, 3)[:, [0, 2, 1]]

    ez = uniq % nz
    ey = (uniq // nz) % ny
    rest = uniq // (nz * ny)
    ex = rest % nx
    eax = rest // nx
    step = np.eye(3, dtype=np.int64)[eax]
    f0 = field[ex, ey, ez]
    f1 = field[ex + step[:, 0], ey + step[:, 1], ez + step[:, 2]]
    t = np.clip((isolevel - f0) / np.where(f1 == f0, 1.0, f1 - f0), 0.0, 1.0)
    verts = (np.stack([ex, ey, ez], axis=1) + step * t[:, None]) * spacing \
        + np.asarray(origin, dtype=np.float64)

    areas = _areas(verts, tris)
    tris = tris[areas > DEGENERATE_AREA]
    used = np.unique(tris)
    remap = np.zeros(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(verts[used], remap[tris])


def save_ply(mesh, path):
    """ASCII PLY export (vertices and triangular faces)."""
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write("element vertex %d\n" % len(mesh.vertices))
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("element face %d\n" % len(mesh.triangles))
        f.write("property list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            f.write("%.8f %.8f %.8f\n" % tuple(v))
        for t in mesh.triangles:
            f.write("3 %d %d %d\n" % tuple(t))


# ---------------------------------------------------------------------------
# Model adapters


def net_occupancy_fn(model, tsdf, chunk=16384):
    """Occupancy-probability callable over world points, one shared encode."""
    planes = model.encode(tsdf)

    def predict(points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(pts))
        for lo in range(0, len(pts), chunk):
            sub = pts[None, lo:lo + chunk]
            occ = model.decode_occupancy(model.query_feature(planes, sub), sub)
            out[lo:lo + chunk] = occ.data[:, 0]
        return out

    return predict


def mesh_from_model(model, tsdf, resolution=40, threshold=OCC_THRESHOLD):
    """Extract the occupancy isosurface mesh at the given grid resolution."""
    predict = net_occupancy_fn(model, tsdf)
    centers = grid_centers(resolution, tsdf.workspace_size)
    field = predict(centers).reshape(resolution, resolution, resolution)
    cell = tsdf.workspace_size / resolution
    # negate so the inside is negative and normals face outward
    return marching_cubes(-field, -threshold,
                          origin=(cell / 2,) * 3, spacing=cell)


# ---------------------------------------------------------------------------
# Volumetric IoU metrics


def volumetric_iou(predict, scene, n=100000, seed=0):
    """Monte-Carlo IoU of a predictor against the analytic scene.

    predict maps [N, 3] world points to occupancy probabilities; a point
    counts as predicted-occupied at probability >= 0.5.  An empty union
    is defined as perfect agreement (IoU 1).
    """
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, scene.workspace_size, size=(n, 3))
    pred = np.asarray(predict(pts)).reshape(-1) >= OCC_THRESHOLD
    truth = occupancy_eval(scene, pts).astype(bool)
    union = int(np.sum(pred | truth))
    if union == 0:
        return 1.0
    return float(np.sum(pred & truth) / union)


def _finger_region_boxes(grasps, gripper):
    """(rotation matrix, center, lo, hi) per grasp, box in the grasp frame."""
    from . import quat
    boxes = []
    for g in grasps:
        half_w = g.width / 2.0
        lo = np.array([-half_w, -gripper.finger_thickness / 2.0,
                       -gripper.finger_depth])
        hi = np.array([half_w, gripper.finger_thickness / 2.0, 0.0])
        boxes.append((quat.to_matrix(g.rotation), g.center, lo, hi))
    return boxes


def iou_grasp(predict, scene, grasps, gripper=None, n=100000, seed=0):
    """Volumetric IoU restricted to the between-finger boxes of grasps.

    Points are drawn uniformly over the union of the oriented boxes by
    volume-weighted box sampling with multiplicity reweighting.
    """
    if not grasps:
        raise ValueError("grasp list must be non-empty")
    if n < 1:
        raise ValueError("need at least one sample")
    gripper = gripper or GripperModel()
    boxes = _finger_region_boxes(grasps, gripper)
    vols = np.array([np.prod(hi - lo) for _, _, lo, hi in boxes])
    if vols.sum() <= 0.0:
        logger.warning("between-finger region has zero volume; IoU "
                       "defined as 1")
        return 1.0

    rng = np.random.default_rng(seed)
    pick = rng.choice(len(boxes), size=n, p=vols / vols.sum())
    u = rng.uniform(0.0, 1.0, size=(n, 3))
    pts = np.empty((n, 3))
    for b, (rot, center, lo, hi) in enumerate(boxes):
        sel = pick == b
        local = lo + u[sel] * (hi - lo)
        pts[sel] = local @ rot.T + center
    mult = np.zeros(n)
    for rot, center, lo, hi in boxes:
        local = (pts - center) @ rot
        mult += np.all((local >= lo - 1e-12) & (local <= hi + 1e-12), axis=1)
    weights = 1.0 / np.maximum(mult, 1.0)

    pred = np.asarray(predict(pts)).reshape(-1) >= OCC_THRESHOLD
    truth = occupancy_eval(scene, pts).astype(bool)
    union = float(weights[pred | truth].sum())
    if union == 0.0:
        return 1.0
    return float(weights[pred & truth].sum() / union)
