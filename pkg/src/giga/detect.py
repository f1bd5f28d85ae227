"""Grasp detection on a trained model: dense query, masking, NMS, selection.

The workspace is discretized into query-grid cell centers; the affordance
decoders are evaluated at every center off one shared encoding.  Candidates
near the walls, below fingertip height, or floating in deep observed free
space are masked out, greedy non-maxima suppression thins the rest, and the
best remaining candidate is executed if its quality clears the threshold.
All tie-breaks are lexicographic in the center coordinates so runs are
reproducible.
"""

import dataclasses

import numpy as np
from scipy.spatial import cKDTree

from .oracle import Grasp, GripperModel

_EPS = 1e-9


@dataclasses.dataclass(frozen=True)
class DetectionConfig:
    query_resolution: int = 40
    quality_threshold: float = 0.5
    nms_radius: float = 0.03
    boundary_margin: float = GripperModel.finger_depth

    def __post_init__(self):
        if self.query_resolution < 1:
            raise ValueError("query resolution must be >= 1")
        if not 0.0 < self.quality_threshold < 1.0:
            raise ValueError("quality threshold must be in (0, 1)")
        if self.nms_radius <= 0.0:
            raise ValueError("NMS radius must be positive")
        if self.boundary_margin < 0.0:
            raise ValueError("boundary margin must be >= 0")


@dataclasses.dataclass(frozen=True)
class CandidateSet:
    """Column arrays of grasp candidates with predicted quality."""

    centers: np.ndarray    # [N, 3] meters
    rotations: np.ndarray  # [N, 4] unit quaternions
    widths: np.ndarray     # [N] meters
    qualities: np.ndarray  # [N] in [0, 1]

    def __post_init__(self):
        n = len(self.centers)
        shapes = (self.centers.shape, self.rotations.shape,
                  self.widths.shape, self.qualities.shape)
        if shapes != ((n, 3), (n, 4), (n,), (n,)):
            raise ValueError("inconsistent candidate arrays %r" % (shapes,))
        if n and (self.qualities.min() < 0.0 or self.qualities.max() > 1.0):
            raise ValueError("qualities must lie in [0, 1]")
        if n and np.abs(np.linalg.norm(self.rotations, axis=1) - 1.0).max() > 1e-6:
            raise ValueError("rotations must be unit quaternions")

    def __len__(self):
        return len(self.centers)

    def subset(self, idx):
        return CandidateSet(self.centers[idx], self.rotations[idx],
                            self.widths[idx], self.qualities[idx])

    def grasp(self, i):
        return (Grasp(self.centers[i], self.rotations[i],
                      float(self.widths[i])),
                float(self.qualities[i]))


def grid_centers(resolution, workspace_size):
    """Query-cell centers, C-ordered over (x, y, z) indices (z fastest)."""
    idx = np.arange(resolution)
    xx, yy, zz = np.meshgrid(idx, idx, idx, indexing="ij")
    ijk = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)
    return (ijk + 0.5) * (workspace_size / resolution)


def dense_query(model, tsdf, resolution=None, chunk=16384):
    """Affordance predictions at every query-grid center, one encode."""
    resolution = resolution or DetectionConfig.query_resolution
    centers = grid_centers(resolution, tsdf.workspace_size)
    planes = model.encode(tsdf)
    rot, wid, qual = [], [], []
    for lo in range(0, len(centers), chunk):
        pts = centers[None, lo:lo + chunk]
        feat = model.query_feature(planes, pts)
        q, r, w = model.decode_affordance(feat, pts)
        qual.append(q.data[:, 0])
        rot.append(r.data)
        wid.append(w.data[:, 0])
    return CandidateSet(centers, np.concatenate(rot), np.concatenate(wid),
                        np.concatenate(qual))


def mask_impractical(cands, config, tsdf, gripper=None):
    """Drop candidates no executable grasp could start from.

    Removed: centers within the boundary margin of the side or top walls,
    centers below fingertip height, and centers whose TSDF voxel is fully
    observed free space with no surface within twice the NMS radius.
    """
    gripper = gripper or GripperModel()
    c = cands.centers
    ws = tsdf.workspace_size
    m = config.boundary_margin
    keep = ((c[:, 0] >= m) & (c[:, 0] <= ws - m)
            & (c[:, 1] >= m) & (c[:, 1] <= ws - m)
            & (c[:, 2] <= ws - m) & (c[:, 2] >= gripper.finger_thickness))

    vox = np.clip((c / tsdf.voxel_size).astype(int), 0, tsdf.resolution - 1)
    vals = tsdf.index_grid()[vox[:, 0], vox[:, 1], vox[:, 2]]
    wts = tsdf.weights[vox[:, 0], vox[:, 1], vox[:, 2]]
    deep_free = (wts > 0.0) & (vals >= 1.0 - _EPS)
    band = (tsdf.weights > 0.0) & (np.abs(tsdf.values) < 1.0 - _EPS)
    if np.any(band):
        surf = (np.argwhere(band) + 0.5) * tsdf.voxel_size
        dist = cKDTree(surf).query(c)[0]
        deep_free &= dist > 2.0 * config.nms_radius
    return cands.subset(keep & ~deep_free)


def nms(cands, radius):
    """Greedy non-maxima suppression by predicted quality."""
    if radius <= 0.0:
        raise ValueError("NMS radius must be positive")
    n = len(cands)
    if n <= 1:
        return cands
    c = cands.centers
    order = np.lexsort((c[:, 2], c[:, 1], c[:, 0], -cands.qualities))
    tree = cKDTree(c)
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        alive[tree.query_ball_point(c[i], radius)] = False
    return cands.subset(np.array(sorted(keep)))


def select_index(cands, threshold):
    """Index of the best candidate at or above threshold, else None."""
    if len(cands) == 0:
        return None
    c = cands.centers
    order = np.lexsort((c[:, 2], c[:, 1], c[:, 0], -cands.qualities))
    best = int(order[0])
    if cands.qualities[best] < threshold:
        return None
    return best


def select_grasp(cands, threshold=None):
    """Highest-quality candidate if it clears the threshold, else None."""
    if threshold is None:
        threshold = DetectionConfig.quality_threshold
    best = select_index(cands, threshold)
    return None if best is None else cands.grasp(best)[0]


def detect(model, tsdf, config=None, gripper=None):
    """Full pipeline; returns ((Grasp, quality) or (None, None), survivors)."""
    config = config or DetectionConfig()
    cands = dense_query(model, tsdf, config.query_resolution)
    cands = mask_impractical(cands, config, tsdf, gripper)
    cands = nms(cands, config.nms_radius)
    best = select_index(cands, config.quality_threshold)
    if best is None:
        return (None, None), cands
    grasp, quality = cands.grasp(best)
    return (grasp, quality), cands


def affordance_landscape(model, tsdf, resolution=None, axis=2, index=None):
    """Quality field of one axis-aligned slice of the dense query grid."""
    resolution = resolution or DetectionConfig.query_resolution
    if axis not in (0, 1, 2):
        raise ValueError("axis must be 0, 1, or 2")
    if index is None:
        index = resolution // 2
    if not 0 <= index < resolution:
        raise ValueError("slice index %d outside [0, %d)" % (index, resolution))
    cands = dense_query(model, tsdf, resolution)
    field = cands.qualities.reshape(resolution, resolution, resolution)
    return np.take(field, index, axis=axis)
