"""Analytic grasp oracle: antipodal friction-cone test plus collision checks.

Replaces physics-engine grasp trials. A grasp is labeled 1 iff finger
closing rays find two contacts on the same object, both contact normals lie
inside the friction cone of the closing line, and the swept finger volumes
and palm box stay clear of all other geometry and the table.

Grasp frame convention: z = approach axis, x = finger-closing axis. The
fingers span z in [-finger_depth, 0], so the closing line through the grasp
center lies in the fingertip plane.
"""

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import quat
from .scene import (
    NoNormal,
    SamplingExhausted,
    gen_packed_scene,
    gen_pile_scene,
    occupancy_eval,
    sample_surface_points,
    sdf_eval,
    surface_normal,
)
from .sensor import NoiseParams, apply_noise, place_camera, render_depth
from .tsdf import TsdfGrid, integrate_depth, load_grid, save_grid

logger = logging.getLogger(__name__)

FRICTION = 0.5
MARCH_STEP = 5e-4
SHELL_PITCH = 2e-3


@dataclass(frozen=True)
class GripperModel:
    max_width: float = 0.08
    finger_depth: float = 0.05
    finger_thickness: float = 0.01
    # full extents of the palm clearance box, sitting behind the fingers
    palm_dims: tuple = (0.10, 0.02, 0.02)

    def __post_init__(self):
        if min(self.max_width, self.finger_depth, self.finger_thickness,
               *self.palm_dims) <= 0:
            raise ValueError("gripper dimensions must be positive")


@dataclass(frozen=True, eq=False)
class Grasp:
    center: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    width: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        r = np.asarray(self.rotation, dtype=float)
        if abs(np.linalg.norm(r) - 1.0) > 1e-6:
            raise ValueError("grasp rotation must be a unit quaternion")
        object.__setattr__(self, "rotation", r)

    @property
    def closing_axis(self):
        return quat.to_matrix(self.rotation)[:, 0]

    @property
    def approach_axis(self):
        return quat.to_matrix(self.rotation)[:, 2]


@dataclass(frozen=True, eq=False)
class GraspLabel:
    grasp: Grasp
    q: int


@dataclass(eq=False)
class SceneRecord:
    scene_id: int
    grid: object  # TsdfGrid
    labels: list
    occ_points: np.ndarray
    occ_labels: np.ndarray
    scene: object = None


def _march_contact(scene, start, direction, travel):
    """First SDF root along a segment, by fixed-pitch march + bisection.

    Returns the contact point, or None when the start is already inside an
    object or no surface is crossed within the travel budget.
    """
    n_steps = int(np.ceil(travel / MARCH_STEP)) + 1
    ts = np.linspace(0.0, travel, n_steps)
    pts = start[None, :] + ts[:, None] * direction[None, :]
    d = sdf_eval(scene, pts)
    if d[0] <= 0.0:
        return None
    hits = np.flatnonzero(d <= 0.0)
    if len(hits) == 0:
        return None
    k = hits[0]
    lo, hi = ts[k - 1], ts[k]
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if sdf_eval(scene, start + mid * direction) <= 0.0:
            hi = mid
        else:
            lo = mid
    return start + hi * direction


def _box_shell_points(lo, hi, pitch=SHELL_PITCH):
    """Points covering the 6 faces of an axis-aligned box, corners included."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    axes = [np.linspace(lo[i], hi[i], max(2, int(np.ceil((hi[i] - lo[i]) / pitch)) + 1))
            for i in range(3)]
    faces = []
    for axis in range(3):
        o1, o2 = [i for i in range(3) if i != axis]
        u, v = np.meshgrid(axes[o1], axes[o2], indexing="ij")
        for val in (lo[axis], hi[axis]):
            f = np.empty((u.size, 3))
            f[:, axis] = val
            f[:, o1] = u.ravel()
            f[:, o2] = v.ravel()
            faces.append(f)
    return np.concatenate(faces)


def _gripper_boxes(gripper, width, inner_stop=None):
    """Axis-aligned (lo, hi) boxes in the grasp frame.

    inner_stop = (x1, x2) contact coordinates trims the swept finger boxes
    at the contact instead of the fully closed position.
    """
    th = gripper.finger_thickness
    d = gripper.finger_depth
    half_w = width / 2.0
    x1 = inner_stop[0] if inner_stop is not None else 0.0
    x2 = inner_stop[1] if inner_stop is not None else 0.0
    boxes = [
        (np.array([x1, -th / 2, -d]), np.array([half_w + th, th / 2, 0.0])),
        (np.array([-half_w - th, -th / 2, -d]), np.array([x2, th / 2, 0.0])),
    ]
    px, py, pz = gripper.palm_dims
    boxes.append((np.array([-px / 2, -py / 2, -d - pz]),
                  np.array([px / 2, py / 2, -d])))
    return boxes


def _collides(scene_objs, grasp_pose_mat, grasp_center, boxes, obj_surface_pts):
    """Bidirectional box-vs-scene test plus the table halfspace.

    scene_objs: objects the gripper must avoid. obj_surface_pts: cached
    world-frame surface points per object (sharp features included), used
    for the reverse containment check.
    """
    shell_local = np.concatenate([_box_shell_points(lo, hi) for lo, hi in boxes])
    shell_world = shell_local @ grasp_pose_mat.T + grasp_center
    if shell_world[:, 2].min() <= 0.0:
        return True  # table
    for obj in scene_objs:
        if obj.sdf(shell_world).min() < 0.0:
            return True
    if scene_objs:
        pts = np.concatenate(obj_surface_pts)
        local = (pts - grasp_center) @ grasp_pose_mat
        for lo, hi in boxes:
            if np.any(np.all((local > lo) & (local < hi), axis=1)):
                return True
    return False


def _owner(scene, p):
    """Index of the object whose surface the point lies on."""
    dists = [obj.sdf(p) for obj in scene.objects]
    return int(np.argmin(dists))


def evaluate_grasp(scene, gripper, grasp, mu=FRICTION):
    """1 iff antipodal within the friction cone, same object, collision-free."""
    return grasp_outcome(scene, gripper, grasp, mu)[0]


def grasp_outcome(scene, gripper, grasp, mu=FRICTION):
    """(label, uid of the grasped object or None) under the same test."""
    if grasp.width > gripper.max_width + 1e-12:
        raise ValueError("grasp width exceeds gripper maximum")
    if not scene.objects:
        return 0, None
    rot = quat.to_matrix(grasp.rotation)
    x_axis = rot[:, 0]
    t = grasp.center
    w = grasp.width

    c1 = _march_contact(scene, t + 0.5 * w * x_axis, -x_axis, w)
    c2 = _march_contact(scene, t - 0.5 * w * x_axis, x_axis, w)
    if c1 is None or c2 is None:
        return 0, None

    try:
        n1 = surface_normal(scene, c1)
        n2 = surface_normal(scene, c2)
    except NoNormal:
        return 0, None
    cone = np.arctan(mu)
    if np.arccos(min(1.0, abs(np.dot(n1, x_axis)))) > cone:
        return 0, None
    if np.arccos(min(1.0, abs(np.dot(n2, x_axis)))) > cone:
        return 0, None

    own1, own2 = _owner(scene, c1), _owner(scene, c2)
    if own1 != own2:
        return 0, None

    grasped_uid = scene.objects[own1].uid
    others = [o for o in scene.objects if o.uid != grasped_uid]
    other_pts = [o.pose.local_to_world(o.primitive.settling_points()) for o in others]
    local1 = np.dot(c1 - t, x_axis)
    local2 = np.dot(c2 - t, x_axis)
    boxes = _gripper_boxes(gripper, w, inner_stop=(local1, local2))
    if _collides(others, rot, t, boxes, other_pts):
        return 0, None
    return 1, grasped_uid


def _static_collision_free(scene, gripper, center, rot, width):
    """Gripper at a fixed opening (no sweep) against the whole scene."""
    objs = list(scene.objects)
    pts = [o.pose.local_to_world(o.primitive.settling_points()) for o in objs]
    boxes = _gripper_boxes(gripper, width, inner_stop=(width / 2, -width / 2))
    return not _collides(objs, rot, center, boxes, pts)


def sample_grasp_candidates(scene, gripper, n, seed):
    """Heuristic candidates near the surface.

    Centers: surface point offset along the normal by U(-5 mm, +15 mm).
    Orientation: closing axis within 30 degrees of the surface normal, roll
    uniform. Width: first collision-free opening of a 4-step sweep to w_max.
    """
    rng = np.random.default_rng(seed)
    surf_seed = int(rng.integers(2 ** 63))
    pts, normals = sample_surface_points(scene, n, surf_seed)
    widths = gripper.max_width * np.array([0.25, 0.5, 0.75, 1.0])
    out = []
    for p, nrm in zip(pts, normals):
        center = p + rng.uniform(-0.005, 0.015) * nrm
        # closing axis uniform in a 30-degree cone about the normal
        cos_t = rng.uniform(np.cos(np.deg2rad(30.0)), 1.0)
        sin_t = np.sqrt(1.0 - cos_t ** 2)
        az = rng.uniform(0.0, 2.0 * np.pi)
        helper = np.array([0.0, 0.0, 1.0]) if abs(nrm[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        b1 = np.cross(helper, nrm)
        b1 /= np.linalg.norm(b1)
        b2 = np.cross(nrm, b1)
        x_axis = cos_t * nrm + sin_t * (np.cos(az) * b1 + np.sin(az) * b2)
        roll = rng.uniform(0.0, 2.0 * np.pi)
        helper2 = b2 if abs(np.dot(b2, x_axis)) < 0.99 else b1
        y0 = np.cross(helper2, x_axis)
        y0 /= np.linalg.norm(y0)
        z0 = np.cross(x_axis, y0)
        y_axis = np.cos(roll) * y0 + np.sin(roll) * z0
        z_axis = np.cross(x_axis, y_axis)
        rot = np.stack([x_axis, y_axis, z_axis], axis=1)
        q = quat.from_matrix(rot)
        width = gripper.max_width
        for cand_w in widths:
            if _static_collision_free(scene, gripper, center, quat.to_matrix(q), cand_w):
                width = float(cand_w)
                break
        out.append(Grasp(center, q, width))
    return out


def balance_dataset(labels, seed=0):
    """Subsample negatives so #neg = #pos (positives untouched)."""
    pos = [lab for lab in labels if lab.q == 1]
    neg = [lab for lab in labels if lab.q == 0]
    if len(neg) <= len(pos):
        return list(labels)
    rng = np.random.default_rng(seed)
    keep = rng.choice(len(neg), size=len(pos), replace=False)
    kept = [neg[i] for i in sorted(keep)]
    return pos + kept


def sample_occupancy_points(scene, n, seed):
    """n points uniform in the workspace cube with binary occupancy labels."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, scene.workspace_size, size=(n, 3))
    return pts, occupancy_eval(scene, pts)


# ---------------------------------------------------------------------------
# Dataset building


def build_dataset(num_scenes, scenario, seed, out_dir=None, gripper=None,
                  grasps_per_scene=64, occ_per_scene=2048, object_count=5,
                  noise_params=None, resolution=40, keep_scene=False):
    """Generate scenes, render, fuse, label grasps, sample occupancy.

    Returns the list of SceneRecord; also streams records to out_dir when
    given (tsdf binary + grasps.jsonl + occupancy binary per scene, one
    manifest.json per run).
    """
    if num_scenes < 1:
        raise ValueError("num_scenes must be >= 1")
    if scenario not in ("packed", "pile"):
        raise ValueError(f"unknown scenario {scenario!r}")
    gripper = gripper or GripperModel()
    noise_params = noise_params or NoiseParams()
    gen_fn = {"packed": gen_packed_scene, "pile": gen_pile_scene}[scenario]

    root = np.random.SeedSequence(seed)
    records = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    attempts = 0
    while len(records) < num_scenes:
        if attempts >= 4 * num_scenes:
            raise SamplingExhausted(
                f"{attempts} attempts produced only {len(records)} scenes")
        attempts += 1
        subseeds = root.spawn(1)[0].generate_state(5)
        try:
            record = _build_one(len(records), gen_fn, subseeds, gripper,
                                noise_params, grasps_per_scene, occ_per_scene,
                                object_count, resolution, keep_scene)
        except SamplingExhausted as exc:
            logger.warning("scene attempt %d skipped: %s", attempts, exc)
            continue
        records.append(record)
        if out_dir is not None:
            _write_record(out_dir, record)
    if out_dir is not None:
        _write_manifest(out_dir, num_scenes, scenario, seed, gripper,
                        grasps_per_scene, occ_per_scene, object_count, resolution)
    return records


def _build_one(idx, gen_fn, subseeds, gripper, noise_params,
               grasps_per_scene, occ_per_scene, object_count, resolution,
               keep_scene):
    scn = gen_fn(int(subseeds[0]), object_count=object_count)
    if not scn.objects:
        raise SamplingExhausted("scene generation placed no objects")
    cam = place_camera(scn.workspace_size)
    img = apply_noise(render_depth(scn, cam), noise_params, int(subseeds[1]))
    grid = integrate_depth(TsdfGrid.empty(resolution, scn.workspace_size), img, cam)
    cands = sample_grasp_candidates(scn, gripper, grasps_per_scene, int(subseeds[2]))
    # the shared encoding only represents the workspace cube; drop centers
    # the normal offset pushed outside it
    cands = [g for g in cands
             if (g.center >= 0.0).all() and (g.center <= scn.workspace_size).all()]
    labels = [GraspLabel(g, evaluate_grasp(scn, gripper, g)) for g in cands]
    labels = balance_dataset(labels, seed=int(subseeds[3]))
    if not labels:
        raise SamplingExhausted("no usable grasp labels")
    occ_pts, occ_labs = sample_occupancy_points(scn, occ_per_scene, int(subseeds[4]))
    return SceneRecord(idx, grid, labels, occ_pts, occ_labs,
                       scene=scn if keep_scene else None)


def _write_record(out_dir, rec):
    base = os.path.join(out_dir, f"scene_{rec.scene_id:04d}")
    save_grid(base + ".tsdf", rec.grid)
    with open(base + ".grasps.jsonl", "w") as f:
        for lab in rec.labels:
            doc = {
                "t": [float(v) for v in lab.grasp.center],
                "quat": [float(v) for v in lab.grasp.rotation],
                "w": float(lab.grasp.width),
                "q": int(lab.q),
            }
            f.write(json.dumps(doc, sort_keys=True) + "\n")
    occ = np.concatenate([rec.occ_points, rec.occ_labels[:, None].astype(float)],
                         axis=1).astype("<f4")
    with open(base + ".occ.bin", "wb") as f:
        f.write(occ.tobytes())


def _write_manifest(out_dir, num_scenes, scenario, seed, gripper,
                    grasps_per_scene, occ_per_scene, object_count, resolution):
    manifest = {
        "num_scenes": num_scenes,
        "scenario": scenario,
        "seed": seed,
        "object_count": object_count,
        "grasps_per_scene": grasps_per_scene,
        "occ_per_scene": occ_per_scene,
        "resolution": resolution,
        "gripper": {
            "max_width": gripper.max_width,
            "finger_depth": gripper.finger_depth,
            "finger_thickness": gripper.finger_thickness,
            "palm_dims": list(gripper.palm_dims),
        },
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)


def load_dataset(out_dir):
    """Read back records written by build_dataset (tsdf + grasps + occupancy)."""
    records = []
    names = sorted(fn[:-10] for fn in os.listdir(out_dir) if fn.endswith(".tsdf.json"))
    for name in names:
        base = os.path.join(out_dir, name)
        grid = load_grid(base + ".tsdf")
        labels = []
        with open(base + ".grasps.jsonl") as f:
            for line in f:
                doc = json.loads(line)
                labels.append(GraspLabel(
                    Grasp(np.array(doc["t"]), np.array(doc["quat"]), doc["w"]),
                    doc["q"]))
        raw = np.fromfile(base + ".occ.bin", dtype="<f4").reshape(-1, 4).astype(float)
        records.append(SceneRecord(int(name.split("_")[1]), grid, labels,
                                   raw[:, :3], raw[:, 3].astype(np.int64)))
    return records
