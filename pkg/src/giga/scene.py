"""Analytic SDF scenes: primitives, rigid poses, procedural clutter generation.

A scene is an immutable collection of convex primitives (sphere, box,
cylinder) with rigid poses above a table plane at z = 0, inside a cubic
workspace [0, l]^3. All queries (signed distance, occupancy, normals,
surface sampling) are evaluated analytically, so downstream labels are
exact rather than mesh approximations.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import quat

WORKSPACE_SIZE = 0.30
# Signed distance reported for an empty scene; large enough that any
# truncation or ray march treats the whole workspace as free space.
EMPTY_SDF = 10.0 * WORKSPACE_SIZE

_NORMAL_STEP = 1e-5


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azim = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.stack([
        np.sin(polar) * np.cos(azim),
        np.sin(polar) * np.sin(azim),
        np.cos(polar),
    ], axis=1)


class NoNormal(Exception):
    """Surface normal query hit a degenerate (near-zero) SDF gradient."""


class SamplingExhausted(RuntimeError):
    """Surface sampler ran out of its iteration budget."""


class NotFound(KeyError):
    """Referenced object id is not present in the scene."""


@dataclass(frozen=True, eq=False)
class Primitive:
    """Convex solid in its local frame.

    dims by kind:
      sphere:   (radius,)
      box:      (hx, hy, hz) half-extents
      cylinder: (radius, half_height), axis along local z
    """

    kind: str
    dims: tuple

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "cylinder"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        n_expected = {"sphere": 1, "box": 3, "cylinder": 2}[self.kind]
        if len(self.dims) != n_expected:
            raise ValueError(f"{self.kind} needs {n_expected} dims, got {len(self.dims)}")
        if any(d <= 0 for d in self.dims):
            raise ValueError("primitive dimensions must be positive")
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))

    def sdf(self, p):
        """Exact signed distance in the local frame. p: (..., 3)."""
        p = np.asarray(p, dtype=float)
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=-1) - self.dims[0]
        if self.kind == "box":
            q = np.abs(p) - np.asarray(self.dims)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        # capped cylinder
        r, hh = self.dims
        dx = np.linalg.norm(p[..., :2], axis=-1) - r
        dz = np.abs(p[..., 2]) - hh
        d = np.stack([dx, dz], axis=-1)
        return np.minimum(d.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)

    def circumradius(self):
        if self.kind == "sphere":
            return self.dims[0]
        if self.kind == "box":
            return float(np.linalg.norm(self.dims))
        r, hh = self.dims
        return float(np.hypot(r, hh))

    def surface_area(self):
        if self.kind == "sphere":
            return 4.0 * np.pi * self.dims[0] ** 2
        if self.kind == "box":
            hx, hy, hz = self.dims
            return 8.0 * (hx * hy + hy * hz + hz * hx)
        r, hh = self.dims
        return 2.0 * np.pi * r * (2.0 * hh) + 2.0 * np.pi * r ** 2

    def settling_points(self):
        """Deterministic local-frame surface points for contact checks.

        Sharp features (box corners/edges, cylinder rims) are sampled
        exactly so that kinematic settling cannot tunnel through a vertex
        contact; curved regions get dense even coverage.
        """
        if self.kind == "sphere":
            return _fibonacci_sphere(512) * self.dims[0]
        if self.kind == "box":
            hx, hy, hz = self.dims
            corners = np.array([(sx * hx, sy * hy, sz * hz)
                                for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
            t = np.linspace(-1, 1, 16)[1:-1]
            edges = []
            for axis in range(3):
                h = self.dims[axis]
                others = [i for i in range(3) if i != axis]
                for s0 in (-1, 1):
                    for s1 in (-1, 1):
                        seg = np.zeros((len(t), 3))
                        seg[:, axis] = t * h
                        seg[:, others[0]] = s0 * self.dims[others[0]]
                        seg[:, others[1]] = s1 * self.dims[others[1]]
                        edges.append(seg)
            g = np.linspace(-1, 1, 8)[1:-1]
            u, v = np.meshgrid(g, g, indexing="ij")
            faces = []
            for axis in range(3):
                others = [i for i in range(3) if i != axis]
                for s in (-1, 1):
                    f = np.zeros((u.size, 3))
                    f[:, axis] = s * self.dims[axis]
                    f[:, others[0]] = u.ravel() * self.dims[others[0]]
                    f[:, others[1]] = v.ravel() * self.dims[others[1]]
                    faces.append(f)
            return np.concatenate([corners] + edges + faces)
        r, hh = self.dims
        ang = np.linspace(0.0, 2.0 * np.pi, 96, endpoint=False)
        ring = np.stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)], axis=1)
        rims = [r * ring + [0, 0, hh], r * ring + [0, 0, -hh]]
        zs = np.linspace(-hh, hh, 12)[1:-1]
        side = np.concatenate([r * ring[::2] + [0, 0, z] for z in zs])
        rad = np.array([r / 3.0, 2.0 * r / 3.0])
        caps = []
        for z in (hh, -hh):
            caps.append(np.array([[0.0, 0.0, z]]))
            for rr in rad:
                caps.append(rr * ring[::4] + [0, 0, z])
        return np.concatenate(rims + [side] + caps)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Pose as unit quaternion (w, x, y, z) plus translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray
    matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if abs(np.linalg.norm(r) - 1.0) > 1e-9:
            raise ValueError("rotation quaternion must be unit norm")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "matrix", quat.to_matrix(r))

    @classmethod
    def identity(cls):
        return cls(quat.IDENTITY.copy(), np.zeros(3))

    def world_to_local(self, p):
        return (np.asarray(p, dtype=float) - self.translation) @ self.matrix

    def local_to_world(self, p):
        return np.asarray(p, dtype=float) @ self.matrix.T + self.translation

    def compose(self, other):
        """self ∘ other: apply other first, then self."""
        return RigidTransform(
            quat.normalize(quat.multiply(self.rotation, other.rotation)),
            self.local_to_world(other.translation),
        )


@dataclass(frozen=True, eq=False)
class SceneObject:
    primitive: Primitive
    pose: RigidTransform
    uid: int

    def sdf(self, p):
        return self.primitive.sdf(self.pose.world_to_local(p))


@dataclass(frozen=True, eq=False)
class Scene:
    """Immutable set of posed objects; table plane at z = 0."""

    objects: tuple
    workspace_size: float = WORKSPACE_SIZE
    truncated: bool = False

    def __post_init__(self):
        uids = [o.uid for o in self.objects]
        if len(set(uids)) != len(uids):
            raise ValueError("object ids must be unique")
        object.__setattr__(self, "objects", tuple(self.objects))


def sdf_eval(scene, p):
    """Min signed distance over all objects; empty scene -> EMPTY_SDF sentinel."""
    p = np.asarray(p, dtype=float)
    if not scene.objects:
        return np.full(p.shape[:-1], EMPTY_SDF) if p.ndim > 1 else EMPTY_SDF
    d = scene.objects[0].sdf(p)
    for obj in scene.objects[1:]:
        d = np.minimum(d, obj.sdf(p))
    return d


def occupancy_eval(scene, p):
    """1 where the point is inside any object (sdf <= 0), else 0."""
    occ = np.asarray(sdf_eval(scene, p) <= 0.0).astype(np.int64)
    return occ if occ.ndim else int(occ)


def sdf_gradient(scene, p):
    """Central-difference gradient of sdf_eval. p: (3,) or (n, 3)."""
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = p[None, :] if single else p
    offsets = np.zeros((3, 3))
    np.fill_diagonal(offsets, _NORMAL_STEP)
    hi = sdf_eval(scene, pts[:, None, :] + offsets)
    lo = sdf_eval(scene, pts[:, None, :] - offsets)
    g = (hi - lo) / (2.0 * _NORMAL_STEP)
    return g[0] if single else g


def surface_normal(scene, p):
    """Unit outward normal at a near-surface point. Raises NoNormal if degenerate."""
    g = sdf_gradient(scene, p)
    n = np.linalg.norm(g, axis=-1, keepdims=g.ndim > 1)
    if np.any(n < 1e-9):
        raise NoNormal("degenerate SDF gradient")
    return g / n


def _aabb_of(obj, pad):
    corners = obj.primitive.circumradius()
    c = obj.pose.translation
    return c - corners - pad, c + corners + pad


def sample_surface_points(scene, n, seed, max_batches=400):
    """Sample n surface points with outward normals, area-weighted.

    Rejection-samples a thin shell around the zero level set (uniform
    proposals over the union of object bounding boxes, corrected for
    multiplicity), then Newton-projects each point onto the surface along
    the SDF gradient. Deterministic for a fixed seed.

    Returns (points (n,3), normals (n,3)).
    """
    if not scene.objects:
        raise SamplingExhausted("cannot sample surface of an empty scene")
    rng = np.random.default_rng(seed)
    shell = 2e-3
    los, his = zip(*[_aabb_of(o, shell) for o in scene.objects])
    los, his = np.array(los), np.array(his)
    vols = np.prod(his - los, axis=1)
    pick_p = vols / vols.sum()

    out = []
    got = 0
    batch = max(4 * n, 1024)
    for _ in range(max_batches):
        idx = rng.choice(len(vols), size=batch, p=pick_p)
        u = rng.random((batch, 3))
        pts = los[idx] + u * (his[idx] - los[idx])
        # uniform over the union: keep with probability 1 / multiplicity
        mult = np.zeros(batch)
        for lo, hi in zip(los, his):
            mult += np.all((pts >= lo) & (pts <= hi), axis=1)
        keep = rng.random(batch) * mult < 1.0
        pts = pts[keep]
        pts = pts[np.abs(sdf_eval(scene, pts)) <= shell]
        # Newton projection onto the zero level set
        for _ in range(4):
            d = sdf_eval(scene, pts)
            if np.all(np.abs(d) <= 1e-4):
                break
            g = sdf_gradient(scene, pts)
            gn = np.linalg.norm(g, axis=1, keepdims=True)
            pts = pts - d[:, None] * g / np.maximum(gn, 1e-9) ** 2
        ok = np.abs(sdf_eval(scene, pts)) <= 1e-3
        pts = pts[ok]
        if len(pts):
            out.append(pts)
            got += len(pts)
        if got >= n:
            break
    if got < n:
        raise SamplingExhausted(f"found {got}/{n} surface points")
    pts = np.concatenate(out)[:n]
    return pts, surface_normal(scene, pts)


def remove_object(scene, uid):
    """Scene without the given object; other poses untouched."""
    if uid not in [o.uid for o in scene.objects]:
        raise NotFound(uid)
    return Scene(
        tuple(o for o in scene.objects if o.uid != uid),
        workspace_size=scene.workspace_size,
        truncated=scene.truncated,
    )


# ---------------------------------------------------------------------------
# Procedural generation


def _draw_packed_primitive(rng):
    if rng.random() < 0.5:
        hx = rng.uniform(0.012, 0.025)
        hy = rng.uniform(0.012, 0.025)
        hz = rng.uniform(0.040, 0.075)
        return Primitive("box", (hx, hy, hz))
    r = rng.uniform(0.015, 0.028)
    hh = rng.uniform(0.040, 0.075)
    return Primitive("cylinder", (r, hh))


def gen_packed_scene(seed, object_count=5):
    """Upright tall objects at rejection-sampled non-overlapping spots.

    Pairwise surface clearance is kept >= 5 mm via a conservative
    circumscribed-circle test in the table plane.
    """
    if object_count < 1:
        raise ValueError("object_count must be >= 1")
    rng = np.random.default_rng(seed)
    l = WORKSPACE_SIZE
    placed = []
    truncated = False
    for uid in range(object_count):
        prim = _draw_packed_primitive(rng)
        if prim.kind == "box":
            rad_xy = float(np.hypot(prim.dims[0], prim.dims[1]))
            height = prim.dims[2]
        else:
            rad_xy = prim.dims[0]
            height = prim.dims[1]
        yaw = rng.uniform(0.0, 2.0 * np.pi)
        ok = False
        for _ in range(600):
            x, y = rng.uniform(rad_xy + 0.005, l - rad_xy - 0.005, size=2)
            if all(
                np.hypot(x - px, y - py) >= rad_xy + prad + 0.0055
                for px, py, prad in ((o.pose.translation[0], o.pose.translation[1], r)
                                     for o, r in placed)
            ):
                ok = True
                break
        if not ok:
            truncated = True
            break
        pose = RigidTransform(quat.from_axis_angle([0, 0, 1], yaw), np.array([x, y, height]))
        placed.append((SceneObject(prim, pose, uid), rad_xy))
    return Scene(tuple(o for o, _ in placed), truncated=truncated)


def _draw_pile_primitive(rng):
    kind = ("sphere", "box", "cylinder")[rng.integers(3)]
    if kind == "sphere":
        return Primitive("sphere", (rng.uniform(0.015, 0.030),))
    if kind == "box":
        return Primitive("box", tuple(rng.uniform(0.012, 0.030, size=3)))
    return Primitive("cylinder", (rng.uniform(0.012, 0.025), rng.uniform(0.020, 0.045)))


def _clearance_at(cand_prim, rot, xy, z, cand_local_pts, placed_world_pts, placed_objs):
    """Min separation of the candidate at height z from table and placed objects."""
    pose = RigidTransform(rot, np.array([xy[0], xy[1], z]))
    world_pts = pose.local_to_world(cand_local_pts)
    g = world_pts[:, 2].min()  # table
    for obj, opts in zip(placed_objs, placed_world_pts):
        g = min(g, obj.sdf(world_pts).min())
        g = min(g, cand_prim.sdf(pose.world_to_local(opts)).min())
    return g


def settle_drop(cand_prim, rot, xy, cand_local_pts, placed_objs, placed_world_pts, z_start):
    """Lower a candidate along -z until first contact (gap in [0, 1 mm]).

    Kinematic stand-in for dropping: a coarse downward march brackets the
    first contact, then bisection tightens the gap. Clearance is 1-Lipschitz
    in z, so the target band is always reachable. The lower edge of the band
    sits above zero to absorb the sampled-contact measurement error.
    """

    def gap(z):
        return _clearance_at(cand_prim, rot, xy, z, cand_local_pts,
                             placed_world_pts, placed_objs)

    lo_band, hi_band = 3e-4, 1e-3
    step = 2e-3
    if gap(z_start) < lo_band:
        return None  # started in collision; caller retries
    z = z_start
    while True:
        z_next = z - step
        g = gap(z_next)
        if g < hi_band:
            if g >= lo_band:
                return z_next
            lo, hi = z_next, z
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                gm = gap(mid)
                if lo_band <= gm < hi_band:
                    return mid
                if gm < lo_band:
                    lo = mid
                else:
                    hi = mid
            return hi
        z = z_next


def gen_pile_scene(seed, object_count=5):
    """Random primitives at uniform random orientations, dropped kinematically."""
    if object_count < 1:
        raise ValueError("object_count must be >= 1")
    rng = np.random.default_rng(seed)
    l = WORKSPACE_SIZE
    placed = []
    placed_pts = []
    truncated = False
    for uid in range(object_count):
        done = False
        for _ in range(200):
            prim = _draw_pile_primitive(rng)
            rot = quat.random_uniform(rng)
            local_pts = prim.settling_points()
            rad = prim.circumradius()
            xy = rng.uniform(rad + 0.005, l - rad - 0.005, size=2)
            top = max((o.pose.translation[2] + o.primitive.circumradius())
                      for o in placed) if placed else 0.0
            z0 = max(top, 0.0) + rad + 0.01
            z = settle_drop(prim, rot, xy, local_pts, placed, placed_pts, z0)
            if z is None:
                continue
            pose = RigidTransform(rot, np.array([xy[0], xy[1], z]))
            world_pts = pose.local_to_world(local_pts)
            if world_pts[:, 2].max() > l - 1e-3:
                continue
            if np.any(world_pts[:, :2] < 1e-4) or np.any(world_pts[:, :2] > l - 1e-4):
                continue
            placed.append(SceneObject(prim, pose, uid))
            placed_pts.append(world_pts)
            done = True
            break
        if not done:
            truncated = True
            break
    return Scene(tuple(placed), truncated=truncated)


# ---------------------------------------------------------------------------
# Serialization


def scene_to_json(scene):
    doc = {
        "workspace_size": scene.workspace_size,
        "objects": [
            {
                "kind": o.primitive.kind,
                "dims": list(o.primitive.dims),
                "quat": [float(v) for v in o.pose.rotation],
                "translation": [float(v) for v in o.pose.translation],
                "id": o.uid,
            }
            for o in scene.objects
        ],
    }
    return json.dumps(doc, sort_keys=True)


def scene_from_json(text):
    doc = json.loads(text)
    objs = tuple(
        SceneObject(
            Primitive(entry["kind"], tuple(entry["dims"])),
            RigidTransform(np.array(entry["quat"]), np.array(entry["translation"])),
            entry["id"],
        )
        for entry in doc["objects"]
    )
    return Scene(objs, workspace_size=doc["workspace_size"])
