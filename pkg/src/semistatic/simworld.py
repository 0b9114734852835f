"""Synthetic semi-static warehouse: extruded-polygon objects, scripted cameras, labeled depth frames.

Scene file (TOML)::

    traversals = 2          # number of traversals
    seed = 7                # noise seed
    noise_std = 0.01        # range noise (m), Gaussian along each ray
    label_flip = 0.0        # per-point probability of a random wrong label
    frame_rate = 1.0        # Hz

    [camera]                # pinhole, optical frame x right / y down / z forward
    width = 160
    height = 120
    hfov_deg = 70.0
    max_range = 4.5

    [[objects]]             # vertical prism; poses[k] is its (x, y, heading) in traversal k
    id = 0
    class = "box"
    footprint = [[-1.2, -0.4], [1.2, -0.4], [1.2, 0.4], [-1.2, 0.4]]   # convex, local frame
    height = 1.25
    base_z = 0.0
    poses = [[0.05, 2.55, 0.0], [0.05, 3.55, 0.0]]
    absent = [1]            # traversals in which the object is missing

    [[movers]]              # prism translating during one traversal
    id = 100
    class = "robot"
    footprint = [...]
    height = 0.6
    traversal = 0
    start = [x, y, heading]
    velocity = [vx, vy]     # m/s, applied between t_start and t_stop
    t_start = 0.0
    t_stop = 10.0

    [[trajectories]]        # one per traversal; waypoint = [t, px, py, pz, qx, qy, qz, qw]
    traversal = 0
    waypoints = [[0.0, ...], ...]

The ground is the plane z = 0 and carries the "floor" label.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import toml
from scipy.spatial.transform import Rotation, Slerp

from .geometry import ClassTable, LabeledCloud
from .poses import CameraModel, Pose

_EPS = 1e-9


def _convex_ccw(poly):
    poly = np.asarray(poly, dtype=float).reshape(-1, 2)
    if len(poly) < 3:
        raise ValueError("footprint needs at least 3 vertices")
    area2 = np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
    if abs(area2) < 1e-12:
        raise ValueError("degenerate footprint")
    if area2 < 0:
        poly = poly[::-1]
    e = np.roll(poly, -1, axis=0) - poly
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    if np.any(cross < -1e-12):
        raise ValueError("footprint must be convex")
    return poly


def _place(footprint, x, y, phi):
    c, s = math.cos(phi), math.sin(phi)
    return footprint @ np.array([[c, s], [-s, c]]) + np.array([x, y])


@dataclass
class Prism:
    """World-placed vertical prism."""
    polygon: np.ndarray  # (K, 2) CCW
    base_z: float
    top_z: float
    label: int
    object_id: int

    def halfspaces(self):
        """Outward normals and offsets: inside iff n . x <= c for every row."""
        p = self.polygon
        e = np.roll(p, -1, axis=0) - p
        n = np.column_stack([e[:, 1], -e[:, 0]])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        normals = np.vstack([np.column_stack([n, np.zeros(len(n))]), [[0, 0, 1.0], [0, 0, -1.0]]])
        offsets = np.concatenate([np.einsum("ij,ij->i", n, p), [self.top_z, -self.base_z]])
        return normals, offsets

    def contains(self, pts, tol=1e-9):
        n, c = self.halfspaces()
        return np.all(pts @ n.T <= c + tol, axis=1)

    def surface_distance(self, pts):
        """Signed distance to the nearest bounding plane (0 on the surface for points on a face)."""
        n, c = self.halfspaces()
        return np.max(pts @ n.T - c, axis=1)


@dataclass
class SceneObject:
    id: int
    cls: str
    footprint: np.ndarray
    height: float
    poses: list  # per traversal: (x, y, phi) or None
    base_z: float = 0.0

    def __post_init__(self):
        self.footprint = _convex_ccw(self.footprint)
        if self.height <= 0:
            raise ValueError(f"object {self.id}: height must be positive")

    def prism(self, traversal, table: ClassTable):
        pose = self.poses[traversal]
        if pose is None:
            return None
        return Prism(_place(self.footprint, *pose), self.base_z, self.base_z + self.height,
                     table.id_of(self.cls), self.id)


@dataclass
class Mover:
    id: int
    cls: str
    footprint: np.ndarray
    height: float
    traversal: int
    start: tuple
    velocity: tuple
    t_start: float = 0.0
    t_stop: float = math.inf
    base_z: float = 0.0

    def __post_init__(self):
        self.footprint = _convex_ccw(self.footprint)

    def pose_at(self, t):
        dt = min(max(t, self.t_start), self.t_stop) - self.t_start
        return (self.start[0] + self.velocity[0] * dt, self.start[1] + self.velocity[1] * dt, self.start[2])

    def prism(self, t, table: ClassTable):
        return Prism(_place(self.footprint, *self.pose_at(t)), self.base_z, self.base_z + self.height,
                     table.id_of(self.cls), self.id)


@dataclass
class TrajectoryScript:
    waypoints: list  # (t, Pose), strictly increasing t
    frame_rate: float

    def __post_init__(self):
        ts = [w[0] for w in self.waypoints]
        if len(ts) < 1 or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("waypoint times must be strictly increasing")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")

    def sample(self):
        """Poses at every frame time from the first to the last waypoint."""
        ts = np.array([w[0] for w in self.waypoints], dtype=float)
        n = int(math.floor((ts[-1] - ts[0]) * self.frame_rate + 1e-9)) + 1
        times = ts[0] + np.arange(n) / self.frame_rate
        if len(ts) == 1:
            return [(float(ts[0]), self.waypoints[0][1])]
        trans = np.array([w[1].translation for w in self.waypoints])
        rots = Rotation.from_quat(np.array([w[1].quaternion for w in self.waypoints]))
        slerp = Slerp(ts, rots)
        out = []
        for t in times:
            t = min(t, ts[-1])
            j = min(np.searchsorted(ts, t, side="right") - 1, len(ts) - 2)
            a = (t - ts[j]) / (ts[j + 1] - ts[j])
            p = (1 - a) * trans[j] + a * trans[j + 1]
            q = slerp([t]).as_quat()[0]
            out.append((float(t), Pose(p, q / np.linalg.norm(q))))
        return out


@dataclass
class SceneScript:
    objects: list
    traversals: int
    camera: CameraModel
    trajectories: list = field(default_factory=list)
    movers: list = field(default_factory=list)
    noise_std: float = 0.01
    label_flip: float = 0.0
    seed: int = 0
    hfov_deg: float | None = None
    table: ClassTable = field(default_factory=ClassTable)

    def __post_init__(self):
        if self.traversals < 1:
            raise ValueError("need at least one traversal")
        for o in self.objects:
            if len(o.poses) != self.traversals:
                raise ValueError(f"object {o.id}: expected {self.traversals} poses")
        ids = [o.id for o in self.objects] + [m.id for m in self.movers]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")

    def prisms(self, traversal, t=0.0):
        if not 0 <= traversal < self.traversals:
            raise ValueError(f"traversal {traversal} out of range")
        out = [p for p in (o.prism(traversal, self.table) for o in self.objects) if p is not None]
        out += [m.prism(t, self.table) for m in self.movers if m.traversal == traversal]
        return out

    # --- serialization -------------------------------------------------

    def to_dict(self):
        cam = self.camera
        d = {
            "traversals": self.traversals,
            "seed": self.seed,
            "noise_std": self.noise_std,
            "label_flip": self.label_flip,
            "frame_rate": self.trajectories[0].frame_rate if self.trajectories else 1.0,
            "camera": {"width": cam.width, "height": cam.height, "fx": cam.fx, "fy": cam.fy,
                       "cx": cam.cx, "cy": cam.cy, "max_range": cam.max_range},
            "objects": [],
        }
        for o in self.objects:
            d["objects"].append({
                "id": o.id, "class": o.cls, "footprint": o.footprint.tolist(), "height": o.height,
                "base_z": o.base_z,
                "poses": [list(p) if p is not None else [0.0, 0.0, 0.0] for p in o.poses],
                "absent": [k for k, p in enumerate(o.poses) if p is None],
            })
        if self.movers:
            d["movers"] = [{
                "id": m.id, "class": m.cls, "footprint": m.footprint.tolist(), "height": m.height,
                "base_z": m.base_z, "traversal": m.traversal, "start": list(m.start),
                "velocity": list(m.velocity), "t_start": m.t_start, "t_stop": m.t_stop,
            } for m in self.movers]
        d["trajectories"] = [{
            "traversal": k,
            "waypoints": [[t] + pose.translation.tolist() + pose.quaternion.tolist() for t, pose in tr.waypoints],
        } for k, tr in enumerate(self.trajectories)]
        return d

    @classmethod
    def from_dict(cls, d, table: ClassTable | None = None, source="<scene>"):
        try:
            c = d["camera"]
            if "hfov_deg" in c:
                camera = CameraModel.from_fov(int(c["width"]), int(c["height"]), float(c["hfov_deg"]),
                                              float(c.get("max_range", 6.0)))
            else:
                camera = CameraModel(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                                     int(c["width"]), int(c["height"]), float(c.get("max_range", 6.0)))
            n_trav = int(d["traversals"])
            objects = []
            for o in d.get("objects", []):
                absent = set(o.get("absent", []))
                poses = [None if k in absent else tuple(float(v) for v in p) for k, p in enumerate(o["poses"])]
                objects.append(SceneObject(int(o["id"]), str(o["class"]), np.array(o["footprint"], float),
                                           float(o["height"]), poses, float(o.get("base_z", 0.0))))
            movers = [Mover(int(m["id"]), str(m["class"]), np.array(m["footprint"], float), float(m["height"]),
                            int(m["traversal"]), tuple(float(v) for v in m["start"]),
                            tuple(float(v) for v in m["velocity"]), float(m.get("t_start", 0.0)),
                            float(m.get("t_stop", math.inf)), float(m.get("base_z", 0.0)))
                      for m in d.get("movers", [])]
            rate = float(d.get("frame_rate", 1.0))
            trajs = [None] * n_trav
            for tr in d.get("trajectories", []):
                wps = [(float(w[0]), Pose(w[1:4], np.array(w[4:8]) / np.linalg.norm(w[4:8])))
                       for w in tr["waypoints"]]
                trajs[int(tr["traversal"])] = TrajectoryScript(wps, rate)
            trajs = [t for t in trajs if t is not None]
            return cls(objects, n_trav, camera, trajs, movers, float(d.get("noise_std", 0.01)),
                       float(d.get("label_flip", 0.0)), int(d.get("seed", 0)), table=table or ClassTable())
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ValueError(f"{source}: malformed scene: {exc!r}") from None

    def save(self, path):
        with open(path, "w") as fh:
            toml.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path, table: ClassTable | None = None):
        try:
            data = toml.load(str(path))
        except (OSError, toml.TomlDecodeError) as exc:
            raise ValueError(f"{path}: {exc}") from None
        return cls.from_dict(data, table, str(path))


# ---------------------------------------------------------------------------
# rendering


def cast_rays(origin, dirs, prisms, floor_label=0):
    """Nearest hit parameter ``t`` (ray = origin + t * dir) and label per ray; ``inf`` on a miss."""
    origin = np.asarray(origin, dtype=float)
    n = len(dirs)
    best = np.full(n, np.inf)
    labels = np.full(n, -1, dtype=np.int64)
    down = dirs[:, 2] < 0
    if origin[2] > 0:
        t = np.where(down, -origin[2] / np.where(down, dirs[:, 2], -1.0), np.inf)
        best = np.where(down, t, best)
        labels[down] = floor_label
    for prism in prisms:
        normals, offsets = prism.halfspaces()
        denom = dirs @ normals.T
        num = offsets - normals @ origin
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = num / denom
        enter = np.where(denom < 0, ratio, -np.inf).max(axis=1)
        leave = np.where(denom > 0, ratio, np.inf).min(axis=1)
        parallel_out = np.any((denom == 0) & (num < 0), axis=1)
        hit = (~parallel_out) & (enter <= leave) & (enter > _EPS) & (enter < best)
        best[hit] = enter[hit]
        labels[hit] = prism.label
    return best, labels


def render_frame(scene: SceneScript, traversal: int, camera_pose: Pose, camera: CameraModel | None = None,
                 noise_std: float | None = None, rng=None, t: float = 0.0) -> LabeledCloud:
    """Labeled camera-frame points from one pinhole depth image; misses are omitted."""
    camera = camera or scene.camera
    noise_std = scene.noise_std if noise_std is None else noise_std
    rays_cam = camera.pixel_rays()
    rot = camera_pose.rotation
    dirs = rays_cam @ rot.T
    tt, labels = cast_rays(camera_pose.translation, dirs, scene.prisms(traversal, t),
                           scene.table.id_of("floor"))
    keep = np.isfinite(tt) & (tt <= camera.max_range)
    tt, labels, rays_cam = tt[keep], labels[keep], rays_cam[keep]
    if noise_std > 0 or scene.label_flip > 0:
        rng = rng if rng is not None else np.random.default_rng(scene.seed)
    if noise_std > 0:
        tt = tt + rng.normal(0.0, noise_std, len(tt)) / np.linalg.norm(rays_cam, axis=1)
    if scene.label_flip > 0:
        flip = rng.random(len(labels)) < scene.label_flip
        ids = np.array([c.id for c in scene.table])
        labels[flip] = rng.choice(ids, int(flip.sum()))
    return LabeledCloud(rays_cam * tt[:, None], labels)


# ---------------------------------------------------------------------------
# ground truth


def _segment_samples(a, b, step):
    n = max(int(math.ceil(np.linalg.norm(b - a) / step)), 1) + 1
    s = np.linspace(0.0, 1.0, n)[:, None]
    return a + s * (b - a)


def _face_samples(prism: Prism, step, include_bottom):
    pts = []
    z = np.linspace(prism.base_z, prism.top_z, max(int(math.ceil((prism.top_z - prism.base_z) / step)), 1) + 1)
    poly = prism.polygon
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        seg = _segment_samples(a, b, step)
        pts.append(np.column_stack([np.repeat(seg, len(z), axis=0), np.tile(z, len(seg))]))
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    gx = np.linspace(lo[0], hi[0], max(int(math.ceil((hi[0] - lo[0]) / step)), 1) + 1)
    gy = np.linspace(lo[1], hi[1], max(int(math.ceil((hi[1] - lo[1]) / step)), 1) + 1)
    xx, yy = np.meshgrid(gx, gy)
    cap = np.column_stack([xx.ravel(), yy.ravel()])
    e = np.roll(poly, -1, axis=0) - poly
    n = np.column_stack([e[:, 1], -e[:, 0]])
    inside = np.all(np.einsum("mkj,kj->mk", cap[:, None, :] - poly[None], n) <= 1e-12, axis=1)
    cap = cap[inside]
    edge = np.vstack([_segment_samples(a, b, step) for a, b in zip(poly, np.roll(poly, -1, axis=0))])
    cap = np.vstack([cap, edge])
    pts.append(np.column_stack([cap, np.full(len(cap), prism.top_z)]))
    if include_bottom:
        pts.append(np.column_stack([cap, np.full(len(cap), prism.base_z)]))
    return np.vstack(pts)


def prism_surface_voxels(prism: Prism, voxel_size: float) -> np.ndarray:
    """Voxels touched by the prism's faces; the bottom face is skipped when it rests on the ground."""
    pts = _face_samples(prism, voxel_size / 4.0, include_bottom=prism.base_z > 0)
    return np.unique(np.floor(pts / voxel_size).astype(np.int64), axis=0)


def ground_truth_voxels(scene: SceneScript, traversal: int, voxel_size: float, t: float | None = None) -> np.ndarray:
    """Surface voxels of every object present in ``traversal``.

    Movers are placed at time ``t``; by default at the end of the traversal's trajectory.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if t is None:
        t = scene.trajectories[traversal].waypoints[-1][0] if traversal < len(scene.trajectories) else 0.0
    vox = [prism_surface_voxels(p, voxel_size) for p in scene.prisms(traversal, t)]
    if not vox:
        return np.empty((0, 3), dtype=np.int64)
    return np.unique(np.vstack(vox), axis=0)


# ---------------------------------------------------------------------------
# dataset format


def _frame_rng(seed, frame):
    return np.random.default_rng([seed, frame])


def write_frame(path, cloud: LabeledCloud):
    with open(path, "w") as fh:
        for (x, y, z), lab in zip(cloud.points.tolist(), cloud.labels.tolist()):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {lab}\n")


def read_frame(path) -> LabeledCloud:
    try:
        data = np.loadtxt(path, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ValueError(f"{path}: {exc}") from None
    if data.size == 0:
        return LabeledCloud.empty()
    if data.shape[1] != 4:
        raise ValueError(f"{path}: expected 'x y z label' per line")
    return LabeledCloud(data[:, :3], data[:, 3].astype(np.int64))


def generate_dataset(scene: SceneScript, out_dir, voxel_size: float = 0.1):
    """Render every traversal and write the on-disk dataset. Returns the manifest rows."""
    if len(scene.trajectories) != scene.traversals:
        raise ValueError("need one trajectory per traversal")
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "gt"), exist_ok=True)
    manifest = []
    frame = 0
    try:
        with open(os.path.join(out_dir, "poses.csv"), "w") as poses:
            poses.write("frame,t,px,py,pz,qx,qy,qz,qw\n")
            for k, traj in enumerate(scene.trajectories):
                first = frame
                for t, pose in traj.sample():
                    cloud = render_frame(scene, k, pose, rng=_frame_rng(scene.seed, frame), t=t)
                    write_frame(os.path.join(out_dir, "frames", f"frame_{frame:06d}.txt"), cloud)
                    vals = [t, *pose.translation, *pose.quaternion]
                    poses.write(f"{frame}," + ",".join(f"{v:.9f}" for v in vals) + "\n")
                    frame += 1
                manifest.append((k, first, frame - 1))
                gt = ground_truth_voxels(scene, k, voxel_size)
                with open(os.path.join(out_dir, "gt", f"traversal_{k:02d}_voxels.txt"), "w") as fh:
                    for i, j, kk in gt.tolist():
                        fh.write(f"{i} {j} {kk}\n")
        with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
            for k, a, b in manifest:
                fh.write(f"traversal {k} {a} {b}\n")
        data = scene.to_dict()
        data["gt_voxel_size"] = voxel_size
        with open(os.path.join(out_dir, "scene.toml"), "w") as fh:
            toml.dump(data, fh)
    except OSError as exc:
        raise OSError(f"writing dataset under {out_dir}: {exc}") from exc
    return manifest


@dataclass
class Dataset:
    root: str
    manifest: list
    poses: list  # (frame, t, Pose)
    scene: SceneScript
    gt_voxel_size: float

    def traversal_of(self, frame):
        for k, a, b in self.manifest:
            if a <= frame <= b:
                return k
        raise ValueError(f"frame {frame} not in any traversal")

    def frame(self, index) -> LabeledCloud:
        return read_frame(os.path.join(self.root, "frames", f"frame_{index:06d}.txt"))

    def ground_truth(self, traversal) -> np.ndarray:
        from .tsdf import read_voxels
        return read_voxels(os.path.join(self.root, "gt", f"traversal_{traversal:02d}_voxels.txt"))


def load_dataset(root, table: ClassTable | None = None) -> Dataset:
    path = os.path.join(root, "manifest.txt")
    manifest = []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 4 or parts[0] != "traversal":
                    raise ValueError(f"{path}:{lineno}: expected 'traversal <k> <first> <last>'")
                manifest.append(tuple(int(p) for p in parts[1:]))
    except OSError as exc:
        raise ValueError(f"{path}: {exc}") from None
    path = os.path.join(root, "poses.csv")
    poses = []
    try:
        with open(path) as fh:
            header = fh.readline().strip()
            if header != "frame,t,px,py,pz,qx,qy,qz,qw":
                raise ValueError(f"{path}: unexpected header {header!r}")
            for lineno, line in enumerate(fh, 2):
                vals = line.strip().split(",")
                if len(vals) != 9:
                    raise ValueError(f"{path}:{lineno}: expected 9 fields")
                q = np.array(vals[5:9], dtype=float)
                poses.append((int(vals[0]), float(vals[1]), Pose(np.array(vals[2:5], dtype=float), q / np.linalg.norm(q))))
    except OSError as exc:
        raise ValueError(f"{path}: {exc}") from None
    path = os.path.join(root, "scene.toml")
    scene = SceneScript.load(path, table)
    gt_vs = toml.load(path).get("gt_voxel_size")
    if gt_vs is None:
        raise ValueError(f"{path}: missing gt_voxel_size")
    return Dataset(str(root), manifest, poses, scene, float(gt_vs))
