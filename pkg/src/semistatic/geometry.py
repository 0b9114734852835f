"""Point-cloud front end: from a labeled world-frame cloud to per-object observations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial.transform import Rotation

from .poses import Pose, wrap_angle

MIN_EXTENT = 1e-6


class UnknownClass(KeyError):
    pass


@dataclass(frozen=True)
class SemanticClass:
    id: int
    name: str
    stationary: int
    v_class: float


DEFAULT_CLASSES = (
    SemanticClass(0, "floor", 1, 0.9),
    SemanticClass(1, "box", 1, 0.9),
    SemanticClass(2, "fence", 1, 0.9),
    SemanticClass(3, "shelf", 1, 0.9),
    SemanticClass(4, "robot", 0, 0.2),
)


class ClassTable:
    def __init__(self, classes=DEFAULT_CLASSES):
        self._by_id = {c.id: c for c in classes}
        self._by_name = {c.name: c for c in classes}
        if len(self._by_id) != len(classes) or len(self._by_name) != len(classes):
            raise ValueError("class ids and names must be unique")

    def __iter__(self):
        return iter(sorted(self._by_id.values(), key=lambda c: c.id))

    def get(self, c) -> SemanticClass:
        table = self._by_name if isinstance(c, str) else self._by_id
        try:
            return table[c if isinstance(c, str) else int(c)]
        except (KeyError, ValueError, TypeError):
            raise UnknownClass(f"unknown semantic class {c!r}") from None

    def id_of(self, name: str) -> int:
        return self.get(name).id


def stationarity_class(c, table: ClassTable | None = None) -> int:
    """0 for dynamic classes (e.g. robot), 1 for static ones (shelf, box, fence)."""
    return (table or ClassTable()).get(c).stationary


@dataclass
class LabeledCloud:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels differ in length")

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls):
        return cls(np.empty((0, 3)), np.empty(0, dtype=np.int64))

    def subset(self, idx) -> "LabeledCloud":
        return LabeledCloud(self.points[idx], self.labels[idx])

    @staticmethod
    def concat(clouds) -> "LabeledCloud":
        clouds = list(clouds)
        if not clouds:
            return LabeledCloud.empty()
        return LabeledCloud(np.vstack([c.points for c in clouds]), np.concatenate([c.labels for c in clouds]))


@dataclass(frozen=True)
class GeometryConfig:
    ground_z: float | None = 0.0
    ground_band: float = 0.05
    sor_k: int = 8
    sor_std_ratio: float = 3.0
    sor_min_dist: float = 0.15
    plane_inlier_dist: float = 0.03
    min_plane_points: int = 200
    max_planes: int = 6
    ransac_iters: int = 60
    seed: int = 0
    cluster_radius: float = 0.2
    cluster_min_points: int = 50
    merge_margin: float = 0.0


@dataclass(frozen=True)
class IcpConfig:
    max_iter: int = 50
    corr_dist: float = 0.1
    search_dist: float = 0.3
    tol: float = 1e-3
    normal_angle_deg: float = 45.0
    normal_candidates: int = 8
    patience: int = 5
    rel_tol: float = 1e-3
    damping: float = 1e-4
    normal_k: int = 10
    min_overlap_points: int = 10


def modal_label(labels) -> int:
    """Most frequent label; the lowest id wins ties."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("no labels to vote over")
    return int(np.argmax(np.bincount(labels)))


# ---------------------------------------------------------------------------
# filtering


def _fit_plane(points):
    c = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - c, full_matrices=False)
    return vt[-1], c


def _ransac_plane(points, iters, inlier_dist, rng, candidate_mask=None):
    n = len(points)
    best = None
    best_count = -1
    for _ in range(iters):
        tri = points[rng.choice(n, 3, replace=False)]
        normal = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal /= norm
        if candidate_mask is not None and not candidate_mask(normal):
            continue
        dist = np.abs((points - tri[0]) @ normal)
        count = int(np.count_nonzero(dist <= inlier_dist))
        if count > best_count:
            best_count = count
            best = (normal, tri[0])
    if best is None:
        return None
    normal, anchor = best
    inliers = np.abs((points - anchor) @ normal) <= inlier_dist
    if inliers.sum() >= 3:
        normal, anchor = _fit_plane(points[inliers])
        inliers = np.abs((points - anchor) @ normal) <= inlier_dist
    return normal, anchor, inliers


def remove_ground_and_outliers(cloud: LabeledCloud, cfg: GeometryConfig = GeometryConfig()) -> LabeledCloud:
    if len(cloud) == 0:
        return cloud
    pts = cloud.points
    if cfg.ground_z is not None:
        keep = pts[:, 2] > cfg.ground_z + cfg.ground_band
    else:
        keep = np.ones(len(pts), bool)
        if len(pts) >= 3:
            rng = np.random.default_rng(cfg.seed)
            found = _ransac_plane(pts, cfg.ransac_iters, cfg.ground_band, rng,
                                  candidate_mask=lambda n: abs(n[2]) > 0.9)
            if found is not None and found[2].sum() >= cfg.min_plane_points:
                normal, anchor, _ = found
                if normal[2] < 0:
                    normal = -normal
                keep = (pts - anchor) @ normal > cfg.ground_band
    cloud = cloud.subset(np.flatnonzero(keep))
    return statistical_outlier_filter(cloud, cfg.sor_k, cfg.sor_std_ratio, cfg.sor_min_dist)


def statistical_outlier_filter(cloud: LabeledCloud, k=8, std_ratio=3.0, min_dist=0.15) -> LabeledCloud:
    """Drop points whose mean k-NN distance is anomalously large.

    The cut is ``median + std_ratio * robust_std`` but never below ``min_dist``,
    so sparse far-range surfaces are not mistaken for noise.
    """
    n = len(cloud)
    if n <= 1:
        return LabeledCloud.empty() if n == 1 and k > 0 else cloud
    kk = min(k, n - 1)
    d, _ = cKDTree(cloud.points).query(cloud.points, kk + 1)
    mean_d = d[:, 1:].mean(axis=1)
    med = np.median(mean_d)
    mad = 1.4826 * np.median(np.abs(mean_d - med))
    cut = max(med + std_ratio * mad, min_dist)
    return cloud.subset(np.flatnonzero(mean_d <= cut))


def _components(points, radius, labels=None):
    n = len(points)
    if n == 0:
        return 0, np.empty(0, dtype=np.int64)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    if labels is not None and len(pairs):
        pairs = pairs[labels[pairs[:, 0]] == labels[pairs[:, 1]]]
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) else coo_matrix((n, n))
    return connected_components(graph, directed=False)


def enforce_plane_semantics(cloud: LabeledCloud, cfg: GeometryConfig = GeometryConfig()) -> LabeledCloud:
    """Relabel each extracted plane segment with its majority label.

    Planes are extracted sequentially by RANSAC; voting runs per connected piece
    of a plane's inliers so that unrelated coplanar objects keep their labels.
    """
    n = len(cloud)
    labels = cloud.labels.copy()
    if n < max(cfg.min_plane_points, 3):
        return LabeledCloud(cloud.points.copy(), labels)
    rng = np.random.default_rng(cfg.seed)
    remaining = np.arange(n)
    for _ in range(cfg.max_planes):
        if len(remaining) < cfg.min_plane_points:
            break
        found = _ransac_plane(cloud.points[remaining], cfg.ransac_iters, cfg.plane_inlier_dist, rng)
        if found is None:
            break
        inliers = remaining[found[2]]
        if len(inliers) < cfg.min_plane_points:
            break
        n_comp, comp = _components(cloud.points[inliers], cfg.cluster_radius)
        for c in range(n_comp):
            members = inliers[comp == c]
            if len(members) >= cfg.min_plane_points:
                labels[members] = modal_label(cloud.labels[members])
        remaining = remaining[~found[2]]
    return LabeledCloud(cloud.points.copy(), labels)


def euclidean_cluster(cloud: LabeledCloud, radius: float, min_points: int) -> list[np.ndarray]:
    """Connected components of the same-label radius graph, as sorted index arrays."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    n_comp, comp = _components(cloud.points, radius, cloud.labels)
    if n_comp == 0:
        return []
    order = np.argsort(comp, kind="stable")
    bounds = np.r_[0, np.flatnonzero(np.diff(comp[order])) + 1, len(order)]
    clusters = [order[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b - a >= min_points]
    clusters.sort(key=lambda idx: idx[0])
    return clusters


def voxel_downsample(cloud: LabeledCloud, leaf: float, normals=None):
    """Centroid per occupied leaf voxel, carrying the voxel's majority label.

    With ``normals`` the per-voxel mean direction is returned alongside.
    """
    if len(cloud) == 0:
        return cloud if normals is None else (cloud, np.zeros((0, 3)))
    ijk = np.floor(cloud.points / leaf).astype(np.int64)
    _, inv = np.unique(ijk, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    m = inv.max() + 1
    counts = np.bincount(inv, minlength=m).astype(float)
    mean = lambda x: np.column_stack([np.bincount(inv, weights=x[:, a], minlength=m) for a in range(3)])
    pts = mean(cloud.points) / counts[:, None]
    n_lab = int(cloud.labels.max()) + 1
    votes = np.zeros((m, n_lab), dtype=np.int64)
    np.add.at(votes, (inv, cloud.labels), 1)
    out = LabeledCloud(pts, votes.argmax(axis=1))
    if normals is None:
        return out
    nrm = mean(np.asarray(normals, dtype=float))
    length = np.linalg.norm(nrm, axis=1, keepdims=True)
    return out, nrm / np.where(length > 1e-12, length, 1.0)


# ---------------------------------------------------------------------------
# boxes and observations


@dataclass(frozen=True)
class BoundingBox4DoF:
    center: np.ndarray
    extents: np.ndarray
    heading: float

    def corners_xy(self):
        c, s = math.cos(self.heading), math.sin(self.heading)
        hx, hy = self.extents[0] / 2.0, self.extents[1] / 2.0
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def contains(self, points, margin=0.0):
        p = np.asarray(points, dtype=float) - self.center
        c, s = math.cos(self.heading), math.sin(self.heading)
        local = np.column_stack([c * p[:, 0] + s * p[:, 1], -s * p[:, 0] + c * p[:, 1], p[:, 2]])
        return np.all(np.abs(local) <= self.extents / 2.0 + margin, axis=1)


def _min_area_heading(xy):
    hull = xy[ConvexHull(xy).vertices]
    edges = np.roll(hull, -1, axis=0) - hull
    best_area, best_angle = math.inf, 0.0
    for angle in np.arctan2(edges[:, 1], edges[:, 0]):
        c, s = math.cos(angle), math.sin(angle)
        u = hull @ np.array([c, s])
        w = hull @ np.array([-s, c])
        area = np.ptp(u) * np.ptp(w)
        if area < best_area - 1e-12:
            best_area, best_angle = area, angle
    # a rectangle is symmetric under quarter turns
    return float(np.mod(best_angle + math.pi / 4, math.pi / 2) - math.pi / 4)


def _canonical_heading(phi):
    phi = float(np.mod(phi + math.pi / 2, math.pi) - math.pi / 2)
    return math.pi / 2 if phi <= -math.pi / 2 else phi


def fit_bbox_pca(points, isotropy_tol=1e-6) -> BoundingBox4DoF:
    """z-aligned box whose x axis follows the major principal axis of the flattened points.

    Heading lies in (-pi/2, pi/2]. When every point shares one xy location the
    principal axis is undefined and an axis-aligned box is returned; when the
    flattened spread is isotropic the heading comes from the minimum-area
    rectangle of the hull instead.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty cluster")
    xy = pts[:, :2] - pts[:, :2].mean(axis=0)
    cov = xy.T @ xy / max(len(pts), 1)
    evals, evecs = np.linalg.eigh(cov)
    scale = max(evals[1], 0.0)
    if scale <= 1e-18 or len(pts) < 3:
        phi = 0.0
    elif evals[1] - evals[0] <= isotropy_tol * scale and evals[0] > 1e-12 * scale:
        phi = _min_area_heading(xy)
    else:
        major = evecs[:, 1]
        phi = _canonical_heading(math.atan2(major[1], major[0]))
    c, s = math.cos(phi), math.sin(phi)
    u = pts[:, 0] * c + pts[:, 1] * s
    w = -pts[:, 0] * s + pts[:, 1] * c
    lo = np.array([u.min(), w.min(), pts[:, 2].min()])
    hi = np.array([u.max(), w.max(), pts[:, 2].max()])
    mid = (lo + hi) / 2.0
    center = np.array([mid[0] * c - mid[1] * s, mid[0] * s + mid[1] * c, mid[2]])
    extents = np.maximum(hi - lo, MIN_EXTENT)
    return BoundingBox4DoF(center, extents, phi)


def boxes_overlap(a: BoundingBox4DoF, b: BoundingBox4DoF, margin: float = 0.0) -> bool:
    """Separating-axis test for z-aligned oriented boxes."""
    if abs(a.center[2] - b.center[2]) > (a.extents[2] + b.extents[2]) / 2.0 + margin:
        return False
    ca, cb = a.corners_xy(), b.corners_xy()
    for box in (ca, cb):
        for i in range(2):
            edge = box[(i + 1) % 4] - box[i]
            axis = np.array([-edge[1], edge[0]])
            norm = np.linalg.norm(axis)
            if norm == 0:
                continue
            axis /= norm
            pa, pb = ca @ axis, cb @ axis
            if pa.max() + margin < pb.min() or pb.max() + margin < pa.min():
                return False
    return True


@dataclass
class Observation:
    cloud: LabeledCloud
    bbox: BoundingBox4DoF
    semantic_class: int
    stationarity: int

    @property
    def position(self):
        return self.bbox.center

    @property
    def heading(self):
        return self.bbox.heading


def make_observation(cloud: LabeledCloud, table: ClassTable) -> Observation:
    label = modal_label(cloud.labels)
    cloud = LabeledCloud(cloud.points, np.full(len(cloud), label, dtype=np.int64))
    return Observation(cloud, fit_bbox_pca(cloud.points), label, stationarity_class(label, table))


def merge_overlapping(observations, table: ClassTable, margin: float = 0.0) -> list[Observation]:
    """Merge the transitive closure of overlapping boxes; labels are re-voted."""
    obs = list(observations)
    n = len(obs)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if boxes_overlap(obs[i].bbox, obs[j].bbox, margin):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    out = []
    for root in sorted(groups):
        members = groups[root]
        if len(members) == 1:
            out.append(obs[members[0]])
        else:
            out.append(make_observation(LabeledCloud.concat(obs[i].cloud for i in members), table))
    return out


# ---------------------------------------------------------------------------
# registration


@dataclass
class IcpResult:
    transform: Pose
    translation: np.ndarray
    heading: float
    dissimilarity: float
    p_z_camera: float
    converged: bool
    iterations: int = 0
    extra: dict = field(default_factory=dict)


def estimate_normals(points, k=10, viewpoint=None):
    """Per-point normals from a k-NN plane fit, oriented toward ``viewpoint``."""
    pts = np.asarray(points, dtype=float)
    kk = min(k, len(pts))
    _, idx = cKDTree(pts).query(pts, kk)
    idx = idx.reshape(len(pts), kk)
    nb = pts[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    if viewpoint is not None:
        flip = np.einsum("ij,ij->i", normals, np.asarray(viewpoint, dtype=float) - pts) < 0
        normals[flip] *= -1
    return normals


def icp_point_to_plane(source, target, init: Pose | None = None, cfg: IcpConfig = IcpConfig(),
                       camera_pose: Pose | None = None, target_normals=None,
                       region: BoundingBox4DoF | None = None, source_normals=None) -> IcpResult:
    """Align ``source`` onto ``target`` minimising point-to-plane residuals (6-DoF).

    ``translation`` is the displacement of the source centroid and ``heading`` the
    yaw of the rotation; ``p_z_camera`` is the optical-axis component of the
    displacement from the aligned target back to the source, positive when the
    source lies farther from the camera. ``dissimilarity`` is the fraction of
    source points left farther than ``corr_dist`` from the target; with ``region``
    only source points inside that box (grown by ``corr_dist``) take part in the
    fit and in the count, so parts of the source the target has never covered
    neither drag the alignment nor count against it.
    Converges when the step falls below ``tol`` or the mean squared residual
    changes by less than ``rel_tol`` relative, or when it has not improved for
    ``patience`` iterations (the best pose seen is kept). With ``source_normals`` each source
    point pairs with the nearest of ``normal_candidates`` target neighbours whose
    normal lies within ``normal_angle_deg``, which keeps a face from latching onto a
    perpendicular one; source points with no such neighbour are left out of ε.
    """
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    tgt = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(src) < 10 or len(tgt) < 10:
        raise ValueError("ICP needs at least 10 points in each cloud")
    pose = init or Pose.identity()
    rot, trans = pose.rotation, pose.translation.copy()
    tree = cKDTree(tgt)
    normals = target_normals if target_normals is not None else estimate_normals(
        tgt, cfg.normal_k, None if camera_pose is None else camera_pose.translation)

    cos_gate = math.cos(math.radians(cfg.normal_angle_deg))
    oriented = target_normals is not None or camera_pose is not None

    def match(cur, rot):
        """Nearest target point within ``search_dist`` whose normal agrees with the source normal."""
        if source_normals is None:
            d, j = tree.query(cur, distance_upper_bound=cfg.search_dist)
            return d, np.minimum(j, len(tgt) - 1)
        k = min(cfg.normal_candidates, len(tgt))
        d, j = tree.query(cur, k, distance_upper_bound=cfg.search_dist)
        d, j = d.reshape(len(cur), k), np.minimum(j.reshape(len(cur), k), len(tgt) - 1)
        agree = np.einsum("nj,nkj->nk", source_normals @ rot.T, normals[j])
        d = np.where((agree if oriented else np.abs(agree)) >= cos_gate, d, np.inf)
        best = d.argmin(axis=1)
        rows = np.arange(len(cur))
        return d[rows, best], j[rows, best]

    converged = False
    it = 0
    prev_err = np.inf
    best = (np.inf, rot, trans)
    stale = 0
    for it in range(1, cfg.max_iter + 1):
        cur = src @ rot.T + trans
        d, j = match(cur, rot)
        ok = np.isfinite(d)
        if region is not None:
            ok &= region.contains(cur, cfg.corr_dist)
        if ok.sum() < 6:
            break
        p, m, nrm = cur[ok], tgt[j[ok]], normals[j[ok]]
        pivot = p.mean(axis=0)
        a = np.hstack([np.cross(p - pivot, nrm), nrm])
        b = -np.einsum("ij,ij->i", p - m, nrm)
        # a light ridge keeps weakly constrained directions (sliding along a wall) from drifting
        ata = a.T @ a
        ata[np.diag_indices(6)] += cfg.damping * np.trace(ata) / 6.0
        x = np.linalg.solve(ata, a.T @ b)
        err = float(np.mean(b * b))
        if err < best[0] * (1.0 - cfg.rel_tol):
            best, stale = (err, rot, trans), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                # correspondences are cycling; settle on the best pose visited
                _, rot, trans = best
                converged = True
                break
        d_rot = Rotation.from_rotvec(x[:3]).as_matrix()
        rot = d_rot @ rot
        trans = d_rot @ (trans - pivot) + pivot + x[3:]
        small_step = np.linalg.norm(x[:3]) < cfg.tol and np.linalg.norm(x[3:]) < cfg.tol
        if small_step or (np.isfinite(prev_err) and abs(prev_err - err) <= cfg.rel_tol * prev_err):
            converged = True
            break
        prev_err = err

    # re-orthonormalise accumulated rotation
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    transform = Pose.from_matrix(rot, trans)
    centroid = src.mean(axis=0)
    disp = rot @ centroid + trans - centroid
    heading = wrap_angle(math.atan2(rot[1, 0], rot[0, 0]))
    eps = 1.0
    if converged:
        aligned = src @ rot.T + trans
        d, _ = match(aligned, rot)
        keep = np.ones(len(aligned), bool)
        if region is not None:
            keep &= region.contains(aligned, cfg.corr_dist)
        if source_normals is not None:
            # surfaces the target has never seen from this side carry no evidence either way
            keep &= np.isfinite(d)
        else:
            d, _ = tree.query(aligned)
        guarded = region is not None or source_normals is not None
        if keep.sum() >= (cfg.min_overlap_points if guarded else 1):
            eps = float(np.mean(d[keep] > cfg.corr_dist))
    p_z = 0.0
    if camera_pose is not None:
        p_z = float((camera_pose.rotation.T @ (-disp))[2])
    return IcpResult(transform, disp, heading, eps, p_z, converged, it)
