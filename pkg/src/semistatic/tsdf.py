"""Sparse truncated signed distance volumes.

Voxels are keyed by a packed int64 code of their integer index ``(i, j, k)``;
the grid keeps codes sorted so set operations and merges stay vectorized.
Values are positive in free space and negative behind the surface.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .poses import Pose

_BITS = 21
_OFFSET = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1
SURFACE_NEIGHBOURS = 4


class EmptyObservation(ValueError):
    pass


class NoOverlap(ValueError):
    pass


def encode(ijk) -> np.ndarray:
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3) + _OFFSET
    if np.any(ijk < 0) or np.any(ijk > _MASK):
        raise ValueError("voxel index out of encodable range")
    return (ijk[:, 0] << (2 * _BITS)) | (ijk[:, 1] << _BITS) | ijk[:, 2]


def decode(codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    out = np.empty((len(codes), 3), dtype=np.int64)
    out[:, 0] = (codes >> (2 * _BITS)) & _MASK
    out[:, 1] = (codes >> _BITS) & _MASK
    out[:, 2] = codes & _MASK
    return out - _OFFSET


def voxel_index(points, voxel_size, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    p = np.asarray(points, dtype=float) - np.asarray(origin, dtype=float)
    return np.floor(p / voxel_size).astype(np.int64)


class TsdfGrid:
    """Sparse TSDF with per-voxel weighted sdf sum, weight and semantic label."""

    def __init__(self, voxel_size: float, truncation: float, origin=(0.0, 0.0, 0.0)):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if truncation < voxel_size:
            raise ValueError("truncation must be at least one voxel")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.keys = np.empty(0, dtype=np.int64)
        self.sdf_sum = np.empty(0)
        self.weight = np.empty(0)
        self.labels = np.empty(0, dtype=np.int64)

    def __len__(self):
        return len(self.keys)

    def __repr__(self):
        return f"TsdfGrid(voxel_size={self.voxel_size}, truncation={self.truncation}, cells={len(self)})"

    def compatible(self, other: "TsdfGrid") -> bool:
        return (self.voxel_size == other.voxel_size and self.truncation == other.truncation
                and np.array_equal(self.origin, other.origin))

    def copy(self) -> "TsdfGrid":
        g = TsdfGrid(self.voxel_size, self.truncation, self.origin)
        g.keys = self.keys.copy()
        g.sdf_sum = self.sdf_sum.copy()
        g.weight = self.weight.copy()
        g.labels = self.labels.copy()
        return g

    @property
    def values(self) -> np.ndarray:
        return np.clip(self.sdf_sum / self.weight, -self.truncation, self.truncation)

    def indices(self) -> np.ndarray:
        return decode(self.keys)

    def centers(self, codes=None) -> np.ndarray:
        ijk = self.indices() if codes is None else decode(codes)
        return (ijk + 0.5) * self.voxel_size + self.origin

    def lookup(self, codes):
        """Values and weights at ``codes``; absent cells report weight 0."""
        codes = np.asarray(codes, dtype=np.int64)
        pos = np.searchsorted(self.keys, codes)
        pos_c = np.minimum(pos, max(len(self.keys) - 1, 0))
        found = (pos < len(self.keys)) & (self.keys[pos_c] == codes) if len(self.keys) else np.zeros(len(codes), bool)
        vals = np.zeros(len(codes))
        wts = np.zeros(len(codes))
        if found.any():
            vals[found] = self.values[pos_c[found]]
            wts[found] = self.weight[pos_c[found]]
        return vals, wts

    def accumulate(self, codes, sdf, labels, weight: float = 1.0):
        """Fuse raw samples: each adds ``weight`` and ``weight * sdf`` to its cell."""
        if len(codes) == 0:
            return self
        uniq, first, inv = np.unique(codes, return_index=True, return_inverse=True)
        sums = np.bincount(inv, weights=sdf) * weight
        counts = np.bincount(inv).astype(float) * weight
        # label of the sample nearest the surface, first in order on ties
        order = np.lexsort((np.arange(len(codes)), np.abs(sdf), inv))
        starts = np.r_[0, np.flatnonzero(np.diff(inv[order])) + 1]
        batch_labels = np.asarray(labels, dtype=np.int64)[order[starts]]

        pos = np.searchsorted(self.keys, uniq)
        pos_c = np.minimum(pos, max(len(self.keys) - 1, 0))
        found = (pos < len(self.keys)) & (self.keys[pos_c] == uniq) if len(self.keys) else np.zeros(len(uniq), bool)
        hit = pos_c[found]
        self.sdf_sum[hit] += sums[found]
        self.weight[hit] += counts[found]
        self.labels[hit] = batch_labels[found]
        new = ~found
        if new.any():
            keys = np.concatenate([self.keys, uniq[new]])
            order = np.argsort(keys, kind="stable")
            self.keys = keys[order]
            self.sdf_sum = np.concatenate([self.sdf_sum, sums[new]])[order]
            self.weight = np.concatenate([self.weight, counts[new]])[order]
            self.labels = np.concatenate([self.labels, batch_labels[new]])[order]
        return self

    def absorb(self, other: "TsdfGrid", codes=None):
        """Add ``other``'s raw sums and weights (optionally only at ``codes``) into this grid."""
        if not self.compatible(other):
            raise ValueError("grids differ in voxel size, truncation or origin")
        sel = np.ones(len(other.keys), bool) if codes is None else np.isin(other.keys, codes)
        keys, sums, wts, labels = other.keys[sel], other.sdf_sum[sel], other.weight[sel], other.labels[sel]
        if len(keys) == 0:
            return self
        pos = np.searchsorted(self.keys, keys)
        pos_c = np.minimum(pos, max(len(self.keys) - 1, 0))
        found = (pos < len(self.keys)) & (self.keys[pos_c] == keys) if len(self.keys) else np.zeros(len(keys), bool)
        hit = pos_c[found]
        self.sdf_sum[hit] += sums[found]
        self.weight[hit] += wts[found]
        new = ~found
        if new.any():
            all_keys = np.concatenate([self.keys, keys[new]])
            order = np.argsort(all_keys, kind="stable")
            self.keys = all_keys[order]
            self.sdf_sum = np.concatenate([self.sdf_sum, sums[new]])[order]
            self.weight = np.concatenate([self.weight, wts[new]])[order]
            self.labels = np.concatenate([self.labels, labels[new]])[order]
        return self

    def remove(self, codes):
        if len(codes) == 0 or len(self.keys) == 0:
            return self
        keep = ~np.isin(self.keys, np.asarray(codes, dtype=np.int64))
        self.keys = self.keys[keep]
        self.sdf_sum = self.sdf_sum[keep]
        self.weight = self.weight[keep]
        self.labels = self.labels[keep]
        return self


def _walk(grid: TsdfGrid, points, origin):
    pts = np.asarray(points, dtype=float) - grid.origin
    org = (np.asarray(origin, dtype=float) - grid.origin).reshape(1, 3)
    ijk, sdf, ray = kernels.band_walk(np.ascontiguousarray(pts), np.ascontiguousarray(org),
                                      grid.voxel_size, grid.truncation)
    return encode(ijk), sdf, ray


def integrate_cloud(grid: TsdfGrid, points, labels=None, camera_pose: Pose | None = None,
                    weight: float = 1.0, nearest_surface: bool = False,
                    behind: float | None = None) -> TsdfGrid:
    """Projective fusion of a world-frame cloud seen from ``camera_pose`` (in place).

    Every voxel crossed by the band ``[-truncation, +truncation]`` around each
    point along its camera ray receives one weighted sample: the distance along
    the ray, or with ``nearest_surface`` the distance from the voxel centre to the
    surface sampled by the cloud (the larger of the distances to the closest point
    and to the centroid of the few closest points), signed by the ray. The latter
    keeps obliquely seen surfaces thin, where ray distances overstate how far a
    voxel is from the surface. Samples deeper than ``behind`` past the surface are dropped:
    being behind a point along one ray says little about being inside the
    object near its edges, while free space in front of a point is certain.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return grid
    if labels is None:
        labels = np.full(len(points), -1, dtype=np.int64)
    eye = np.zeros(3) if camera_pose is None else camera_pose.translation
    codes, sdf, ray = _walk(grid, points, eye)
    if nearest_surface and len(codes):
        uniq, inv = np.unique(codes, return_inverse=True)
        k = min(SURFACE_NEIGHBOURS, len(points))
        centres = grid.centers(uniq)
        near, idx = cKDTree(points).query(centres, k)
        local = points[idx.reshape(len(uniq), k)].mean(axis=1)
        # the centroid averages out noise on flat patches but cuts corners; the nearest point does the reverse
        dist = np.maximum(np.linalg.norm(centres - local, axis=1), near.reshape(len(uniq), k)[:, 0])
        sdf = np.where(sdf < 0, -1.0, 1.0) * np.minimum(dist, grid.truncation)[inv.reshape(-1)]
    if behind is not None:
        keep = sdf >= -behind
        codes, sdf, ray = codes[keep], sdf[keep], ray[keep]
    return grid.accumulate(codes, sdf, np.asarray(labels, dtype=np.int64)[ray], weight)


def build_local_tsdf(cloud_cam, voxel_size: float, truncation: float) -> TsdfGrid:
    """TSDF of a camera-frame cloud, ray-traced from the optical centre."""
    cloud_cam = np.asarray(cloud_cam, dtype=float).reshape(-1, 3)
    if len(cloud_cam) == 0:
        raise EmptyObservation("empty observation")
    grid = TsdfGrid(voxel_size, truncation)
    return integrate_cloud(grid, cloud_cam)


def tsdf_change(tsdf_obs: TsdfGrid, tsdf_obj: TsdfGrid, p_z_camera: float, lambda_diff: float) -> float:
    """Signed mean absolute TSDF difference over cells observed in both grids.

    The sign follows ``p_z_camera``; zero counts as positive.
    """
    if not tsdf_obs.compatible(tsdf_obj):
        raise ValueError("grids differ in voxel size, truncation or origin")
    common, ia, ib = np.intersect1d(tsdf_obs.keys, tsdf_obj.keys, assume_unique=True, return_indices=True)
    if len(common) == 0:
        raise NoOverlap("no overlap")
    diff = np.abs(tsdf_obs.values[ia] - tsdf_obj.values[ib])
    sign = -1.0 if p_z_camera < 0 else 1.0
    return float(sign * lambda_diff * diff.sum() / len(common))


def clear_object_voxels(global_map: TsdfGrid, footprint) -> TsdfGrid:
    return global_map.remove(np.asarray(footprint, dtype=np.int64))


def export_occupied(grid: TsdfGrid, surface_band: float, weight_threshold: float = 0.0) -> np.ndarray:
    """Voxel indices near the surface: ``weight > threshold`` and ``|value| <= band``."""
    if surface_band <= 0:
        raise ValueError("surface_band must be positive")
    if len(grid) == 0:
        return np.empty((0, 3), dtype=np.int64)
    mask = (grid.weight > weight_threshold) & (np.abs(grid.values) <= surface_band)
    return decode(grid.keys[mask])


def write_voxels(path, ijk, voxel_size: float, origin=(0.0, 0.0, 0.0)):
    """Text dump, one voxel per line: ``i j k x y z`` with world-frame centres."""
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
    centers = (ijk + 0.5) * voxel_size + np.asarray(origin, dtype=float)
    with open(path, "w") as fh:
        for (i, j, k), (x, y, z) in zip(ijk.tolist(), centers.tolist()):
            fh.write(f"{i} {j} {k} {x:.6f} {y:.6f} {z:.6f}\n")


def read_voxels(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (3, 6):
                raise ValueError(f"{path}:{lineno}: expected 'i j k [x y z]'")
            rows.append([int(p) for p in parts[:3]])
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def write_ply(path, points, labels=None):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        if labels is not None:
            fh.write("property int label\n")
        fh.write("end_header\n")
        if labels is None:
            for x, y, z in points.tolist():
                fh.write(f"{x:.6f} {y:.6f} {z:.6f}\n")
        else:
            for (x, y, z), lab in zip(points.tolist(), np.asarray(labels).tolist()):
                fh.write(f"{x:.6f} {y:.6f} {z:.6f} {int(lab)}\n")
