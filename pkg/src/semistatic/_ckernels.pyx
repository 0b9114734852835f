# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled voxel-walk kernel. Must stay numerically identical to ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt, fabs, INFINITY

cnp.import_array()

# crossings closer than this (as a fraction of the band) count as simultaneous
cdef double TIE_EPS = 1e-9


def band_walk_counts(double[:, ::1] points, double[:, ::1] origins, double voxel_size,
                     double truncation):
    """Upper bound on samples per ray (exact unless the ray passes through cell edges)."""
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t i, a
    cdef long total = 0
    cdef double d[3]
    cdef double dist, half, s, e
    cdef Py_ssize_t oi
    out = np.empty(n, dtype=np.int64)
    cdef long[::1] counts = out
    cdef bint shared = origins.shape[0] == 1
    for i in range(n):
        oi = 0 if shared else i
        dist = 0.0
        for a in range(3):
            d[a] = points[i, a] - origins[oi, a]
            dist += d[a] * d[a]
        dist = sqrt(dist)
        if dist == 0.0:
            counts[i] = 0
            continue
        half = truncation if truncation < dist else dist
        total = 1
        for a in range(3):
            d[a] = d[a] / dist
            s = (points[i, a] - half * d[a]) / voxel_size
            e = (points[i, a] + truncation * d[a]) / voxel_size
            total += <long>fabs(floor(e) - floor(s))
        counts[i] = total
    return out


def band_walk(double[:, ::1] points, double[:, ::1] origins, double voxel_size,
              double truncation):
    """Walk every voxel crossed by each ray's truncation band.

    For ray ``i`` from ``origins[i]`` (or the single shared origin) through
    ``points[i]``, visits the voxels crossed by the segment
    ``[p - t d, p + t d]`` and records the signed distance ``(p - c) . d`` of each
    voxel centre ``c``, clamped to ``+-t``. Returns ``(ijk, sdf, ray)``.
    """
    counts_arr = band_walk_counts(points, origins, voxel_size, truncation)
    cdef long[::1] counts = counts_arr
    cdef long total = int(counts_arr.sum())
    ijk_arr = np.empty((total, 3), dtype=np.int64)
    sdf_arr = np.empty(total, dtype=np.float64)
    ray_arr = np.empty(total, dtype=np.int64)
    cdef long[:, ::1] ijk = ijk_arr
    cdef double[::1] sdf = sdf_arr
    cdef long[::1] ray = ray_arr

    cdef Py_ssize_t n = points.shape[0]
    cdef bint shared = origins.shape[0] == 1
    cdef Py_ssize_t i, a, oi, best
    cdef long out = 0
    cdef long step, m
    cdef double d[3]
    cdef double start[3]
    cdef double stop[3]
    cdef double t_max[3]
    cdef double t_delta[3]
    cdef long idx[3]
    cdef long last[3]
    cdef long remaining[3]
    cdef long stepdir[3]
    cdef double dist, half, seg, c, val, bt
    for i in range(n):
        if counts[i] == 0:
            continue
        oi = 0 if shared else i
        dist = 0.0
        for a in range(3):
            d[a] = points[i, a] - origins[oi, a]
            dist += d[a] * d[a]
        dist = sqrt(dist)
        half = truncation if truncation < dist else dist
        for a in range(3):
            d[a] = d[a] / dist
            start[a] = (points[i, a] - half * d[a]) / voxel_size
            stop[a] = (points[i, a] + truncation * d[a]) / voxel_size
            idx[a] = <long>floor(start[a])
            last[a] = <long>floor(stop[a])
            seg = stop[a] - start[a]
            if last[a] > idx[a]:
                stepdir[a] = 1
                remaining[a] = last[a] - idx[a]
                t_max[a] = ((idx[a] + 1) - start[a]) / seg
                t_delta[a] = 1.0 / seg
            elif last[a] < idx[a]:
                stepdir[a] = -1
                remaining[a] = idx[a] - last[a]
                t_max[a] = (idx[a] - start[a]) / seg
                t_delta[a] = -1.0 / seg
            else:
                stepdir[a] = 0
                remaining[a] = 0
                t_max[a] = INFINITY
                t_delta[a] = INFINITY
        for m in range(counts[i]):
            val = 0.0
            for a in range(3):
                c = (idx[a] + 0.5) * voxel_size
                val += (points[i, a] - c) * d[a]
            if val > truncation:
                val = truncation
            elif val < -truncation:
                val = -truncation
            ijk[out, 0] = idx[0]
            ijk[out, 1] = idx[1]
            ijk[out, 2] = idx[2]
            sdf[out] = val
            ray[out] = i
            out += 1
            best = -1
            bt = INFINITY
            for a in range(3):
                if remaining[a] > 0 and (best < 0 or t_max[a] < bt):
                    best = a
                    bt = t_max[a]
            if best < 0:
                break
            # a ray through an edge or corner crosses every tied boundary at once
            for a in range(3):
                if remaining[a] > 0 and t_max[a] <= bt + TIE_EPS:
                    idx[a] += stepdir[a]
                    remaining[a] -= 1
                    t_max[a] += t_delta[a]
    return ijk_arr[:out], sdf_arr[:out], ray_arr[:out]
