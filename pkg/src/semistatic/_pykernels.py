"""Pure numpy voxel-walk kernel, used when the compiled extension is unavailable.

Rays advance in lockstep; every floating-point expression mirrors ``_ckernels.pyx``
so both backends produce bit-identical samples in the same order.
"""
import numpy as np

TIE_EPS = 1e-9  # crossings closer than this (fraction of the band) count as simultaneous


def _prepare(points, origins, voxel_size, truncation):
    points = np.ascontiguousarray(points, dtype=np.float64)
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    diff = points - origins
    dist = np.sqrt(diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2])
    valid = dist > 0.0
    safe = np.where(valid, dist, 1.0)
    d = diff / safe[:, None]
    half = np.minimum(truncation, dist)
    start = (points - half[:, None] * d) / voxel_size
    stop = (points + truncation * d) / voxel_size
    return points, d, start, stop, valid


def band_walk_counts(points, origins, voxel_size, truncation):
    _, _, start, stop, valid = _prepare(points, origins, voxel_size, truncation)
    moves = np.abs(np.floor(stop) - np.floor(start)).astype(np.int64).sum(axis=1)
    return np.where(valid, moves + 1, 0)


def band_walk(points, origins, voxel_size, truncation):
    points, d, start, stop, valid = _prepare(points, origins, voxel_size, truncation)
    n = len(points)
    idx = np.floor(start).astype(np.int64)
    last = np.floor(stop).astype(np.int64)
    seg = stop - start
    stepdir = np.sign(last - idx)
    remaining = np.abs(last - idx)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_max = np.where(stepdir > 0, ((idx + 1) - start) / seg,
                         np.where(stepdir < 0, (idx - start) / seg, np.inf))
        t_delta = np.where(stepdir > 0, 1.0 / seg, np.where(stepdir < 0, -1.0 / seg, np.inf))
    bound = np.where(valid, remaining.sum(axis=1) + 1, 0)
    n_steps = int(bound.max()) if n else 0

    ijk_out = np.zeros((n, n_steps, 3), dtype=np.int64)
    sdf_out = np.zeros((n, n_steps))
    written = np.zeros((n, n_steps), dtype=bool)
    active = bound > 0
    for m in range(n_steps):
        if not active.any():
            break
        c = (idx + 0.5) * voxel_size
        val = (points[:, 0] - c[:, 0]) * d[:, 0]
        val = val + (points[:, 1] - c[:, 1]) * d[:, 1]
        val = val + (points[:, 2] - c[:, 2]) * d[:, 2]
        ijk_out[:, m] = idx
        sdf_out[:, m] = np.clip(val, -truncation, truncation)
        written[:, m] = active
        # step every axis whose crossing ties with the earliest one still to come
        masked = np.where(remaining > 0, t_max, np.inf)
        bt = masked.min(axis=1)
        move = (remaining > 0) & (t_max <= (bt + TIE_EPS)[:, None]) & active[:, None]
        idx += np.where(move, stepdir, 0)
        remaining -= move
        t_max = np.where(move, t_max + t_delta, t_max)
        active &= move.any(axis=1)

    ray = np.broadcast_to(np.arange(n)[:, None], written.shape)
    return ijk_out[written], sdf_out[written], ray[written].astype(np.int64)
