"""Object-observation matching: gating, pose/semantic costing, optimal assignment, status marking."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .poses import CameraModel, Pose, wrap_angle

INF = math.inf


@dataclass(frozen=True)
class AssociationConfig:
    theta_dist: float = 3.0
    theta_sim: float = 0.4
    theta_cutoff: float = 6.0
    theta_vis: float = 0.5
    lambda_pos: float = 1.0
    lambda_heading: float = 0.5
    lambda_class: float = 5.0

    def __post_init__(self):
        for name in ("theta_dist", "theta_sim", "theta_cutoff", "theta_vis",
                     "lambda_pos", "lambda_heading", "lambda_class"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.theta_sim > 1 or self.theta_vis > 1:
            raise ValueError("theta_sim and theta_vis must lie in (0, 1]")


@dataclass
class AssociationResult:
    matches: list = field(default_factory=list)  # (object_id, observation_index, IcpResult)
    new_observations: list = field(default_factory=list)
    unobserved_objects: list = field(default_factory=list)


def pair_cost(translation, heading, class_i, class_j, cfg: AssociationConfig = AssociationConfig()) -> float:
    phi = wrap_angle(heading)
    return (cfg.lambda_pos * float(np.linalg.norm(translation)) + cfg.lambda_heading * abs(phi)
            + cfg.lambda_class * (0.0 if class_i == class_j else 1.0))


def build_cost_matrix(object_classes, observation_classes, distances, icp_results,
                      cfg: AssociationConfig = AssociationConfig()) -> np.ndarray:
    """Pairwise costs with ``inf`` for gated-out pairs.

    ``distances[i, j]`` is the centroid distance; ``icp_results`` maps ``(i, j)``
    to an ``IcpResult`` for pairs that were registered. Missing pairs stay infinite.
    """
    n, m = len(object_classes), len(observation_classes)
    cost = np.full((n, m), INF)
    for (i, j), res in icp_results.items():
        if res is None or distances[i, j] > cfg.theta_dist or res.dissimilarity > cfg.theta_sim:
            continue
        c = pair_cost(res.translation, res.heading, object_classes[i], observation_classes[j], cfg)
        if c <= cfg.theta_cutoff:
            cost[i, j] = c
    return cost


def _hungarian(cost):
    """Kuhn-Munkres with potentials on a square finite matrix; returns row -> column."""
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[col] = row matched to col (1-based)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign


def solve_assignment(cost) -> list[tuple[int, int]]:
    """Optimal one-to-one matching over finite entries.

    Maximises the number of matched pairs first, then minimises their total cost.
    Infinite entries are never matched. Returns sorted ``(row, col)`` pairs.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.size == 0:
        return []
    finite = np.isfinite(cost)
    if not finite.any():
        return []
    n = max(cost.shape)
    # a forbidden pair costs more than any full set of allowed ones
    big = (np.abs(cost[finite]).sum() + 1.0) * (n + 1)
    sq = np.full((n, n), big)
    sq[:cost.shape[0], :cost.shape[1]] = np.where(finite, cost, big)
    assign = _hungarian(sq)
    pairs = [(i, int(j)) for i, j in enumerate(assign)
             if i < cost.shape[0] and j < cost.shape[1] and finite[i, j]]
    return sorted(pairs)


def frustum_visibility(points_world, camera_pose: Pose, camera: CameraModel) -> float:
    pts = np.asarray(points_world, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty object cloud")
    return float(np.mean(camera.in_frustum(camera_pose.apply_inverse(pts))))


def classify_statuses(object_ids, n_observations, matching, visibilities, icp_results,
                      cfg: AssociationConfig = AssociationConfig()) -> AssociationResult:
    """``matching`` holds (object_row, observation) pairs; ``visibilities`` is per object row."""
    res = AssociationResult()
    matched_rows = set()
    matched_obs = set()
    for i, j in matching:
        res.matches.append((object_ids[i], j, icp_results.get((i, j))))
        matched_rows.add(i)
        matched_obs.add(j)
    res.new_observations = [j for j in range(n_observations) if j not in matched_obs]
    res.unobserved_objects = [oid for i, oid in enumerate(object_ids)
                              if i not in matched_rows and visibilities[i] >= cfg.theta_vis]
    return res
