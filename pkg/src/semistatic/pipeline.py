"""Per-frame orchestration: observations, association, state updates and map maintenance."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import change_state as cs
from . import geometry as geo
from . import tsdf as ts
from .association import (build_cost_matrix, classify_statuses, frustum_visibility,
                          solve_assignment)
from .config import PipelineConfig
from .poses import CameraModel, Pose

log = logging.getLogger(__name__)

STATUSES = ("stable", "new", "update-pending", "unobserved")
TRACE_FIELDS = ("frame", "object_id", "mu", "sigma2", "alpha", "beta", "E_v", "delta", "s", "event")


@dataclass
class ObjectRecord:
    id: int
    cloud: geo.LabeledCloud
    tsdf: ts.TsdfGrid
    bbox: geo.BoundingBox4DoF
    semantic_class: int
    state: cs.GaussianBetaState
    status: str = "new"
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)), repr=False)

    @property
    def position(self):
        return self.bbox.center

    @property
    def heading(self):
        return self.bbox.heading

    @property
    def footprint(self) -> np.ndarray:
        return self.tsdf.keys

    def registration_target(self, cfg: PipelineConfig):
        return self.cloud.points, self.normals


@dataclass
class FrameResult:
    frame: int
    spawned: list = field(default_factory=list)
    updated: list = field(default_factory=list)
    discarded: list = field(default_factory=list)
    unobserved: list = field(default_factory=list)
    pruned: list = field(default_factory=list)
    measurements: dict = field(default_factory=dict)  # object id -> (delta, verified)
    errors: list = field(default_factory=list)
    timing_ms: dict = field(default_factory=dict)


class MapState:
    """Object library plus the global TSDF, owned by a single orchestrator."""

    def __init__(self, cfg: PipelineConfig, camera: CameraModel):
        self.cfg = cfg
        self.camera = camera
        self.table = cfg.class_table
        self.global_map = ts.TsdfGrid(cfg.tsdf.voxel_size, cfg.tsdf.truncation)
        self.objects: dict[int, ObjectRecord] = {}
        self.next_id = 0
        self.frame_index = -1
        self.trace: list[tuple] = []

    def record(self, obj: ObjectRecord, event: str, delta=float("nan"), s=-1):
        st = obj.state
        self.trace.append((self.frame_index, obj.id, st.mu, st.sigma2, st.alpha, st.beta,
                           st.mean_v, delta, s, event))

    def occupied(self) -> np.ndarray:
        return ts.export_occupied(self.global_map, self.cfg.tsdf.export_band, self.cfg.tsdf.export_weight)


def write_trace(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for row in rows:
            frame, oid, mu, s2, a, b, ev, delta, s, event = row
            w.writerow([frame, oid, f"{mu:.9g}", f"{s2:.9g}", f"{a:.9g}", f"{b:.9g}", f"{ev:.9g}",
                        "" if delta != delta else f"{delta:.9g}", "" if s < 0 else s, event])


# ---------------------------------------------------------------------------


def extract_observations(cloud_world: geo.LabeledCloud, cfg: PipelineConfig, table) -> list[geo.Observation]:
    g = cfg.geometry
    cloud = geo.remove_ground_and_outliers(cloud_world, g)
    cloud = geo.enforce_plane_semantics(cloud, g)
    clusters = geo.euclidean_cluster(cloud, g.cluster_radius, g.cluster_min_points) if len(cloud) else []
    obs = [geo.make_observation(cloud.subset(idx), table) for idx in clusters]
    return geo.merge_overlapping(obs, table, g.merge_margin)


def visible_surface(points_world, camera_pose: Pose, camera: CameraModel, cell: int, margin: float,
                   normals=None):
    """Camera-frame points inside the frustum that are not hidden behind other points of the same set.

    Points whose outward ``normals`` face away from the camera are dropped first.
    """
    pc = camera_pose.apply_inverse(points_world)
    keep = camera.in_frustum(pc)
    if normals is not None and len(normals):
        keep &= np.einsum("ij,ij->i", normals, camera_pose.translation - points_world) > 0
    pc = pc[keep]
    if len(pc) == 0:
        return pc
    u, v, z = camera.project(pc)
    cols = -(-camera.width // cell)
    bins = (v.astype(np.int64) // cell) * cols + u.astype(np.int64) // cell
    nearest = np.full(cols * (-(-camera.height // cell)), np.inf)
    np.minimum.at(nearest, bins, z)
    return pc[z <= nearest[bins] + margin]


def _registration_source(obs: geo.Observation, cfg: PipelineConfig, camera_pose: Pose):
    src = geo.voxel_downsample(obs.cloud, cfg.tsdf.voxel_size).points
    if len(src) < 10:
        src = obs.cloud.points
    return src, geo.estimate_normals(src, cfg.icp.normal_k, camera_pose.translation)


def _integrate(state: MapState, obj: ObjectRecord, cloud: geo.LabeledCloud, camera_pose: Pose):
    # normals are oriented toward the camera that saw the points, so they point out of the object
    normals = geo.estimate_normals(cloud.points, state.cfg.icp.normal_k, camera_pose.translation)
    ts.integrate_cloud(obj.tsdf, cloud.points, cloud.labels, camera_pose, nearest_surface=True,
                       behind=state.cfg.tsdf.behind_cutoff)
    ts.integrate_cloud(state.global_map, cloud.points, cloud.labels, camera_pose, nearest_surface=True,
                       behind=state.cfg.tsdf.behind_cutoff)
    merged = geo.LabeledCloud.concat([obj.cloud, cloud])
    obj.cloud, obj.normals = geo.voxel_downsample(merged, state.cfg.tsdf.voxel_size,
                                                  np.vstack([obj.normals, normals]))
    obj.bbox = geo.fit_bbox_pca(obj.cloud.points)


def spawn_object(state: MapState, obs: geo.Observation, camera_pose: Pose) -> ObjectRecord:
    cfg = state.cfg
    v_class = state.table.get(obs.semantic_class).v_class
    obj = ObjectRecord(
        id=state.next_id,
        cloud=geo.LabeledCloud.empty(),
        tsdf=ts.TsdfGrid(cfg.tsdf.voxel_size, cfg.tsdf.truncation),
        bbox=obs.bbox,
        semantic_class=obs.semantic_class,
        state=cs.GaussianBetaState.initial(v_class, cfg.likelihood.initial_sigma2),
        status="new",
    )
    state.next_id += 1
    _integrate(state, obj, obs.cloud, camera_pose)
    state.objects[obj.id] = obj
    state.record(obj, "spawned", s=obs.stationarity)
    return obj


class UnseenSide(Exception):
    """The object has no modelled surface facing the camera."""


def measure_change(obj: ObjectRecord, obs: geo.Observation, icp, camera_pose: Pose, state: MapState) -> float:
    """TSDF change between the observation and the currently visible part of the object."""
    cfg = state.cfg
    obs_cam = camera_pose.apply_inverse(obs.cloud.points)
    obj_cam = visible_surface(obj.cloud.points, camera_pose, state.camera,
                              cfg.objects.visibility_cell, cfg.objects.visibility_margin, obj.normals)
    if len(obj_cam) < cfg.objects.min_local_points:
        raise UnseenSide(obj.id)
    g_obs = ts.build_local_tsdf(obs_cam, cfg.tsdf.voxel_size, cfg.tsdf.truncation)
    g_obj = ts.build_local_tsdf(obj_cam, cfg.tsdf.voxel_size, cfg.tsdf.truncation)
    return ts.tsdf_change(g_obs, g_obj, icp.p_z_camera if icp is not None else 0.0, cfg.tsdf.change_scale)


def _filter_step(state: MapState, obj: ObjectRecord, z: cs.MeasurementFeature) -> str:
    lk = state.cfg.likelihood
    try:
        candidate = cs.bayesian_update(obj.state, z, lk)
    except (cs.DegeneratePosterior, cs.MeasurementImpossible) as exc:
        log.warning("object %d: %s; keeping prior", obj.id, exc)
        return "updated"
    new = cs.apply_clamp(obj.state, candidate, lk)
    clamped = new is obj.state
    obj.state = new
    return "clamped" if clamped else "updated"


def update_object(state: MapState, obj: ObjectRecord, obs: geo.Observation, icp, camera_pose: Pose,
                  result: FrameResult) -> bool:
    """Filter update from one matched observation; integrates it when geometrically verified."""
    lk = state.cfg.likelihood
    try:
        delta = measure_change(obj, obs, icp, camera_pose, state)
        overlap = True
    except UnseenSide:
        # registration already placed the observation on the object; it shows a new side
        _integrate(state, obj, obs.cloud, camera_pose)
        result.updated.append(obj.id)
        state.record(obj, "extended", float("nan"), obs.stationarity)
        return True
    except ts.NoOverlap:
        delta = lk.delta_max
        overlap = False
        result.errors.append((obj.id, "no overlap"))
    delta = float(np.clip(delta, -lk.delta_max, lk.delta_max))
    event = _filter_step(state, obj, cs.MeasurementFeature(delta, obs.stationarity))
    verified = overlap and cs.geometric_verification(delta, lk)
    result.measurements[obj.id] = (delta, verified)
    if verified:
        _integrate(state, obj, obs.cloud, camera_pose)
        result.updated.append(obj.id)
    else:
        result.discarded.append(obj.id)
    state.record(obj, event, delta, obs.stationarity)
    return verified


def penalize_unobserved(state: MapState, obj: ObjectRecord):
    lk = state.cfg.likelihood
    s = geo.stationarity_class(obj.semantic_class, state.table)
    _filter_step(state, obj, cs.MeasurementFeature(lk.delta_max, s))
    state.record(obj, "unobserved", lk.delta_max, s)


def maintain_map(state: MapState, result: FrameResult):
    """Erase objects whose stationarity fell below threshold.

    Cells an erased object shared with a surviving one keep the survivor's samples only.
    """
    lk = state.cfg.likelihood
    doomed = [state.objects.pop(oid) for oid in sorted(state.objects)
              if cs.should_prune(state.objects[oid].state, lk)]
    if not doomed:
        return []
    for obj in doomed:
        state.record(obj, "pruned")
        result.pruned.append(obj.id)
    cleared = np.unique(np.concatenate([o.footprint for o in doomed]))
    ts.clear_object_voxels(state.global_map, cleared)
    # the global map is the sum of the object grids, so shared cells are rebuilt from the survivors alone
    for oid in sorted(state.objects):
        state.global_map.absorb(state.objects[oid].tsdf, cleared)
    return result.pruned


def process_frame(state: MapState, frame_cam: geo.LabeledCloud, camera_pose: Pose) -> FrameResult:
    cfg = state.cfg
    state.frame_index += 1
    result = FrameResult(state.frame_index)
    t0 = time.perf_counter()

    world = geo.LabeledCloud(camera_pose.apply(frame_cam.points), frame_cam.labels) if len(frame_cam) else frame_cam
    observations = extract_observations(world, cfg, state.table) if len(world) else []

    ids = sorted(state.objects)
    objs = [state.objects[i] for i in ids]
    n, m = len(objs), len(observations)
    icp_results = {}
    dist = np.full((n, m), np.inf)
    sources = [_registration_source(o, cfg, camera_pose) for o in observations]
    for a, obj in enumerate(objs):
        for b, obs in enumerate(observations):
            dist[a, b] = float(np.linalg.norm(obj.position - obs.position))
            if dist[a, b] > cfg.association.theta_dist:
                continue
            target, normals = obj.registration_target(cfg)
            if len(target) < 10 or len(obs.cloud) < 10:
                continue
            src, src_normals = sources[b]
            icp_results[(a, b)] = geo.icp_point_to_plane(src, target, None, cfg.icp, camera_pose,
                                                         target_normals=normals, region=obj.bbox,
                                                         source_normals=src_normals)
    cost = build_cost_matrix([o.semantic_class for o in objs], [o.semantic_class for o in observations],
                             dist, icp_results, cfg.association)
    matching = solve_assignment(cost)
    vis = [frustum_visibility(o.cloud.points, camera_pose, state.camera) for o in objs]
    assoc = classify_statuses(ids, m, matching, vis, icp_results, cfg.association)
    t1 = time.perf_counter()

    matched_obs = {}
    for oid, j, icp in assoc.matches:
        obj = state.objects[oid]
        obj.status = "update-pending"
        update_object(state, obj, observations[j], icp, camera_pose, result)
        matched_obs[oid] = j
    for oid in assoc.unobserved_objects:
        obj = state.objects[oid]
        obj.status = "unobserved"
        penalize_unobserved(state, obj)
        result.unobserved.append(oid)
    t2 = time.perf_counter()

    maintain_map(state, result)
    # observations whose object was just erased describe the scene as it is now
    respawn = [j for oid, j in matched_obs.items() if oid in result.pruned]
    for j in sorted(set(assoc.new_observations) | set(respawn)):
        obs = observations[j]
        if len(obs.cloud) < cfg.objects.min_spawn_points:
            continue
        # an unmatched view inside a live object of the same class is an unseen side of it
        if any(o.semantic_class == obs.semantic_class and geo.boxes_overlap(o.bbox, obs.bbox)
               for o in state.objects.values()):
            continue
        obj = spawn_object(state, obs, camera_pose)
        result.spawned.append(obj.id)
    for obj in state.objects.values():
        obj.status = "stable"
    t3 = time.perf_counter()

    result.timing_ms = {
        "cluster_associate": 1e3 * (t1 - t0),
        "state_integrate": 1e3 * (t2 - t1),
        "maintenance": 1e3 * (t3 - t2),
    }
    return result
