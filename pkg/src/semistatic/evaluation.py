"""Voxel-level map scoring and dataset replay."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tsdf as ts
from .config import PipelineConfig, load_config
from .pipeline import MapState, process_frame, write_trace
from .simworld import load_dataset

UNIVERSE_MARGIN = 1.0


@dataclass(frozen=True)
class MapComparison:
    precision: float
    recall: float
    fpr: float
    tp: int
    fp: int
    fn: int
    tn: int
    voxel_size: float


def _as_set(ijk):
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
    return np.unique(ijk, axis=0)


def _rows_in(a, b):
    """Mask of rows of ``a`` that also occur in ``b`` (both unique int arrays)."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros(len(a), bool)
    lo = np.minimum(a.min(axis=0), b.min(axis=0))
    span = np.maximum(a.max(axis=0), b.max(axis=0)) - lo + 1
    key = lambda x: ((x[:, 0] - lo[0]) * span[1] + (x[:, 1] - lo[1])) * span[2] + (x[:, 2] - lo[2])
    return np.isin(key(a), key(b))


def resample_voxels(ijk, voxel_size, target_size):
    """Map voxel indices to a coarser (or equal) grid by their centres."""
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
    if voxel_size == target_size:
        return _as_set(ijk)
    return _as_set(np.floor((ijk + 0.5) * voxel_size / target_size).astype(np.int64))


def dilate(ijk, radius: int):
    """Chebyshev dilation of a voxel set."""
    ijk = _as_set(ijk)
    if radius <= 0 or len(ijk) == 0:
        return ijk
    r = np.arange(-radius, radius + 1)
    offs = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    return _as_set((ijk[:, None, :] + offs[None]).reshape(-1, 3))


def universe_bounds(reference, voxel_size, margin=UNIVERSE_MARGIN):
    ref = np.asarray(reference, dtype=np.int64).reshape(-1, 3)
    if len(ref) == 0:
        return None
    pad = int(math.ceil(margin / voxel_size - 1e-9))
    return ref.min(axis=0) - pad, ref.max(axis=0) + pad


def compare_maps(recon, reference, voxel_size: float, reference_voxel_size: float | None = None,
                 bounds=None) -> MapComparison:
    """Precision, recall and false-positive rate of a reconstructed voxel set.

    True negatives are counted inside ``bounds`` (inclusive index box), by default
    the reference's bounding box grown by one metre. Precision is 1 when nothing
    was reconstructed.
    """
    if reference_voxel_size is not None and not math.isclose(reference_voxel_size, voxel_size):
        raise ValueError(f"resolution mismatch: {voxel_size} vs {reference_voxel_size}")
    recon, ref = _as_set(recon), _as_set(reference)
    hit = _rows_in(recon, ref)
    tp = int(hit.sum())
    fp = len(recon) - tp
    fn = len(ref) - tp
    if bounds is None:
        bounds = universe_bounds(ref, voxel_size) or universe_bounds(recon, voxel_size)
    if bounds is None:
        tn = 0
    else:
        lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
        volume = int(np.prod(hi - lo + 1))
        inside = lambda x: np.all((x >= lo) & (x <= hi), axis=1)
        marked = tp + int(inside(recon[~hit]).sum()) + int(inside(ref[~_rows_in(ref, recon)]).sum())
        tn = max(volume - marked, 0)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    fpr = fp / (fp + tn) if fp + tn else 0.0
    return MapComparison(precision, recall, fpr, tp, fp, fn, tn, voxel_size)


# ---------------------------------------------------------------------------


def _summaries(trace, state: MapState):
    by_obj = {}
    for frame, oid, mu, s2, a, b, ev, delta, s, event in trace:
        d = by_obj.setdefault(oid, {"id": oid, "first_frame": frame, "events": {}})
        d["last_frame"] = frame
        d["events"][event] = d["events"].get(event, 0) + 1
        d["final_E_v"] = ev
        d["final_mu"] = mu
        d["min_E_v"] = min(d.get("min_E_v", ev), ev)
    out = []
    for oid in sorted(by_obj):
        d = by_obj[oid]
        d["pruned"] = "pruned" in d["events"]
        d["alive"] = oid in state.objects
        if d["alive"]:
            obj = state.objects[oid]
            d["class"] = state.table.get(obj.semantic_class).name
            d["position"] = [round(float(v), 6) for v in obj.position]
        d["events"] = dict(sorted(d["events"].items()))
        out.append(d)
    return out


def run_replay(dataset_dir, config_path=None, out_dir=None, eval_every: int = 10,
               config: PipelineConfig | None = None, deterministic: bool = False, progress=None):
    """Replay a simulated dataset through the pipeline, scoring the map against the live traversal.

    Writes ``report.json``, ``trace.csv``, ``timing.json``, ``map_voxels.txt`` and
    ``map.ply`` into ``out_dir`` when given. With ``deterministic`` the report's
    timing entries are null so repeated runs produce identical bytes.
    """
    if eval_every < 1:
        raise ValueError("eval_every must be >= 1")
    if config is None:
        config = load_config(config_path) if config_path else PipelineConfig()
    data = load_dataset(dataset_dir, config.class_table)
    eval_vs = data.gt_voxel_size
    state = MapState(config, data.scene.camera)
    gt_cache = {}
    series = []
    timing = {"cluster_associate": [], "state_integrate": [], "maintenance": []}
    n_frames = len(data.poses)
    last_cmp = None
    for n, (frame, t, pose) in enumerate(data.poses):
        result = process_frame(state, data.frame(frame), pose)
        for k, v in result.timing_ms.items():
            timing[k].append(v)
        if progress:
            progress(frame, result)
        if (n + 1) % eval_every == 0 or n + 1 == n_frames:
            trav = data.traversal_of(frame)
            if trav not in gt_cache:
                gt_cache[trav] = data.ground_truth(trav)
            recon = resample_voxels(state.occupied(), config.tsdf.voxel_size, eval_vs)
            last_cmp = compare_maps(recon, gt_cache[trav], eval_vs)
            series.append({"frame": frame, "traversal": trav, "precision": last_cmp.precision,
                           "recall": last_cmp.recall, "fpr": last_cmp.fpr})
    timing_ms = {k: (float(np.mean(v)) if v else 0.0) for k, v in timing.items()}
    report = {
        "final_metrics": asdict(last_cmp) if last_cmp else None,
        "series": series,
        "objects": _summaries(state.trace, state),
        "timing_ms": {k: None for k in timing_ms} if deterministic else timing_ms,
        "frames": n_frames,
        "trace_file": "trace.csv",
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out_dir, "timing.json"), "w") as fh:
            json.dump(timing_ms, fh, indent=2, sort_keys=True)
        write_trace(os.path.join(out_dir, "trace.csv"), state.trace)
        occ = state.occupied()
        ts.write_voxels(os.path.join(out_dir, "map_voxels.txt"), occ, config.tsdf.voxel_size)
        ts.write_ply(os.path.join(out_dir, "map.ply"), (occ + 0.5) * config.tsdf.voxel_size)
    return report, state


def export_plots_data(report: dict, trace_rows, out_dir):
    """``metrics.csv`` (frame, precision, recall, fpr) and ``stationarity.csv`` (per-object E[v] trace)."""
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "precision", "recall", "fpr"])
        for e in report.get("series", []):
            w.writerow([e["frame"], f"{e['precision']:.6f}", f"{e['recall']:.6f}", f"{e['fpr']:.6f}"])
    trace_path = os.path.join(out_dir, "stationarity.csv")
    with open(trace_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "object_id", "E_v", "event"])
        for row in trace_rows or []:
            w.writerow([row["frame"], row["object_id"], row["E_v"], row["event"]])
    return metrics_path, trace_path


def read_trace(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
