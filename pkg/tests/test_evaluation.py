import csv
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semistatic import evaluation as ev
from semistatic import simworld as sw
from semistatic.change_state import LikelihoodConfig
from semistatic.pipeline import TRACE_FIELDS
from semistatic.scenarios import S2_MOVED_OUT, WALL, WALL_HEIGHT, _view, default_camera


def _cube(n, offset=0):
    r = np.arange(n) + offset
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def test_identical_maps():
    ref = _cube(3)
    m = ev.compare_maps(ref, ref, 0.1)
    assert (m.precision, m.recall, m.fpr) == (1.0, 1.0, 0.0)
    assert (m.tp, m.fp, m.fn) == (27, 0, 0)
    # reference grown by 10 cells of margin on every side
    assert m.tn == 23**3 - 27


def test_empty_reconstruction():
    m = ev.compare_maps(np.empty((0, 3)), _cube(2), 0.1)
    assert (m.precision, m.recall, m.fpr) == (1.0, 0.0, 0.0)
    assert m.fn == 8


def test_single_ghost_voxel():
    ref = _cube(2)
    recon = np.vstack([ref, [[5, 5, 5]]])
    m = ev.compare_maps(recon, ref, 0.1)
    assert m.fp == 1 and m.recall == 1.0
    assert m.precision == pytest.approx(8 / 9)
    assert m.fpr == pytest.approx(1 / (m.tn + 1))


def test_duplicates_ignored():
    ref = _cube(2)
    assert ev.compare_maps(np.vstack([ref, ref]), ref, 0.1) == ev.compare_maps(ref, ref, 0.1)


def test_resolution_mismatch():
    with pytest.raises(ValueError, match="resolution mismatch"):
        ev.compare_maps(_cube(2), _cube(2), 0.05, reference_voxel_size=0.1)


def test_resample_and_dilate():
    fine = np.array([[0, 0, 0], [1, 1, 1], [2, 0, 0]])
    np.testing.assert_array_equal(ev.resample_voxels(fine, 0.05, 0.1), [[0, 0, 0], [1, 0, 0]])
    assert len(ev.dilate([[0, 0, 0]], 2)) == 125
    assert len(ev.dilate([[0, 0, 0]], 0)) == 1


voxel_sets = st.lists(st.tuples(*[st.integers(-4, 4)] * 3), max_size=40).map(
    lambda v: np.array(v, dtype=np.int64).reshape(-1, 3))


@settings(max_examples=100)
@given(voxel_sets, voxel_sets, st.randoms(use_true_random=False))
def test_confusion_counts(recon, ref, rnd):
    m = ev.compare_maps(recon, ref, 0.1)
    n_ref, n_recon = len({tuple(v) for v in ref}), len({tuple(v) for v in recon})
    assert m.tp + m.fn == n_ref
    assert m.tp + m.fp == n_recon
    assert 0 <= m.precision <= 1 and 0 <= m.recall <= 1 and 0 <= m.fpr <= 1
    perm = list(range(len(recon)))
    rnd.shuffle(perm)
    assert ev.compare_maps(recon[perm], ref, 0.1) == m


def test_export_plots_empty(tmp_path):
    metrics, trace = ev.export_plots_data({}, [], tmp_path)
    assert open(metrics).read().strip() == "frame,precision,recall,fpr"
    assert open(trace).read().strip() == "frame,object_id,E_v,event"


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    view = _view([0.0, 0.0, 1.9], np.pi / 2)
    traj = sw.TrajectoryScript([(0.0, view), (2.0, view)], 1.0)
    scene = sw.SceneScript([sw.SceneObject(0, "box", WALL, WALL_HEIGHT, [(0.05, 2.55, 0.0)])], 1,
                           default_camera(), [traj])
    sw.generate_dataset(scene, str(root), voxel_size=0.1)
    return str(root)


def test_replay_eval_every(tiny_dataset):
    with pytest.raises(ValueError):
        ev.run_replay(tiny_dataset, eval_every=0)
    report, state = ev.run_replay(tiny_dataset, eval_every=10)
    assert report["frames"] == 3 and [e["frame"] for e in report["series"]] == [2]
    assert report["final_metrics"]["precision"] == report["series"][0]["precision"]
    assert report["objects"][0]["events"]["spawned"] == 1 and list(state.objects) == [0]
    report, _ = ev.run_replay(tiny_dataset, eval_every=1)
    assert [e["frame"] for e in report["series"]] == [0, 1, 2]


def test_replay_outputs(semistatic_runs):
    _, [(out, report, state), _] = semistatic_runs
    for name in ("report.json", "trace.csv", "timing.json", "map_voxels.txt", "map.ply"):
        assert os.path.isfile(os.path.join(out, name))
    assert report["timing_ms"] == {"cluster_associate": None, "state_integrate": None, "maintenance": None}
    assert report["series"][-1]["frame"] == report["frames"] - 1
    assert [e["frame"] for e in report["series"][:-1]] == list(range(7, report["frames"] - 1, 8))
    rows = ev.read_trace(os.path.join(out, "trace.csv"))
    assert tuple(rows[0]) == TRACE_FIELDS and len(rows) == len(state.trace)


def test_pruned_objects_end_with_prune(semistatic_runs):
    _, [(out, report, state), _] = semistatic_runs
    rows = ev.read_trace(os.path.join(out, "trace.csv"))
    last = {}
    for row in rows:
        last[int(row["object_id"])] = row["event"]
    pruned = {o["id"] for o in report["objects"] if o["pruned"]}
    assert pruned == {oid for oid, e in last.items() if e == "pruned"}
    assert pruned.isdisjoint(state.objects)


def test_changed_walls_cross_threshold_once(semistatic_runs):
    _, [(out, report, state), _] = semistatic_runs
    theta = LikelihoodConfig().theta_stat
    rows = ev.read_trace(os.path.join(out, "trace.csv"))
    changed = [o["id"] for o in report["objects"] if o["pruned"]]
    assert len(changed) >= len(S2_MOVED_OUT) + 2  # moved out, moved along and removed walls
    for oid in changed:
        evs = [float(r["E_v"]) for r in rows if int(r["object_id"]) == oid and r["event"] != "pruned"]
        below = [e < theta for e in evs]
        assert below[-1] and below.count(True) == 1, (oid, evs[-5:])


def test_export_plots_from_run(tmp_path, semistatic_runs):
    _, [(out, report, _), _] = semistatic_runs
    rows = ev.read_trace(os.path.join(out, "trace.csv"))
    metrics, trace = ev.export_plots_data(report, rows, tmp_path)
    with open(metrics) as fh:
        m = list(csv.DictReader(fh))
    assert len(m) == len(report["series"])
    with open(trace) as fh:
        assert sum(1 for _ in fh) == len(rows) + 1
    assert json.load(open(os.path.join(out, "report.json"))) == json.loads(json.dumps(report))
