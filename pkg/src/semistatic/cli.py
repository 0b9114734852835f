"""Command-line entry point: simulate datasets, replay them, score maps, export traces."""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

from . import tsdf as ts
from .config import ConfigError, load_config, save_config, PipelineConfig
from .evaluation import compare_maps, export_plots_data, read_trace, resample_voxels, run_replay
from .simworld import SceneScript, generate_dataset

SCENES_DIR = os.path.join(os.path.dirname(__file__), "scenes")


def bundled_scenes():
    return sorted(f[:-5] for f in os.listdir(SCENES_DIR) if f.endswith(".toml"))


def _scene_path(name):
    if os.path.isfile(name):
        return name
    path = os.path.join(SCENES_DIR, name + ".toml")
    if os.path.isfile(path):
        return path
    raise ValueError(f"{name}: no such scene file (bundled scenes: {', '.join(bundled_scenes())})")


def cmd_simulate(args):
    scene = SceneScript.load(_scene_path(args.scene))
    if args.seed is not None:
        scene.seed = args.seed
    if args.noise is not None:
        scene.noise_std = args.noise
    manifest = generate_dataset(scene, args.out, voxel_size=args.gt_voxel)
    for k, a, b in manifest:
        print(f"traversal {k}: frames {a}-{b}")
    return 0


def _print_metrics(m: dict):
    print(f"precision {m['precision']:.4f}  recall {m['recall']:.4f}  fpr {m['fpr']:.6f}  "
          f"(tp {m['tp']} fp {m['fp']} fn {m['fn']} tn {m['tn']} @ {m['voxel_size']} m)")


def cmd_run(args):
    last = [-1]

    def progress(frame, result):
        if args.verbose and (frame // 50) != last[0]:
            last[0] = frame // 50
            print(f"frame {frame}: {len(result.updated)} updated, {len(result.spawned)} spawned, "
                  f"{len(result.pruned)} pruned", file=sys.stderr)

    report, _ = run_replay(args.dataset, config_path=args.config, out_dir=args.out,
                           eval_every=args.eval_every, deterministic=args.deterministic, progress=progress)
    if report["final_metrics"]:
        _print_metrics(report["final_metrics"])
    pruned = [o["id"] for o in report["objects"] if o["pruned"]]
    print(f"{len(report['objects'])} objects, pruned: {pruned or 'none'}")
    print(f"report written to {os.path.join(args.out, 'report.json')}")
    return 0


def cmd_eval(args):
    recon = ts.read_voxels(args.recon)
    ref = ts.read_voxels(args.reference)
    recon_vs = args.recon_voxel if args.recon_voxel is not None else args.voxel_size
    if recon_vs != args.voxel_size:
        recon = resample_voxels(recon, recon_vs, args.voxel_size)
    m = asdict(compare_maps(recon, ref, args.voxel_size))
    if args.json:
        print(json.dumps(m, indent=2, sort_keys=True))
    else:
        _print_metrics(m)
    return 0


def cmd_trace(args):
    report_path = args.report
    if os.path.isdir(report_path):
        report_path = os.path.join(report_path, "report.json")
    with open(report_path) as fh:
        report = json.load(fh)
    trace_path = os.path.join(os.path.dirname(report_path), report.get("trace_file", "trace.csv"))
    rows = read_trace(trace_path) if os.path.exists(trace_path) else []
    for path in export_plots_data(report, rows, args.out):
        print(path)
    return 0


def cmd_config(args):
    cfg = load_config(args.base) if args.base else PipelineConfig()
    save_config(cfg, args.out)
    print(args.out)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="semistatic", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a scene script into a dataset")
    s.add_argument("scene", help="scene TOML path or bundled scene name (%s)" % ", ".join(bundled_scenes()))
    s.add_argument("out", help="output dataset directory")
    s.add_argument("--gt-voxel", type=float, default=0.1, help="ground-truth voxel size in m (default 0.1)")
    s.add_argument("--seed", type=int, help="override the scene's noise seed")
    s.add_argument("--noise", type=float, help="override the range noise std in m")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="replay a dataset through the mapper and write a report")
    r.add_argument("dataset", help="dataset directory written by 'simulate'")
    r.add_argument("--config", help="pipeline config TOML (defaults when omitted)")
    r.add_argument("--out", required=True, help="output directory for report.json, trace.csv and the map")
    r.add_argument("--eval-every", type=int, default=10, help="score the map every N frames (default 10)")
    r.add_argument("--deterministic", action="store_true", help="omit timings so reports are byte-stable")
    r.add_argument("-v", "--verbose", action="store_true", help="progress on stderr")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="compare two voxel dumps")
    e.add_argument("recon", help="reconstructed voxel dump ('i j k [x y z]' lines)")
    e.add_argument("reference", help="reference voxel dump")
    e.add_argument("--voxel-size", type=float, default=0.1, help="reference resolution in m (default 0.1)")
    e.add_argument("--recon-voxel", type=float, help="resolution of the reconstruction if it differs")
    e.add_argument("--json", action="store_true", help="print the comparison as JSON")
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("trace", help="export metric and stationarity CSVs from a report")
    t.add_argument("report", help="report.json or the run directory containing it")
    t.add_argument("--out", required=True, help="directory for metrics.csv and stationarity.csv")
    t.set_defaults(func=cmd_trace)

    c = sub.add_parser("config", help="write the default (or a normalised) pipeline config")
    c.add_argument("out", help="TOML file to write")
    c.add_argument("--base", help="config to load and rewrite")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        print(f"semistatic {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
