"""
Command-line entry point: ``salsanet {synth,autolabel,project,train,eval,infer}``.

Frames are paired across directories by filename stem (``000123.bin``,
``000123.txt``, ``000123.pgm``).  Every command writes a JSON run manifest
next to its output; all commands exit non-zero on error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .autolabel import label_from_boxes, label_from_mask, mask_from_pgm, merge_labels
from .geometry import boxes_from_kitti_labels, box_to_kitti_object, format_kitti_calib, format_kitti_objects, load_kitti_calib
from .metrics import ConfusionMatrix, report_csv
from .nn import tnsr
from .nn.functional import ShapeError
from .pnm import write_pgm, write_ppm
from .pointcloud import PointCloud, load_kitti_scan, load_labeled_cloud, write_kitti_scan, write_label_file
from .projection import CLASS_NAMES, VEHICLE, grid_hw, labels_to_ppm_rgb, project, rasterize_labels
from .training import (ConfigError, TrainConfig, TrainingError, load_checkpoint, parse_config,
                       predict, spec_to_dict, train)

log = logging.getLogger("salsanet")


class CliError(Exception):
    pass


def write_manifest(path: Path, command: str, config: dict, inputs: dict, outputs: dict, seed=None):
    manifest = {"command": command, "config": config, "inputs": inputs, "outputs": outputs,
                "seed": seed, "version": __version__}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _stems(directory: Path, suffix: str) -> List[str]:
    return sorted(p.name[:-len(suffix)] for p in directory.glob(f"*{suffix}"))


# ----------------------------------------------------------------------------
# synth
# ----------------------------------------------------------------------------

def cmd_synth(out_dir, frames: int = 8, seed: int = 0) -> int:
    from .synthetic import KITTI_LIKE_CALIB, make_scene, road_mask

    out = Path(out_dir)
    dirs = {k: out / k for k in ("velodyne", "calib", "masks", "label_2", "truth")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    calib_text = format_kitti_calib(KITTI_LIKE_CALIB)
    for i in range(frames):
        stem = f"{i:06d}"
        scene = make_scene(rng)
        (dirs["velodyne"] / f"{stem}.bin").write_bytes(write_kitti_scan(scene.cloud))
        (dirs["truth"] / f"{stem}.label").write_bytes(write_label_file(scene.cloud.labels))
        (dirs["calib"] / f"{stem}.txt").write_text(calib_text)
        (dirs["masks"] / f"{stem}.pgm").write_bytes(write_pgm(road_mask(scene)))
        objs = [box_to_kitti_object(b, KITTI_LIKE_CALIB) for b in scene.boxes]
        (dirs["label_2"] / f"{stem}.txt").write_text(format_kitti_objects(objs))
    write_manifest(out / "manifest.json", "synth", {"frames": frames}, {}, {"dir": str(out)}, seed)
    print(f"wrote {frames} synthetic frames to {out}")
    return 0


# ----------------------------------------------------------------------------
# autolabel
# ----------------------------------------------------------------------------

def _autolabel_frame(args) -> Tuple[str, Optional[np.ndarray]]:
    stem, scan_dir, calib_dir, mask_dir, box_dir, vmask_dir, out_dir, threshold = args
    calib_path = Path(calib_dir) / f"{stem}.txt"
    if not calib_path.exists():
        return stem, None
    calib = load_kitti_calib(calib_path)
    cloud = load_kitti_scan(Path(scan_dir) / f"{stem}.bin")
    road = np.zeros(len(cloud), dtype=np.uint8)
    if mask_dir and (Path(mask_dir) / f"{stem}.pgm").exists():
        road = label_from_mask(cloud, calib, mask_from_pgm((Path(mask_dir) / f"{stem}.pgm").read_bytes(),
                                                           threshold=threshold))
    vehicle = np.zeros(len(cloud), dtype=np.uint8)
    if box_dir and (Path(box_dir) / f"{stem}.txt").exists():
        boxes = boxes_from_kitti_labels((Path(box_dir) / f"{stem}.txt").read_text(), calib)
        vehicle = label_from_boxes(cloud, boxes)
    if vmask_dir and (Path(vmask_dir) / f"{stem}.pgm").exists():
        vm = label_from_mask(cloud, calib, mask_from_pgm((Path(vmask_dir) / f"{stem}.pgm").read_bytes(),
                                                         class_id=VEHICLE, threshold=threshold))
        vehicle = np.maximum(vehicle, vm)
    labels = merge_labels(road, vehicle)
    out = Path(out_dir)
    (out / f"{stem}.bin").write_bytes(write_kitti_scan(cloud))
    (out / f"{stem}.label").write_bytes(write_label_file(labels))
    return stem, np.bincount(labels, minlength=3)


def cmd_autolabel(scan_dir, calib_dir, mask_dir, box_dir, out_dir, vehicle_mask_dir=None,
                  threshold: int = 128, jobs: int = 1) -> int:
    stems = _stems(Path(scan_dir), ".bin")
    if not stems:
        raise CliError(f"no frames found in {scan_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    work = [(s, scan_dir, calib_dir, mask_dir, box_dir, vehicle_mask_dir, str(out), threshold) for s in stems]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_autolabel_frame, work))
    else:
        results = [_autolabel_frame(w) for w in work]
    totals = np.zeros(3, dtype=np.int64)
    done = []
    for stem, counts in results:
        if counts is None:
            log.warning("frame %s: no calibration file, skipped", stem)
            continue
        totals += counts
        done.append(stem)
    if not done:
        raise CliError("no frames processed")
    write_manifest(out / "manifest.json", "autolabel", {"threshold": threshold},
                   {"scan_dir": str(scan_dir), "calib_dir": str(calib_dir), "mask_dir": str(mask_dir),
                    "box_dir": str(box_dir), "vehicle_mask_dir": str(vehicle_mask_dir)},
                   {"out_dir": str(out), "frames": done})
    print(f"labelled {len(done)} frames: " + ", ".join(f"{n}={c}" for n, c in zip(CLASS_NAMES, totals)))
    return 0


# ----------------------------------------------------------------------------
# project
# ----------------------------------------------------------------------------

def _load_config(path, **overrides) -> TrainConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, **overrides)


def _project_frame(args):
    stem, labeled_dir, out_dir, spec, export_ppm = args
    d = Path(labeled_dir)
    cloud = load_labeled_cloud(d / f"{stem}.bin", d / f"{stem}.label")
    grid = project(cloud, spec)
    labels = rasterize_labels(cloud, spec)
    out = Path(out_dir)
    tnsr.save_tensor(out / f"{stem}.grid.tnsr", grid.data)
    tnsr.save_tensor(out / f"{stem}.labels.tnsr", labels)
    if export_ppm:
        (out / f"{stem}.labels.ppm").write_bytes(write_ppm(labels_to_ppm_rgb(labels)))
    return stem


def cmd_project(labeled_dir, view: str, out_dir, export_ppm: bool = False, config=None, jobs: int = 1) -> int:
    if view not in ("bev", "sfv"):
        raise CliError(f"unknown view {view!r}; expected bev or sfv")
    cfg = _load_config(config, view=view)
    spec = cfg.grid_spec()
    stems = [s for s in _stems(Path(labeled_dir), ".bin") if (Path(labeled_dir) / f"{s}.label").exists()]
    if not stems:
        raise CliError(f"no labelled clouds (.bin + .label) in {labeled_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    work = [(s, str(labeled_dir), str(out), spec, export_ppm) for s in stems]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            list(pool.map(_project_frame, work))
    else:
        for w in work:
            _project_frame(w)
    write_manifest(out / "manifest.json", "project", {"view": view, "grid": spec_to_dict(spec),
                                                      "export_ppm": export_ppm},
                   {"labeled_dir": str(labeled_dir)}, {"out_dir": str(out), "frames": stems})
    print(f"projected {len(stems)} frames ({view}, {spec.shape}) to {out}")
    return 0


# ----------------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------------

def load_dataset(data_dir) -> Tuple[List[str], list]:
    """Projected ``.grid.tnsr``/``.labels.tnsr`` pairs, else labelled clouds."""
    d = Path(data_dir)
    stems = [s for s in _stems(d, ".grid.tnsr") if (d / f"{s}.labels.tnsr").exists()]
    if stems:
        samples = []
        for s in stems:
            grid = tnsr.load_tensor(d / f"{s}.grid.tnsr")
            labels = tnsr.load_tensor(d / f"{s}.labels.tnsr").astype(np.uint8)
            samples.append((np.ascontiguousarray(grid.transpose(2, 0, 1)), labels))
        return stems, samples
    stems = [s for s in _stems(d, ".bin") if (d / f"{s}.label").exists()]
    return stems, [load_labeled_cloud(d / f"{s}.bin", d / f"{s}.label") for s in stems]


def _pairs(samples, spec):
    grids, labels = [], []
    for s in samples:
        if isinstance(s, PointCloud):
            grids.append(project(s, spec).to_chw())
            labels.append(rasterize_labels(s, spec))
        else:
            grids.append(s[0])
            labels.append(s[1])
    return grids, labels


# ----------------------------------------------------------------------------
# train / eval / infer
# ----------------------------------------------------------------------------

def cmd_train(config_path, seed: Optional[int] = None, data_dir=None, out_dir=None) -> int:
    cfg = _load_config(config_path, seed=seed, data_dir=data_dir, out_dir=out_dir)
    if not cfg.data_dir or not cfg.out_dir:
        raise ConfigError("data_dir and out_dir must be set")
    stems, samples = load_dataset(cfg.data_dir)
    if not samples:
        raise CliError(f"no training data in {cfg.data_dir}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train(samples, cfg, out_dir=out)
    (out / "model.snck").write_bytes(result.checkpoint())
    (out / "train_log.csv").write_text(result.log_csv())
    write_manifest(out / "manifest.json", "train", cfg.to_dict(), {"config": str(config_path), "frames": stems},
                   {"checkpoint": str(out / "model.snck"), "log": str(out / "train_log.csv")}, cfg.seed)
    print(f"trained {result.iterations} iterations, final loss {result.losses[-1]:.6g}")
    return 0


def cmd_eval(checkpoint, data_dir, out=None, gt_as_pred: bool = False) -> int:
    net, spec, header = load_checkpoint(Path(checkpoint).read_bytes())
    stems, samples = load_dataset(data_dir)
    if not samples:
        raise CliError(f"no evaluation data in {data_dir}")
    grids, labels = _pairs(samples, spec)
    want = (net.arch.in_channels, *net.arch.input_hw)
    for s, g in zip(stems, grids):
        if g.shape != want:
            raise ShapeError(f"frame {s}: grid {g.shape} does not match checkpoint input {want}")
    preds = labels if gt_as_pred else predict(net, np.stack(grids))
    cm = ConfusionMatrix()
    for p, g in zip(preds, labels):
        cm.accumulate(p, g)
    csv = report_csv(cm)
    if out:
        Path(out).write_text(csv)
        write_manifest(Path(str(out) + ".manifest.json"), "eval", {"gt_as_pred": gt_as_pred},
                       {"checkpoint": str(checkpoint), "data_dir": str(data_dir), "frames": stems},
                       {"metrics": str(out)})
    sys.stdout.write(csv)
    return 0


def cmd_infer(checkpoint, scan_file, out, export_ppm: bool = False) -> int:
    net, spec, _ = load_checkpoint(Path(checkpoint).read_bytes())
    cloud = load_kitti_scan(scan_file)
    grid = project(cloud, spec).to_chw()
    labels = predict(net, grid[None])[0]
    out = Path(out)
    tnsr.save_tensor(out, labels)
    outputs = {"labels": str(out)}
    if export_ppm:
        ppm = out.with_suffix(".ppm")
        ppm.write_bytes(write_ppm(labels_to_ppm_rgb(labels)))
        outputs["ppm"] = str(ppm)
    write_manifest(Path(str(out) + ".manifest.json"), "infer", {"export_ppm": export_ppm},
                   {"checkpoint": str(checkpoint), "scan": str(scan_file)}, outputs)
    counts = np.bincount(labels.ravel(), minlength=3)
    print(f"{grid_hw(spec)} cells: " + ", ".join(f"{n}={c}" for n, c in zip(CLASS_NAMES, counts)))
    return 0


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="salsanet", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic KITTI-style dataset")
    p.add_argument("out_dir")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("autolabel", help="transfer camera labels onto LiDAR scans")
    p.add_argument("scan_dir")
    p.add_argument("calib_dir")
    p.add_argument("mask_dir")
    p.add_argument("box_dir")
    p.add_argument("out_dir")
    p.add_argument("--vehicle-mask-dir")
    p.add_argument("--threshold", type=int, default=128)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("project", help="rasterise labelled clouds into grid images")
    p.add_argument("labeled_dir")
    p.add_argument("out_dir")
    p.add_argument("--view", default="bev", choices=("bev", "sfv"))
    p.add_argument("--config", help="key = value file with grid parameters")
    p.add_argument("--export-ppm", action="store_true")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir")
    p.add_argument("--out-dir")

    p = sub.add_parser("eval", help="per-class precision/recall/IoU of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.add_argument("--out")
    p.add_argument("--gt-as-pred", action="store_true",
                   help="bypass the model and score ground truth against itself")

    p = sub.add_parser("infer", help="segment one scan")
    p.add_argument("checkpoint")
    p.add_argument("scan_file")
    p.add_argument("out")
    p.add_argument("--export-ppm", action="store_true")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args.out_dir, args.frames, args.seed)
        if args.command == "autolabel":
            return cmd_autolabel(args.scan_dir, args.calib_dir, args.mask_dir, args.box_dir, args.out_dir,
                                 args.vehicle_mask_dir, args.threshold, args.jobs)
        if args.command == "project":
            return cmd_project(args.labeled_dir, args.view, args.out_dir, args.export_ppm, args.config, args.jobs)
        if args.command == "train":
            return cmd_train(args.config, args.seed, args.data_dir, args.out_dir)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.data_dir, args.out, args.gt_as_pred)
        if args.command == "infer":
            return cmd_infer(args.checkpoint, args.scan_file, args.out, args.export_ppm)
    except (CliError, ConfigError, TrainingError, ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
