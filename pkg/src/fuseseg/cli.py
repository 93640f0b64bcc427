"""Command line entry point.

Subcommands: synth, splits, train, eval, ablate, project, remap, densify,
bundle, gradcheck, repro. Every run that produces outputs writes its
effective configuration and seed to <out>/run_config.txt so it can be
reproduced. Exit codes: 0 success, 1 validation or runtime failure, 2
usage errors.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio, evaluation, figures, geometry, sync
from .config import ConfigError, RunConfig, format_config, load_config
from .evaluation import EvalError
from .geometry import GeometryError
from .model import ModelError, load_checkpoint, predict, save_checkpoint
from .sync import SyncError
from .training import (VARIANTS, TrainingError, grad_check, jittered_params,
                       train, write_epoch_log)

_ERRORS = (ConfigError, dataio.DataError, GeometryError, SyncError, ModelError,
           TrainingError, EvalError, OSError)


def _add_config_flags(p: argparse.ArgumentParser, *names: str) -> None:
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--seed", type=int)
    for name in names:
        flag = "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name)


def _run_config(args, **extra) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items()
                 if k in RunConfig.__dataclass_fields__ and v is not None}
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return load_config(getattr(args, "config", None), overrides)


def _write_run_record(out: Path, cfg: RunConfig, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.txt").write_text(
        f"# effective configuration for: {command}\n" + format_config(cfg))


# ---------------------------------------------------------------------------
# Data commands


def _synth_gps(n: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    lat, lon = 46.05, 14.51
    rows = []
    for i in range(n):
        lat += 1e-6 * rng.uniform(-1, 1)
        lon += 1e-6 * rng.uniform(-1, 1)
        rows.append({"frame": f"{i:06d}", "latitude": lat, "longitude": lon,
                     "altitude": 280.0, "roll": rng.uniform(-2, 2),
                     "pitch": rng.uniform(-2, 2), "yaw": rng.uniform(0, 360)})
    return rows


def cmd_synth(args) -> int:
    extra = {}
    if args.frames is not None:
        extra = {"day_frames": args.frames, "night_frames": 0}
    cfg = _run_config(args, **extra)
    out = Path(args.out)
    _write_run_record(out, cfg, "synth")
    written = []
    for name, night, count, offset in (("day", False, cfg.day_frames, 0),
                                       ("night", True, cfg.night_frames, 1)):
        if count == 0 and name == "night":
            continue
        params = cfg.scene_params(night=night, seed_offset=offset)
        bundles = [dataio.synthesize_frame(params, i) for i in range(count)]
        dataio.save_sequence(bundles, out / name,
                             gps=_synth_gps(count, cfg.seed + offset))
        written.append(f"{name}:{count}")
    print(f"synth: wrote {', '.join(written)} frames under {out}")
    return 0


def cmd_splits(args) -> int:
    cfg = _run_config(args)
    manifest = dataio.load_sequence(Path(args.data))
    spec = dataio.make_splits(manifest, cfg.split, cfg.val_ratio, cfg.seed)
    dataio.save_splits(spec, manifest.root)
    print(f"splits: {cfg.split} -> train {len(spec.train)}, "
          f"val {len(spec.val)}, test {len(spec.test)}")
    return 0


# ---------------------------------------------------------------------------
# Training and evaluation commands


def _load_split_bundles(data: Path, kind: str):
    manifest = dataio.load_sequence(Path(data))
    spec = dataio.load_splits(manifest.root, kind)
    return manifest, spec


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    manifest, spec = _load_split_bundles(args.data, cfg.split)
    train_bundles = dataio.load_bundles(manifest, spec.train)
    val_bundles = dataio.load_bundles(manifest, spec.val)
    result = train(cfg.model_config(), cfg.train_config(), train_bundles, val_bundles)
    _write_run_record(out, cfg, "train")
    save_checkpoint(result.params, out / "checkpoint.ckpt")
    write_epoch_log(result.log_rows, out / "train_log.csv")
    figures.save_training_curves(result.log_rows, out / "train_curves.png")
    print(f"train[{cfg.variant}]: best val mIoU {result.best_val_miou:.4f} "
          f"at epoch {result.best_epoch}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    manifest, spec = _load_split_bundles(args.data, cfg.split)
    params = load_checkpoint(Path(args.checkpoint))
    val_bundles = dataio.load_bundles(manifest, spec.val)
    test_bundles = dataio.load_bundles(manifest, spec.test)
    val_report = evaluation.evaluate(params, val_bundles)
    test_report = evaluation.evaluate(params, test_bundles)
    _write_run_record(out, cfg, "eval")
    evaluation.emit_report({"val": val_report, "test": test_report}, out,
                           title="Evaluation")
    evaluation.write_radar_csv(val_report, test_report, out / "radar.csv")
    figures.save_radar_chart(
        {"model": evaluation.read_radar_csv(out / "radar.csv")}, out / "radar.png")
    for i, bundle in enumerate(test_bundles[:3]):
        figures.save_frame_panel(bundle, predict(params, bundle),
                                 out / f"panel_{i}.png")
    print(f"eval: val mIoU {val_report.miou:.4f}, test mIoU {test_report.miou:.4f}; "
          f"reports in {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    manifest, spec = _load_split_bundles(args.data, cfg.split)
    params = load_checkpoint(Path(args.checkpoint))
    test_bundles = dataio.load_bundles(manifest, spec.test)
    report = evaluation.ablation_sweep(params, test_bundles, cfg.modalities)
    _write_run_record(out, cfg, "ablate")
    rows = evaluation.ablation_rows(report)
    evaluation.emit_report(rows, out, csv_name="ablation.csv",
                           md_name="ablation.md", title="Modality ablation")
    figures.save_ablation_chart({k: r.miou for k, r in rows.items()},
                                out / "ablation.png")
    mono = "monotonic" if report.monotonic() else "not monotonic"
    print(f"ablate: {len(rows)} subsets, scores {mono} in subset size; "
          f"reports in {out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _run_config(args)
    model_cfg = cfg.model_config()
    params = jittered_params(model_cfg, cfg.seed)
    bundle = dataio.synthesize_frame(cfg.scene_params(night=False), 0)
    err = grad_check(params, bundle, cfg.train_config(), eps=cfg.gc_eps,
                     n_samples=cfg.gc_samples, seed=cfg.seed)
    ok = err < args.tol
    print(f"gradcheck[{cfg.variant}]: max relative error {err:.3e} over "
          f"{cfg.gc_samples} parameters ({'ok' if ok else 'FAILED'}, tol {args.tol:g})")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# Geometry utility commands


def _single_sequence(data: Path) -> dataio.SequenceInfo:
    manifest = dataio.load_sequence(Path(data))
    if len(manifest.sequences) != 1:
        raise dataio.DataError(
            f"expected one sequence, found {sorted(manifest.sequences)}; "
            f"point --data at a sequence directory")
    return next(iter(manifest.sequences.values()))


def _frame_sparse_depth(seq: dataio.SequenceInfo, stem: str, camera: str):
    if camera not in seq.cameras:
        raise dataio.DataError(f"no calibration for camera {camera!r} in {seq.name}")
    path = seq.directory / "lidar" / f"{stem}.bin"
    if not path.exists():
        raise dataio.DataError(f"no LIDAR returns for frame {stem}")
    cloud = geometry.PointCloud(dataio.read_point_records(path))
    cam, ext = seq.cameras[camera], seq.extrinsics[camera]
    return geometry.project_points(cloud, ext, cam), cam


def cmd_project(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    seq = _single_sequence(args.data)
    sparse, cam = _frame_sparse_depth(seq, args.frame, args.camera)
    _write_run_record(out, cfg, "project")
    with open(out / "sparse_depth.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u", "v", "d"])
        for u, v, d in zip(sparse.u, sparse.v, sparse.d):
            writer.writerow([repr(u), repr(v), repr(d)])
    splat = geometry.lidar_input_image(sparse, cam, dataio.LIDAR_RANGE_M)
    dataio.write_unit_png(out / "lidar_image.png", splat)
    print(f"project: {len(sparse)} in-frustum returns for frame {args.frame}; "
          f"outputs in {out}")
    return 0


def cmd_densify(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    seq = _single_sequence(args.data)
    sparse, cam = _frame_sparse_depth(seq, args.frame, args.camera)
    dense = geometry.densify_depth(sparse, cam, args.max_controls)
    _write_run_record(out, cfg, "densify")
    dataio.write_depth_png(out / "dense_depth.png", dense.depth)
    print(f"densify: {len(sparse)} controls -> {cam.width}x{cam.height} grid, "
          f"range [{dense.depth.min():.2f}, {dense.depth.max():.2f}] m; "
          f"outputs in {out}")
    return 0


def cmd_remap(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    seq = _single_sequence(args.data)
    for camera in (args.src, args.dst):
        if camera not in seq.cameras:
            raise dataio.DataError(f"no calibration for camera {camera!r}")
    sparse, dst_cam = _frame_sparse_depth(seq, args.frame, args.dst)
    dense = geometry.densify_depth(sparse, dst_cam)
    if args.src == "rgb":
        src_img = dataio.read_rgb_jpeg(seq.directory / "rgb" / f"{args.frame}.jpg")
    else:
        src_img = dataio.read_unit_png(seq.directory / args.src / f"{args.frame}.png")
    rel = geometry.relative_extrinsics(seq.extrinsics[args.src],
                                       seq.extrinsics[args.dst])
    remapped, valid = geometry.remap_image(src_img, seq.cameras[args.src], rel,
                                           dst_cam, dense, args.sampling)
    _write_run_record(out, cfg, "remap")
    if remapped.ndim == 3:
        dataio.write_rgb_jpeg(out / "remapped.jpg", remapped)
    else:
        dataio.write_unit_png(out / "remapped.png", remapped)
    dataio.write_unit_png(out / "validity.png", valid.astype(np.float64))
    print(f"remap: {args.src} -> {args.dst}, {valid.mean() * 100:.1f}% valid; "
          f"outputs in {out}")
    return 0


def cmd_bundle(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    seq = _single_sequence(args.data)
    if not seq.timestamps:
        raise dataio.DataError(f"{seq.name}: no timestamps.csv entries")
    streams = {}
    for sensor, rows in seq.timestamps.items():
        ts = sorted(us for _, us in rows)
        if len(ts) > 1:
            period = int(statistics.median(b - a for a, b in zip(ts, ts[1:])))
        else:
            period = dataio.FRAME_PERIOD_US
        streams[sensor] = sync.StreamIndex(sensor, tuple(ts), max(1, period))
    if args.reference not in streams:
        raise dataio.DataError(f"reference sensor {args.reference!r} not in "
                               f"{sorted(streams)}")
    reference = streams.pop(args.reference)
    others = [streams[k] for k in sorted(streams)]
    records = sync.bundle(reference, others)
    _write_run_record(out, cfg, "bundle")
    with open(out / "bundles.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["reference_t"]
        for stream in others:
            header += [f"{stream.sensor_id}_index", f"{stream.sensor_id}_delta_us",
                       f"{stream.sensor_id}_valid"]
        writer.writerow(header)
        for rec in records:
            row = [rec.reference_t]
            for stream in others:
                m = rec.matches[stream.sensor_id]
                row += [m.index, m.delta_t, int(m.valid)]
            writer.writerow(row)
    n_valid = sum(all(m.valid for m in rec.matches.values()) for rec in records)
    print(f"bundle: {len(records)} reference timestamps, {n_valid} fully valid; "
          f"outputs in {out}")
    return 0


# ---------------------------------------------------------------------------
# End-to-end reproduction


def cmd_repro(args) -> int:
    epochs = args.epochs if args.epochs is not None else 15
    cfg = _run_config(args, epochs=epochs)
    out = Path(args.out)
    data = out / "data"
    _write_run_record(out, cfg, "repro")

    ns = argparse.Namespace(**{**vars(args), "out": data, "frames": None})
    cmd_synth(ns)
    manifest = dataio.load_sequence(data)
    spec = dataio.make_splits(manifest, cfg.split, cfg.val_ratio, cfg.seed)
    dataio.save_splits(spec, manifest.root)
    print(f"repro: split {cfg.split} -> train {len(spec.train)}, "
          f"val {len(spec.val)}, test {len(spec.test)}")

    train_bundles = dataio.load_bundles(manifest, spec.train)
    val_bundles = dataio.load_bundles(manifest, spec.val)
    test_bundles = dataio.load_bundles(manifest, spec.test)

    radar_series, summary = {}, {}
    for variant in ("baseline", "h", "d", "dh"):
        vcfg = replace(cfg, variant=variant)
        run_dir = out / f"run_{variant}"
        run_dir.mkdir(parents=True, exist_ok=True)
        result = train(vcfg.model_config(), vcfg.train_config(),
                       train_bundles, val_bundles)
        save_checkpoint(result.params, run_dir / "checkpoint.ckpt")
        write_epoch_log(result.log_rows, run_dir / "train_log.csv")
        figures.save_training_curves(result.log_rows, run_dir / "train_curves.png")
        val_report = evaluation.evaluate(result.params, val_bundles)
        test_report = evaluation.evaluate(result.params, test_bundles)
        evaluation.emit_report({"val": val_report, "test": test_report}, run_dir)
        evaluation.write_radar_csv(val_report, test_report, run_dir / "radar.csv")
        radar_series[variant] = evaluation.read_radar_csv(run_dir / "radar.csv")
        summary[variant] = (val_report, test_report)
        print(f"repro[{variant}]: val mIoU {val_report.miou:.4f}, "
              f"test mIoU {test_report.miou:.4f}")
        if variant == "d":
            ablation = evaluation.ablation_sweep(result.params, test_bundles,
                                                 cfg.modalities)
            rows = evaluation.ablation_rows(ablation)
            evaluation.emit_report(rows, run_dir, csv_name="ablation.csv",
                                   md_name="ablation.md", title="Modality ablation")
            figures.save_ablation_chart({k: r.miou for k, r in rows.items()},
                                        run_dir / "ablation.png")

    figures.save_radar_chart(radar_series, out / "radar.png")
    lines = ["# Variant comparison", "",
             "| variant | double pass | multihead | mIoU (val) | mIoU (test) "
             "| dynamic obstacle (test) |", "|---|---|---|---|---|---|"]
    for variant, (val_report, test_report) in summary.items():
        double, multi = VARIANTS[variant]
        lines.append(
            f"| {variant} | {'yes' if double else 'no'} | {'yes' if multi else 'no'} "
            f"| {val_report.miou:.2f} | {test_report.miou:.2f} "
            f"| {test_report.per_class_iou[dataio.DYNAMIC_OBSTACLE]:.2f} |")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    print(f"repro: full comparison written to {out / 'report.md'}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fuseseg",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic day/night sequences")
    _add_config_flags(p, "day_frames", "night_frames", "alpha", "sigma",
                      "height", "width", "location", "difficult_fraction")
    p.add_argument("--frames", type=int,
                   help="shorthand: day frames only, no night sequence")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("splits", help="materialize split manifests")
    _add_config_flags(p, "split", "val_ratio")
    p.add_argument("--data", type=Path, required=True)
    p.set_defaults(func=cmd_splits)

    p = sub.add_parser("train", help="train one variant on a split")
    _add_config_flags(p, "variant", "split", "epochs", "lr", "batch_size",
                      "optimizer", "height", "width", "stages", "channels")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_config_flags(p, "split")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="modality-subset sweep of a checkpoint")
    _add_config_flags(p, "split", "modalities")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("project", help="project LIDAR returns onto a camera")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--camera", default="rgb")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("densify", help="densify projected LIDAR depth")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--camera", default="rgb")
    p.add_argument("--max-controls", type=int, default=geometry.MAX_CONTROLS)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_densify)

    p = sub.add_parser("remap", help="remap an image between calibrated cameras")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--src", default="thermal")
    p.add_argument("--dst", default="rgb")
    p.add_argument("--sampling", choices=("bilinear", "nearest"), default="bilinear")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_remap)

    p = sub.add_parser("bundle", help="pair sensor streams to reference timestamps")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--reference", default="rgb")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_bundle)

    p = sub.add_parser("gradcheck", help="verify gradients by finite differences")
    _add_config_flags(p, "variant", "gc_eps", "gc_samples")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("repro", help="synth + splits + all variants + reports")
    _add_config_flags(p, "split", "val_ratio", "lr", "batch_size", "optimizer",
                      "day_frames", "night_frames", "alpha", "sigma")
    p.add_argument("--epochs", type=int, help="default 15 for the full chain")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_repro)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return err.code if isinstance(err.code, int) else 2
    try:
        return args.func(args)
    except _ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
