"""Command-line pipeline over plain files.

Subcommands mirror the batch workflow: synth -> validate -> fit-scheme ->
label -> split -> calibrate -> features -> aggregate / fuse-train /
fuse-predict -> evaluate. Intermediates are versioned text files that any
later stage can pick up.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure (non-convergence under --strict).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from zoneinfo import ZoneInfo

from . import aggregation, calibration, features, fusion, ingest, labeling, metrics, synth
from .domain import bin_index
from .features import Method
from .ingest import FormatError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class ConvergenceError(RuntimeError):
    pass


def worker_count() -> int:
    """Worker-thread cap; CROWDCALIB_THREADS overrides the CPU count."""
    env = os.environ.get("CROWDCALIB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise FormatError(f"CROWDCALIB_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


def _tz(name: str):
    try:
        return ZoneInfo(name)
    except Exception:
        raise FormatError(f"unknown timezone {name!r}") from None


def _load(args) -> ingest.Dataset:
    return ingest.load_dataset(args.data_dir, platform=getattr(args, "platform", None))


def _read_split(path: str) -> labeling.SplitAssignment:
    return labeling.read_split_csv(Path(path).read_text())


def _subset_ids(dataset, args) -> set[str]:
    all_ids = {ev.event_id for ev in dataset.events}
    if not getattr(args, "split", None):
        return all_ids
    split = _read_split(args.split)
    subset = getattr(args, "subset", "test")
    if subset == "train":
        return set(split.train_event_ids) & all_ids
    if subset == "test":
        return set(split.test_event_ids) & all_ids
    return all_ids


# ---------------------------------------------------------------------------
# Subcommands


def cmd_validate(args) -> int:
    dataset = _load(args)
    kinds: dict[str, int] = {}
    for ev in dataset.events:
        for obs in ev.frames:
            kinds[obs.payload_kind] = kinds.get(obs.payload_kind, 0) + 1
    print(f"platform {dataset.platform_config.platform}")
    print(f"cameras: {', '.join(dataset.platform_config.cameras)}")
    print(f"events: {len(dataset.events)}")
    for kind in sorted(kinds):
        print(f"frames[{kind}]: {kinds[kind]}")
    print(f"weekly stats: {'present' if dataset.bin_stats is not None else 'absent'}")
    return EXIT_OK


def cmd_fit_scheme(args) -> int:
    dataset = _load(args)
    scheme = labeling.fit_scheme(
        [ev.occupancy for ev in dataset.events], dataset.platform_config.platform
    )
    Path(args.out).write_text(labeling.write_scheme_csv([scheme]))
    print(f"scheme for {scheme.platform}: t50={scheme.t50} t75={scheme.t75} t98={scheme.t98}")
    return EXIT_OK


def cmd_label(args) -> int:
    dataset = _load(args)
    schemes = labeling.read_scheme_csv(Path(args.scheme).read_text())
    platform = dataset.platform_config.platform
    if platform not in schemes:
        raise FormatError(f"{args.scheme}: no scheme for platform {platform!r}")
    labels = labeling.label_events(dataset.events, schemes[platform])
    Path(args.out).write_text(labeling.write_labels_csv(labels))
    print(f"labeled {len(labels)} events")
    return EXIT_OK


def cmd_split(args) -> int:
    labels = labeling.read_labels_csv(Path(args.labels).read_text())
    split = labeling.stratified_split(labels, args.ratio, args.seed)
    Path(args.out).write_text(labeling.write_split_csv(split))
    print(f"split: {len(split.train_event_ids)} train / {len(split.test_event_ids)} test")
    return EXIT_OK


def _calibrate_one(dataset, camera, ids, args):
    mode = calibration.PoolMode(args.pool)
    samples = []
    for ev in dataset.events:
        if ev.event_id not in ids:
            continue
        for obs in ev.frames_for(camera, "mask"):
            samples.append((calibration.pool(obs.mask, args.p, args.q, mode), ev.occupancy))
    if not samples:
        raise FormatError(f"camera {camera}: no mask frames to calibrate on")
    problem = calibration.CalibrationProblem(
        camera, samples, lam=args.lam, pool_mode=mode, p=args.p, q=args.q
    )
    wm, report = calibration.fit_weight_map(problem, tol=args.tol, max_iter=args.max_iter)
    return wm, report


def cmd_calibrate(args) -> int:
    dataset = _load(args)
    ids = _subset_ids(dataset, args)
    cameras = [args.camera] if args.camera else list(dataset.platform_config.cameras)
    if args.camera and args.camera not in dataset.platform_config.cameras:
        raise FormatError(f"unknown camera {args.camera!r}")
    if args.camera:
        out_paths = {args.camera: Path(args.out)}
    else:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        out_paths = {c: out_dir / f"{c}.wmap" for c in cameras}

    results = {}
    with ThreadPoolExecutor(max_workers=min(worker_count(), len(cameras))) as pool_exec:
        futures = {
            c: pool_exec.submit(_calibrate_one, dataset, c, ids, args) for c in cameras
        }
        for c in cameras:
            results[c] = futures[c].result()

    failed = []
    for c in cameras:
        wm, report = results[c]
        out_paths[c].write_text(calibration.write_weight_map(wm))
        status = "converged" if report.converged else "NOT converged"
        print(
            f"camera {c}: {status} after {report.iterations} iterations, "
            f"residual {report.final_residual_norm:.3e}, "
            f"objective {report.objective_value:.6g} -> {out_paths[c]}"
        )
        if not report.converged:
            failed.append(c)
    if failed and args.strict:
        raise ConvergenceError(f"solver did not converge for camera(s): {', '.join(failed)}")
    return EXIT_OK


def _load_weight_maps(paths) -> dict[str, "object"]:
    maps = {}
    for path in paths:
        wm = calibration.read_weight_map(Path(path).read_text())
        maps[wm.camera] = wm
    return maps


def cmd_features(args) -> int:
    dataset = _load(args)
    method = Method(args.method)
    wmaps = _load_weight_maps(args.wmap or [])
    if method is Method.SEG_CALIBRATED and not wmaps:
        raise FormatError("seg_calibrated requires at least one --wmap file")
    aoi = dataset.platform_config.aoi
    rows = []
    skipped_cameras = set()
    for ev in dataset.events:
        for obs in ev.frames:
            try:
                if method is Method.DET_COUNT and obs.payload_kind != "boxes":
                    continue
                if method is Method.HEAD_COUNT and obs.payload_kind != "points":
                    continue
                if method in (Method.SEG_PIXELS, Method.SEG_RATIO, Method.SEG_CALIBRATED) \
                        and obs.payload_kind != "mask":
                    continue
                if method is Method.CLASS_LEVEL and obs.payload_kind != "logits":
                    continue
                if method is Method.SEG_CALIBRATED and obs.camera not in wmaps:
                    skipped_cameras.add(obs.camera)
                    continue
                rows.append(
                    features.frame_feature(
                        obs, method,
                        aoi=aoi.get(obs.camera),
                        weight_map=wmaps.get(obs.camera),
                        conf_min=args.conf_min,
                        clamp_nonnegative=args.clamp_nonnegative,
                        aoi_relative_ratio=args.aoi_ratio,
                    )
                )
            except ValueError as exc:
                raise FormatError(f"event {ev.event_id}: {exc}") from None
    if skipped_cameras:
        warnings.warn(
            f"no weight map for camera(s) {sorted(skipped_cameras)}; their frames were skipped"
        )
    Path(args.out).write_text(features.write_features_csv(rows))
    print(f"wrote {len(rows)} frame features ({method.value}) -> {args.out}")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    frame_feats = features.read_features_csv(Path(args.features).read_text())
    if args.method:
        frame_feats = [f for f in frame_feats if f.method is Method(args.method)]
    if args.camera:
        frame_feats = [f for f in frame_feats if f.camera == args.camera]
    if not frame_feats:
        raise FormatError("no features left after filtering")
    event_feats = aggregation.aggregate_events(frame_feats)
    if args.level == "event":
        Path(args.out).write_text(aggregation.write_event_features_csv(event_feats))
        print(f"wrote {len(event_feats)} event features -> {args.out}")
        return EXIT_OK

    # bin level needs arrival times and a unique (camera, method) series
    if not args.data_dir:
        raise FormatError("aggregate --level bin requires the data directory")
    methods = {f.method for f in event_feats}
    cameras = {f.camera for f in event_feats}
    if len(methods) > 1 or len(cameras) > 1:
        raise FormatError(
            f"bin series needs a unique series; filter with --method/--camera "
            f"(have methods={sorted(m.value for m in methods)}, cameras={sorted(cameras)})"
        )
    dataset = _load(args)
    events_by_id = {ev.event_id: ev for ev in dataset.events}
    missing = [f.event_id for f in event_feats if f.event_id not in events_by_id]
    if missing:
        raise FormatError(f"features reference unknown events, e.g. {missing[0]!r}")
    values = {f.event_id: f.value for f in event_feats}
    entries = aggregation.build_bin_series(values, events_by_id, _tz(args.tz), next(iter(methods)))
    Path(args.out).write_text(aggregation.write_bin_series_csv(entries))
    print(f"wrote {len(entries)} bin entries -> {args.out}")
    return EXIT_OK


def _fusion_params(args) -> fusion.GbdtParams:
    return fusion.GbdtParams(
        n_trees=args.n_trees,
        learning_rate=args.learning_rate,
        max_leaves=args.max_leaves,
        min_samples_leaf=args.min_samples_leaf,
        leaf_l2=args.leaf_l2,
    )


def cmd_fuse_train(args) -> int:
    dataset = _load(args)
    frame_feats = features.read_features_csv(Path(args.features).read_text())
    method = Method(args.method)
    rows = fusion.build_fusion_rows(dataset, method, frame_feats)
    ids = _subset_ids(dataset, args)
    rows = [r for r in rows if r.event_id in ids]
    model = fusion.train_gbdt(rows, _fusion_params(args))
    Path(args.out).write_text(fusion.write_gbdt(model))
    final_mse = model.train_mse[-1] if model.train_mse else float("nan")
    print(f"trained on {len(rows)} events, final training MSE {final_mse:.4g} -> {args.out}")
    return EXIT_OK


def cmd_fuse_predict(args) -> int:
    dataset = _load(args)
    model = fusion.read_gbdt(Path(args.model).read_text())
    frame_feats = features.read_features_csv(Path(args.features).read_text())
    method = Method(args.method)
    rows = fusion.build_fusion_rows(dataset, method, frame_feats)
    lines = ["event_id,prediction"]
    for r in rows:
        pred = fusion.predict_gbdt(model, r)
        lines.append(f"{r.event_id},{ingest.format_number(pred)}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(rows)} predictions -> {args.out}")
    return EXIT_OK


def read_predictions_csv(text: str) -> dict[str, float]:
    import csv as _csv
    import io as _io

    reader = _csv.reader(_io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("row 1: missing header") from None
    if [h.strip() for h in header] != ["event_id", "prediction"]:
        raise FormatError(f"row 1: expected header event_id,prediction, got {header}")
    out = {}
    for rowno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            out[row[0]] = float(row[1])
        except (IndexError, ValueError) as exc:
            raise FormatError(f"row {rowno}: {exc}") from None
    return out


def _event_estimates(args, dataset, ids) -> tuple[dict[str, float], str]:
    """Per-event estimates from either fused predictions or one camera's features."""
    if args.predictions:
        preds = read_predictions_csv(Path(args.predictions).read_text())
        return {k: v for k, v in preds.items() if k in ids}, "fused"
    if not args.features or not args.method:
        raise FormatError("evaluate needs --predictions or --features with --method")
    frame_feats = [
        f for f in features.read_features_csv(Path(args.features).read_text())
        if f.method is Method(args.method) and f.event_id in ids
    ]
    if args.camera:
        frame_feats = [f for f in frame_feats if f.camera == args.camera]
    cameras = {f.camera for f in frame_feats}
    if len(cameras) > 1:
        raise FormatError(
            f"features cover cameras {sorted(cameras)}; pick one with --camera "
            f"or evaluate fused predictions"
        )
    if not frame_feats:
        raise FormatError("no features left after filtering")
    event_feats = aggregation.aggregate_events(frame_feats)
    return {f.event_id: f.value for f in event_feats}, args.method


def cmd_evaluate(args) -> int:
    dataset = _load(args)
    events_by_id = {ev.event_id: ev for ev in dataset.events}
    ids = _subset_ids(dataset, args)
    tz = _tz(args.tz)

    stats = None
    if args.stats:
        by_platform = ingest.read_bin_stats_csv(Path(args.stats).read_text())
        platform = dataset.platform_config.platform
        if platform not in by_platform:
            raise FormatError(f"{args.stats}: no weekly stats for platform {platform!r}")
        stats = by_platform[platform]
    elif args.level == "bin":
        raise FormatError("evaluate --level bin requires --stats (wMAE undefined without it)")

    if args.level == "image":
        if not args.features or not args.method:
            raise FormatError("evaluate --level image needs --features and --method")
        frame_feats = [
            f for f in features.read_features_csv(Path(args.features).read_text())
            if f.method is Method(args.method) and f.event_id in ids
        ]
        if args.camera:
            frame_feats = [f for f in frame_feats if f.camera == args.camera]
        if not frame_feats:
            raise FormatError("no features left after filtering")
        pairs = [
            metrics.EvalPair(
                f"{f.event_id}/{f.camera}/{f.offset_s}",
                events_by_id[f.event_id].occupancy,
                f.value,
                bin_index(events_by_id[f.event_id].arrival_time, tz),
            )
            for f in frame_feats
        ]
        method_name = args.method
    elif args.level == "event":
        estimates, method_name = _event_estimates(args, dataset, ids)
        pairs = [
            metrics.EvalPair(
                eid, events_by_id[eid].occupancy, est,
                bin_index(events_by_id[eid].arrival_time, tz),
            )
            for eid, est in sorted(estimates.items())
            if eid in events_by_id
        ]
    else:  # bin
        estimates, method_name = _event_estimates(args, dataset, ids)
        est_bins: dict[tuple, list[float]] = {}
        truth_bins: dict[tuple, list[float]] = {}
        for eid, est in estimates.items():
            ev = events_by_id.get(eid)
            if ev is None:
                continue
            key = aggregation.day_bin_of(ev.arrival_time, tz)
            est_bins.setdefault(key, []).append(est)
            truth_bins.setdefault(key, []).append(ev.occupancy)
        pairs = []
        for key in sorted(est_bins):
            day, bod = key
            weekly = day.weekday() * 96 + bod
            y_bar = sum(truth_bins[key]) / len(truth_bins[key])
            est_bar = sum(est_bins[key]) / len(est_bins[key])
            pairs.append(metrics.EvalPair(f"{day.isoformat()}/{bod}", y_bar, est_bar, weekly))

    if not pairs:
        raise FormatError("nothing to evaluate")
    values = metrics.evaluate_pairs(pairs, stats)
    rows = [(args.level, method_name, k, v) for k, v in values.items()]
    Path(args.out).write_text(metrics.write_report_csv(rows))
    for _, _, metric, value in rows:
        print(f"{args.level} {method_name} {metric} = {value:.6g}")
    if args.plot_out:
        Path(args.plot_out).write_text(metrics.write_plot_csv(pairs))
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.config:
        config = synth.SynthConfig.from_json(Path(args.config).read_text())
    else:
        config = synth.SynthConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    synth.write_synth_dataset(config, args.out)
    print(
        f"wrote synthetic dataset: {config.n_events} events x "
        f"{config.frames_per_event} frames, {config.n_cameras} camera(s), "
        f"{config.rows}x{config.cols} px -> {args.out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> _Parser:
    parser = _Parser(prog="crowdcalib", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_dir(p, optional=False):
        if optional:
            p.add_argument("data_dir", nargs="?", help="dataset directory")
        else:
            p.add_argument("data_dir", help="dataset directory")
        p.add_argument("--platform", help="platform to load when several are present")

    p = sub.add_parser("validate", help="parse a data directory and report its contents")
    add_data_dir(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("fit-scheme", help="fit crowd-level percentile thresholds")
    add_data_dir(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_scheme)

    p = sub.add_parser("label", help="assign crowd levels to events")
    add_data_dir(p)
    p.add_argument("--scheme", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("split", help="stratified train/test split of labeled events")
    p.add_argument("--labels", required=True)
    p.add_argument("--ratio", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("calibrate", help="fit per-camera weight maps from mask frames")
    add_data_dir(p)
    p.add_argument("--camera", help="calibrate this camera only (default: all)")
    p.add_argument("--p", type=int, default=8)
    p.add_argument("--q", type=int, default=8)
    p.add_argument("--lambda", dest="lam", type=float, default=calibration.DEFAULT_LAMBDA)
    p.add_argument("--pool", choices=["max", "mean"], default="max")
    p.add_argument("--split", help="restrict to the split's train events")
    p.add_argument("--subset", choices=["train", "test", "all"], default="train")
    p.add_argument("--tol", type=float, default=calibration.DEFAULT_TOL)
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--strict", action="store_true",
                   help="exit 3 when the solver does not converge")
    p.add_argument("--out", required=True,
                   help="weight-map file (single camera) or directory (all cameras)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("features", help="extract per-frame features for one method")
    add_data_dir(p)
    p.add_argument("--method", required=True, choices=[m.value for m in Method])
    p.add_argument("--conf-min", type=float, default=features.DEFAULT_CONF_MIN)
    p.add_argument("--wmap", action="append", help="weight-map file (repeatable)")
    p.add_argument("--clamp-nonnegative", action="store_true")
    p.add_argument("--aoi-ratio", action="store_true",
                   help="seg_ratio relative to the AOI area instead of the image")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("aggregate", help="roll frame features up to events or bins")
    p.add_argument("data_dir", nargs="?", help="dataset directory (required for bins)")
    p.add_argument("--platform")
    p.add_argument("--level", required=True, choices=["event", "bin"])
    p.add_argument("--features", required=True)
    p.add_argument("--method", choices=[m.value for m in Method])
    p.add_argument("--camera")
    p.add_argument("--tz", default="UTC")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    for name, fn in (("fuse-train", cmd_fuse_train), ("fuse-predict", cmd_fuse_predict)):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} a per-method fusion model")
        add_data_dir(p)
        p.add_argument("--features", required=True)
        p.add_argument("--method", required=True, choices=[m.value for m in Method])
        p.add_argument("--out", required=True)
        if name == "fuse-train":
            p.add_argument("--split", help="restrict to the split's train events")
            p.add_argument("--subset", choices=["train", "test", "all"], default="train")
            p.add_argument("--n-trees", type=int, default=200)
            p.add_argument("--learning-rate", type=float, default=0.1)
            p.add_argument("--max-leaves", type=int, default=15)
            p.add_argument("--min-samples-leaf", type=int, default=5)
            p.add_argument("--leaf-l2", type=float, default=1.0)
        else:
            p.add_argument("--model", required=True)
        p.set_defaults(func=fn)

    p = sub.add_parser("evaluate", help="score estimates at image/event/bin level")
    add_data_dir(p)
    p.add_argument("--level", required=True, choices=["image", "event", "bin"])
    p.add_argument("--features")
    p.add_argument("--method", choices=[m.value for m in Method])
    p.add_argument("--camera")
    p.add_argument("--predictions", help="fused per-event predictions CSV")
    p.add_argument("--stats", help="weekly bin stats CSV (required at bin level)")
    p.add_argument("--split")
    p.add_argument("--subset", choices=["train", "test", "all"], default="test")
    p.add_argument("--tz", default="UTC")
    p.add_argument("--out", required=True)
    p.add_argument("--plot-out", help="also dump y,y_hat pairs for plotting")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    p.add_argument("--config", help="SynthConfig JSON (defaults used when omitted)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
