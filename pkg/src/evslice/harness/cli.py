"""Command-line entry point: ``evslice <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
Log verbosity comes from ``EVSLICE_LOG`` (error|warn|info|debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from ..events import guess_format, micro_bin_features, parse_events, slice_window
from ..slicer import DEFAULT_N_STEPS, load_model, run_slicer, slice_points
from ..synthetic import SyntheticSceneSpec
from . import pipeline as pl
from .dataset import load_label_map, write_dataset, write_scene
from .metrics import IOU_50_95, eval_map

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _out_path(arg, config: pl.PipelineConfig, name: str) -> Path:
    return Path(arg) if arg else config.output_dir / name


def _emit(text: str, out) -> None:
    if out:
        pl.write_atomic({Path(out): text})
    else:
        sys.stdout.write(text)


def _stage(name, fn, *args):
    return pl._stage(name, fn, *args)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    with open(args.spec) as fh:
        doc = json.load(fh)
    if "objects" in doc:
        spec = SyntheticSceneSpec.from_json(doc)
        ev, gt = write_scene(spec, args.out, args.format)
        print(json.dumps({"events": str(ev), "ground_truth": str(gt)}))
    else:
        cfg = write_dataset(doc, args.out, args.window_us)
        print(json.dumps({"config": str(cfg)}))
    return EXIT_OK


def cmd_slice(args) -> int:
    model, lif = load_model(args.model)
    fmt = args.format or guess_format(args.events)
    stream = parse_events(args.events, fmt, args.width, args.height)
    if args.window_us:
        cfg = pl.SlicerSettings(n_steps=args.n_steps, window_us=args.window_us, lif=lif)
        segments = pl.segment_stream(stream, model, cfg)
    else:
        feats = micro_bin_features(stream, args.n_steps)
        segments = slice_points(run_slicer(model, feats, lif), feats).segments
    doc = {"schema_version": pl.SCHEMA_VERSION, "events": len(stream),
           "segments": [{"t_start": int(a), "t_end": int(b),
                         "events": len(slice_window(stream, a, b))} for a, b in segments]}
    _emit(pl.dumps(doc), args.out)
    return EXIT_OK


def cmd_train_slicer(args) -> int:
    config = pl.load_config(args.config)
    inputs = pl.load_inputs(config)
    model, _, _ = _stage("train-slicer", pl.stage_train_slicer, config, inputs)
    pl.write_atomic({_out_path(args.out, config, "slicer_model.json"):
                     pl.model_to_json(model, config.slicer.lif) + "\n"})
    return EXIT_OK


def cmd_distill(args) -> int:
    config = pl.load_config(args.config)
    inputs = pl.load_inputs(config)
    model, _ = load_model(_out_path(args.model, config, "slicer_model.json"))
    head, history, _ = _stage("distill", pl.stage_distill, config, inputs, model)
    pl.write_atomic({_out_path(args.out, config, "projection_head.json"):
                     pl.head_json(head, history)})
    return EXIT_OK


def cmd_train_head(args) -> int:
    config = pl.load_config(args.config)
    inputs = pl.load_inputs(config)
    model, _ = load_model(_out_path(args.model, config, "slicer_model.json"))
    head = pl.load_stage_head(_out_path(args.head, config, "projection_head.json"))
    head, bank, history = _stage("train-head", pl.stage_train_head, config, inputs, model, head)
    pl.write_atomic({_out_path(args.out, config, "text_bank.json"):
                     pl.bank_json(head, bank, history)})
    return EXIT_OK


def cmd_infer(args) -> int:
    config = pl.load_config(args.config)
    inputs = pl.load_inputs(config)
    model, _ = load_model(_out_path(args.model, config, "slicer_model.json"))
    head, bank = pl.load_stage_bank(_out_path(args.bank, config, "text_bank.json"), inputs,
                                    config.seeds["background"])
    dets, gts = _stage("infer", pl.stage_infer, config, inputs, model, head, bank)
    pl.write_atomic({
        _out_path(args.dets, config, "detections.json"): pl.dumps(pl.detections_json(dets)),
        _out_path(args.gt, config, "ground_truth.json"): pl.dumps(pl.gt_json(gts)),
    })
    return EXIT_OK


def cmd_eval(args) -> int:
    dets = pl.load_detections(args.dets)
    gts = pl.load_gt_records(args.gt)
    classes = pl.class_splits(load_label_map(args.label_map)) if args.label_map else None
    iou_thresholds = IOU_50_95 if args.iou is None else args.iou
    report = _stage("eval", eval_map, dets, gts, iou_thresholds, classes)
    _emit(pl.dumps({"schema_version": pl.SCHEMA_VERSION, **report.to_json()}), args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    config = pl.load_config(args.config)
    dets = pl.load_detections(_out_path(args.dets, config, "detections.json"))
    gts = pl.load_gt_records(_out_path(args.gt, config, "ground_truth.json"))
    labels = load_label_map(config.path("label_map"))
    report = _stage("eval", pl.stage_eval, dets, gts, labels)
    text = pl.dumps(pl.report_json(report, pl.run_manifest(config)))
    pl.write_atomic({_out_path(args.out, config, "report.json"): text})
    return EXIT_OK


def cmd_run(args) -> int:
    config = pl.load_config(args.config)
    result = pl.run_pipeline(config)
    print(json.dumps({"map_50": result.report.map_50, "map_50_95": result.report.map_50_95}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evslice", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def with_config(sp):
        sp.add_argument("--config", required=True,
                        help="pipeline configuration JSON (paths, slicer, distill, head, seeds)")

    g = sub.add_parser("gen-synthetic", help="write a synthetic scene or dataset")
    g.add_argument("--spec", required=True,
                   help="scene spec JSON (with 'objects') or dataset spec JSON")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--format", choices=("csv", "binary"), default="csv",
                   help="event file format for a single scene (default: csv)")
    g.add_argument("--window-us", type=int, default=20000,
                   help="processing window written into a dataset's pipeline.json")
    g.set_defaults(fn=cmd_gen_synthetic)

    s = sub.add_parser("slice", help="slice an event file with a trained slicer model")
    s.add_argument("--events", required=True, help="events file (.csv, .bin or .evt)")
    s.add_argument("--model", required=True, help="slicer model JSON")
    s.add_argument("--format", choices=("csv", "binary"), help="override format detection")
    s.add_argument("--width", type=int, help="sensor width (default: from data)")
    s.add_argument("--height", type=int, help="sensor height (default: from data)")
    s.add_argument("--n-steps", type=int, default=DEFAULT_N_STEPS,
                   help=f"micro-bins per processing window (default: {DEFAULT_N_STEPS})")
    s.add_argument("--window-us", type=int,
                   help="processing window length; default treats the file as one window")
    s.add_argument("--out", help="output JSON (default: stdout)")
    s.set_defaults(fn=cmd_slice)

    t = sub.add_parser("train-slicer", help="fit the slicer on detection feedback")
    with_config(t)
    t.add_argument("--out", help="model JSON (default: <output_dir>/slicer_model.json)")
    t.set_defaults(fn=cmd_train_slicer)

    d = sub.add_parser("distill", help="fit the projection head on teacher embeddings")
    with_config(d)
    d.add_argument("--model", help="slicer model JSON (default: <output_dir>/slicer_model.json)")
    d.add_argument("--out", help="head JSON (default: <output_dir>/projection_head.json)")
    d.set_defaults(fn=cmd_distill)

    h = sub.add_parser("train-head", help="fit the background embedding and projection")
    with_config(h)
    h.add_argument("--model", help="slicer model JSON (default: <output_dir>/slicer_model.json)")
    h.add_argument("--head", help="head JSON (default: <output_dir>/projection_head.json)")
    h.add_argument("--out", help="bank JSON (default: <output_dir>/text_bank.json)")
    h.set_defaults(fn=cmd_train_head)

    i = sub.add_parser("infer", help="detect and classify on the eval streams")
    with_config(i)
    i.add_argument("--model", help="slicer model JSON (default: <output_dir>/slicer_model.json)")
    i.add_argument("--bank", help="bank JSON (default: <output_dir>/text_bank.json)")
    i.add_argument("--dets", help="detections JSON (default: <output_dir>/detections.json)")
    i.add_argument("--gt", help="segment ground truth JSON (default: <output_dir>/ground_truth.json)")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="compute AP / mAP for detections against ground truth")
    e.add_argument("--dets", required=True, help="detections JSON")
    e.add_argument("--gt", required=True, help="ground truth JSON")
    e.add_argument("--label-map", help="label map JSON; enables base/novel aggregates")
    e.add_argument("--iou", type=float, nargs="+",
                   help="IoU thresholds for mAP (default: 0.50:0.05:0.95)")
    e.add_argument("--out", help="report JSON (default: stdout)")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="evaluation report with run manifest")
    with_config(r)
    r.add_argument("--dets", help="detections JSON (default: <output_dir>/detections.json)")
    r.add_argument("--gt", help="ground truth JSON (default: <output_dir>/ground_truth.json)")
    r.add_argument("--out", help="report JSON (default: <output_dir>/report.json)")
    r.set_defaults(fn=cmd_report)

    u = sub.add_parser("run", help="run every stage in memory and write all outputs")
    with_config(u)
    u.set_defaults(fn=cmd_run)
    return p


def _configure_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("EVSLICE_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    try:
        return args.fn(args)
    except pl.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (pl.ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
