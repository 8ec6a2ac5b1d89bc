"""``s3kit`` command line: one binary, one subcommand per pipeline step.

Every subcommand that writes an output also writes ``<output>.manifest.json``
(or ``manifest.json`` inside an output directory) recording the resolved
configuration, the sha256 of every input file, the seed and the tool version.

Exit codes: 0 success, 2 input or schema error, 3 model or config error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .datamodel import (
    load_annotations, load_remap, relabel_dataset_with_gt, remap_labels,
    save_annotations,
)
from .errors import (
    BadTarget, ConfigError, DivergedLoss, EmptyDataset, MalformedRle, NonFiniteValue, ParseError,
    SchemaError, ShapeMismatch, SingularAngle, SizeMismatch, TruncatedFile, VersionMismatch,
)
from .experiments import desk_schedule
from .metrics import EvalReport, evaluate, format_table
from .msma import (
    TrainExample, TrainSchedule, cel_schedule, init_model, level_shapes_of, load_model,
    model_digest, reference_schedule, relabel, save_model, train,
)
from .suppress import SuppressConfig, suppress_frames
from .synth import SynthConfig, aspect_report, generate, read_features, read_scene, write_scene

log = logging.getLogger("s3kit")

EXIT_OK, EXIT_INPUT, EXIT_MODEL, EXIT_DIVERGED = 0, 2, 3, 4

INPUT_ERRORS = (ParseError, SchemaError, MalformedRle, SizeMismatch, EmptyDataset, TruncatedFile,
                OSError)
MODEL_ERRORS = (ConfigError, VersionMismatch, ShapeMismatch, BadTarget)
NUMERIC_ERRORS = (DivergedLoss, NonFiniteValue, SingularAngle)

NAMED_SCHEDULES = {
    "reference": reference_schedule,
    "cel": cel_schedule,
    "desk": lambda: desk_schedule("arc"),
    "desk-cel": lambda: desk_schedule("ce"),
}


class ModelFileError(Exception):
    """A model file that cannot be used; reported with the model exit code."""


# -- helpers ---------------------------------------------------------------------------


def thread_count() -> int:
    raw = os.environ.get("S3KIT_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"S3KIT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("S3KIT_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def ordered_map(fn, items):
    """``map`` over frames with at most S3KIT_THREADS workers; results keep input order."""
    items = list(items)
    workers = min(thread_count(), max(len(items), 1))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def input_digests(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            out[str(q)] = file_digest(q)
    return out


def write_manifest(target: Path, subcommand: str, config: dict, inputs, seed=None) -> Path:
    target = Path(target)
    path = target / "manifest.json" if target.is_dir() else target.with_name(
        target.name + ".manifest.json")
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "inputs": input_digests(inputs),
        "seed": seed,
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def resolve(flags: dict, config_file, defaults: dict) -> dict:
    """Flags beat the config file, which beats the defaults."""
    merged = dict(defaults)
    if config_file:
        file_cfg = read_json(config_file)
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{config_file}: config must be a JSON object")
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise ConfigError(f"{config_file}: unknown config keys {unknown}")
        merged.update(file_cfg)
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def load_model_checked(path):
    try:
        return load_model(path)
    except (OSError, VersionMismatch, ValueError) as exc:
        raise ModelFileError(f"cannot load model {path}: {exc}") from None


# -- subcommands -------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    gt, pred = load_annotations(args.gt), load_annotations(args.pred)
    report = evaluate(gt, pred)
    print(format_table(report, gt.classes))
    if args.out:
        write_json(report.to_json(), args.out)
        write_manifest(Path(args.out), "evaluate", {}, [args.gt, args.pred])
    return EXIT_OK


def cmd_nms(args) -> int:
    cfg = resolve(
        {"mode": args.mode, "iou_threshold": args.iou, "top_k": args.top_k,
         "score_threshold": args.score_thresh},
        args.config,
        {"mode": "cross", **vars(SuppressConfig())},
    )
    if cfg["mode"] not in ("cross", "standard"):
        raise ConfigError(f"mode must be 'cross' or 'standard', got {cfg['mode']!r}")
    sc = SuppressConfig(cfg["score_threshold"], cfg["top_k"], cfg["iou_threshold"])
    pred = load_annotations(args.pred)
    kept = ordered_map(lambda insts: suppress_frames(insts, sc, cfg["mode"]),
                       pred.by_frame().values())
    save_annotations(pred.with_instances(i for frame in kept for i in frame), args.out)
    write_manifest(Path(args.out), "nms", cfg, [args.pred] + ([args.config] if args.config else []))
    return EXIT_OK


def cmd_relabel(args) -> int:
    model = load_model_checked(args.model)
    pred = load_annotations(args.pred)
    pyramids = read_features(args.features, pred.frame_ids)
    frames = list(pred.by_frame().items())
    results = ordered_map(lambda fi: relabel(model, fi[1], pyramids[fi[0]]), frames)
    for (fid, _), (_, flagged) in zip(frames, results):
        for iid in flagged:
            log.warning("frame %s instance %d: mask selects no feature cell, label kept", fid, iid)
    save_annotations(pred.with_instances(i for insts, _ in results for i in insts), args.out)
    write_manifest(Path(args.out), "relabel", {"model_digest": model_digest(model)},
                   [args.pred, args.model, args.features])
    return EXIT_OK


def cmd_relabel_oracle(args) -> int:
    pred, gt = load_annotations(args.pred), load_annotations(args.gt)
    save_annotations(relabel_dataset_with_gt(pred, gt, args.iou), args.out)
    write_manifest(Path(args.out), "relabel-oracle", {"iou_threshold": args.iou},
                   [args.pred, args.gt])
    return EXIT_OK


def cmd_remap(args) -> int:
    ds = load_annotations(args.pred)
    mapping, frame_ids = load_remap(args.mapping)
    save_annotations(remap_labels(ds, mapping, frame_ids), args.out)
    write_manifest(Path(args.out), "remap", {}, [args.pred, args.mapping])
    return EXIT_OK


def load_schedule(source: str | None) -> tuple[TrainSchedule, dict]:
    """A schedule from a JSON file or a built-in name; files may carry a ``model`` section."""
    if source is None:
        return reference_schedule(), {}
    if source in NAMED_SCHEDULES and not os.path.exists(source):
        return NAMED_SCHEDULES[source](), {}
    obj = read_json(source)
    if not isinstance(obj, dict):
        raise ConfigError(f"{source}: schedule must be a JSON object")
    return TrainSchedule.from_json(obj), dict(obj.get("model", {}))


def cmd_train(args) -> int:
    schedule, model_file_cfg = load_schedule(args.schedule)
    defaults = {"embed_dim": 128, "margin": 0.5, "scale": 1.0, "monotone_tail": False}
    mcfg = dict(defaults)
    mcfg.update({k: v for k, v in model_file_cfg.items() if k in defaults})
    mcfg.update({k: v for k, v in {"embed_dim": args.embed_dim, "margin": args.margin,
                                   "scale": args.scale, "monotone_tail": args.monotone_tail}.items()
                 if v is not None})
    gt, _, pyramids = read_scene(args.data)
    examples = [TrainExample(pyramids[i.frame_id], i.bits, i.class_label) for i in gt.instances]
    if not examples:
        raise EmptyDataset(f"{args.data}: no training instances")
    model = init_model(level_shapes_of(pyramids[gt.frame_ids[0]]), gt.class_count, seed=args.seed,
                       **mcfg)
    model, history = train(model, examples, schedule, args.seed)
    for entry in history:
        log.info("%s epoch %d loss %.6f", entry.phase, entry.epoch, entry.loss)
    save_model(model, args.out)
    print(model_digest(model))
    write_manifest(Path(args.out), "train", {"schedule": schedule.to_json(), "model": mcfg},
                   [args.data] + ([args.schedule] if args.schedule and os.path.exists(args.schedule)
                                  else []), seed=args.seed)
    return EXIT_OK


def cmd_synth(args) -> int:
    base = SynthConfig().to_json()
    flags = {"seed": args.seed, "n_frames": args.frames, "label_noise": args.label_noise,
             "mask_noise": args.mask_noise}
    cfg_json = resolve(flags, args.config, base)
    cfg = SynthConfig.from_json(cfg_json)
    out = Path(args.out)
    write_scene(generate(cfg), out)
    write_manifest(out, "synth", cfg.to_json(), [args.config] if args.config else [], seed=cfg.seed)
    return EXIT_OK


def render_report(report: EvalReport, fmt: str, class_names=()) -> str:
    def name(c):
        return class_names[c - 1] if 0 < c <= len(class_names) else str(c)

    classes = sorted(set(report.per_class_iou) | set(report.ap50))
    if fmt == "md":
        lines = [
            "| metric | value |", "|---|---|",
            f"| Ch_IoU | {report.ch_iou:.4f} |",
            f"| ISI_IoU | {report.isi_iou:.4f} |",
            f"| mcIoU | {report.mc_iou:.4f} |",
            f"| AP50 | {report.ap50_mean:.4f} |",
            "",
            "| class | IoU | AP50 |", "|---|---|---|",
        ]
        for c in classes:
            iou, ap = report.per_class_iou.get(c), report.ap50.get(c)
            lines.append(f"| {name(c)} | {'-' if iou is None else f'{iou:.4f}'} | "
                         f"{'-' if ap is None else f'{ap:.4f}'} |")
        return "\n".join(lines) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "iou", "ap50"])
    for c in classes:
        iou, ap = report.per_class_iou.get(c), report.ap50.get(c)
        w.writerow([name(c), "" if iou is None else repr(iou), "" if ap is None else repr(ap)])
    w.writerow(["ch_iou", repr(report.ch_iou), ""])
    w.writerow(["isi_iou", repr(report.isi_iou), ""])
    w.writerow(["mc_iou", repr(report.mc_iou), ""])
    w.writerow(["ap50_mean", "", repr(report.ap50_mean)])
    return buf.getvalue()


def cmd_report(args) -> int:
    try:
        report = EvalReport.from_json(read_json(args.inp))
    except (KeyError, TypeError, AttributeError) as exc:
        raise SchemaError(f"{args.inp}: not an evaluation report ({exc})") from None
    text = render_report(report, args.format)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        write_manifest(Path(args.out), "report", {"format": args.format}, [args.inp])
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_aspect(args) -> int:
    rep = aspect_report(load_annotations(args.gt), args.threshold)
    summary = {
        "instances": len(rep.ratios),
        "threshold": rep.threshold,
        "count_above": rep.count_above,
        "fraction_above": rep.fraction_above,
        "mean_occupancy": rep.mean_occupancy,
        "histogram": rep.histogram,
    }
    print(json.dumps(summary, indent=2))
    if args.out:
        write_json(summary, args.out)
        write_manifest(Path(args.out), "aspect", {"threshold": args.threshold}, [args.gt])
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="s3kit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"s3kit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses and warnings")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("evaluate", help="Ch_IoU, ISI_IoU, mcIoU and AP50 of predictions")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("nms", help="per-frame mask suppression")
    s.add_argument("--pred", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("cross", "standard"))
    s.add_argument("--iou", type=float)
    s.add_argument("--top-k", type=int)
    s.add_argument("--score-thresh", type=float)
    s.add_argument("--config", help="JSON with mode / iou_threshold / top_k / score_threshold")
    s.set_defaults(func=cmd_nms)

    s = sub.add_parser("relabel", help="replace labels with the trained classifier's prediction")
    s.add_argument("--pred", required=True)
    s.add_argument("--features", required=True, help="directory of <frame_id>.s3t pyramids")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_relabel)

    s = sub.add_parser("relabel-oracle", help="replace labels with the matched GT label")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_relabel_oracle)

    s = sub.add_parser("remap", help="apply a class-id mapping to an annotation file")
    s.add_argument("--pred", required=True)
    s.add_argument("--mapping", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_remap)

    s = sub.add_parser("train", help="train the mask-attended classifier on a synth-style directory")
    s.add_argument("--data", required=True, help="directory with gt.json and features/")
    s.add_argument("--schedule", help="schedule JSON, or one of: " + ", ".join(NAMED_SCHEDULES))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--embed-dim", type=int)
    s.add_argument("--margin", type=float)
    s.add_argument("--scale", type=float)
    s.add_argument("--monotone-tail", action="store_true", default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="generate a seeded synthetic scene")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--label-noise", type=float)
    s.add_argument("--mask-noise", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("report", help="render an evaluation report as markdown or CSV")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--format", choices=("md", "csv"), default="md")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("aspect", help="aspect-ratio and box-occupancy diagnostics")
    s.add_argument("--gt", required=True)
    s.add_argument("--threshold", type=float, default=3.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_aspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NUMERIC_ERRORS as exc:
        code, msg = EXIT_DIVERGED, exc
    except (ModelFileError, *MODEL_ERRORS) as exc:
        code, msg = EXIT_MODEL, exc
    except INPUT_ERRORS as exc:
        code, msg = EXIT_INPUT, exc
    print(f"s3kit {args.command}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
