"""Command-line entry point.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from dotuda import gradsuite
from dotuda.data import SyntheticSpec, generate_pair, load_dataset, save_dataset
from dotuda.errors import ConfigError, DimensionError, FormatError
from dotuda.losses import LossWeights
from dotuda.model import DotVitConfig
from dotuda.pseudo_labels import MetricKind, write_state_file
from dotuda.trainer import (
    METRIC_COLUMNS,
    TrainConfig,
    evaluate,
    load_checkpoint,
    pseudo_label_quality,
    refine_labels,
    train,
)

log = logging.getLogger("dotuda")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
CONFIG_SECTIONS = ("data", "model", "train", "out", "checkpoint_every")


class UsageError(Exception):
    pass


class RunFailure(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False)


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise RunFailure(f"file not found: {p}")
    return p


def _checked(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown keys in {where}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (ConfigError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid {where}: {exc}") from exc


# gen-data -------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = _checked(
        SyntheticSpec,
        {
            "num_classes": args.classes,
            "samples_per_class": args.samples_per_class,
            "image_size": args.image_size,
            "seed": args.seed,
            "shift": {
                "brightness_offset": args.brightness,
                "noise_sigma": args.noise,
                "invert": args.invert,
                "background_texture_amplitude": args.texture,
            },
        },
        "dataset spec",
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source, target = generate_pair(spec)
    save_dataset(source, out / "source.dset")
    save_dataset(target, out / "target.dset")
    (out / "manifest.json").write_text(_dump({"spec": spec.to_dict(), "files": ["source.dset", "target.dset"]}) + "\n")
    print(_dump({"source": str(out / "source.dset"), "target": str(out / "target.dset"), "samples": len(source)}))
    return EXIT_OK


# train ------------------------------------------------------------------------------

def build_run_config(args) -> dict:
    """Merge the config file with flag overrides; flags win."""
    raw: dict = {}
    if args.config:
        path = _require_file(args.config)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: top level must be an object")
        unknown = sorted(set(raw) - set(CONFIG_SECTIONS))
        if unknown:
            raise UsageError(f"unknown keys in config: {', '.join(unknown)}")
    data = dict(raw.get("data", {}))
    model = dict(raw.get("model", {}))
    train_kw = dict(raw.get("train", {}))
    weights = dict(train_kw.pop("weights", {}))
    for key in data:
        if key not in ("source", "target"):
            raise UsageError(f"unknown keys in data: {key}")
    if args.source:
        data["source"] = args.source
    if args.target:
        data["target"] = args.target
    for flag, key in (("seed", "seed"), ("lr", "lr"), ("stage1_lr", "stage1_lr"), ("stage1_epochs", "stage1_epochs"),
                      ("stage2_epochs", "stage2_epochs"), ("batch_size", "batch_size"), ("metric", "metric"),
                      ("refine_start", "refine_start")):
        value = getattr(args, flag)
        if value is not None:
            train_kw[key] = value
    if args.warm_start:
        train_kw["warm_start"] = True
    if args.no_refine:
        train_kw["refine"] = False
    if args.no_augment:
        train_kw["augment"] = False
    for flag, key in (("lam", "lam"), ("beta", "beta"), ("tau", "tau")):
        value = getattr(args, flag)
        if value is not None:
            weights[key] = value
    if "source" not in data or "target" not in data:
        raise UsageError("source and target datasets are required (config 'data' section or --source/--target)")
    out = args.out or raw.get("out")
    if not out:
        raise UsageError("an output directory is required (--out or config 'out')")
    lw = _checked(LossWeights, weights, "train.weights")
    train_cfg = _checked(TrainConfig, {**train_kw, "weights": lw}, "train")
    model_cfg = _checked(DotVitConfig, model, "model")
    every = args.checkpoint_every if args.checkpoint_every is not None else raw.get("checkpoint_every", 0)
    return {"data": data, "out": str(out), "model": model_cfg, "train": train_cfg, "checkpoint_every": int(every)}


def cmd_train(args) -> int:
    run = build_run_config(args)
    source = load_dataset(_require_file(run["data"]["source"]))
    target = load_dataset(_require_file(run["data"]["target"]))
    if args.resume:
        _require_file(args.resume)
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    effective = {
        "data": run["data"],
        "out": run["out"],
        "model": run["model"].to_dict(),
        "train": run["train"].to_dict(),
        "checkpoint_every": run["checkpoint_every"],
    }
    (out / "config.json").write_text(_dump(effective) + "\n")
    try:
        state, records = train(source, target, run["model"], run["train"], out_dir=out,
                               checkpoint_every=run["checkpoint_every"], resume_from=args.resume)
    except (ConfigError, DimensionError) as exc:
        raise RunFailure(str(exc)) from exc
    final = state.metrics_log[-1] if state.metrics_log else (records[-1] if records else {})
    print(_dump({"out": str(out), "epochs": state.epoch,
                 "target_acc": final.get("target_acc"), "source_acc": final.get("source_acc")}))
    return EXIT_OK


# eval / refine-once --------------------------------------------------------------------

def _load_compatible(checkpoint, dataset):
    state, model_cfg, cfg = load_checkpoint(_require_file(checkpoint))
    data = load_dataset(_require_file(dataset))
    expected = (model_cfg.in_channels, model_cfg.image_size, model_cfg.image_size)
    if tuple(data.images.shape[1:]) != expected:
        raise RunFailure(f"dataset images {data.images.shape[1:]} do not match checkpoint input shape {expected}")
    if data.num_classes > model_cfg.num_classes:
        raise RunFailure(f"dataset has {data.num_classes} classes, checkpoint model has {model_cfg.num_classes}")
    return state, cfg, data


def cmd_eval(args) -> int:
    state, _, data = _load_compatible(args.checkpoint, args.dataset)
    res = evaluate(state.model, data, head=args.head, space=args.space or args.head, workers=args.workers)
    print(_dump({"head": args.head, "space": args.space or args.head, **res.to_dict()}))
    return EXIT_OK


def cmd_refine_once(args) -> int:
    state, cfg, data = _load_compatible(args.checkpoint, args.dataset)
    cfg.metric = MetricKind(args.metric).value
    cfg.refine_space = args.space
    new = refine_labels(state.model, data, cfg)
    write_state_file(args.out, new)
    report = {"metric": cfg.metric, "num_samples": len(data), "aborted": new.aborted,
              "reliable_count": int(new.reliable.sum())}
    report.update(pseudo_label_quality(new, data.labels))
    if args.report:
        Path(args.report).write_text(_dump(report) + "\n")
    print(_dump(report))
    return EXIT_OK


# gradcheck --------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    names = args.only or None
    if names:
        missing = sorted(set(names) - set(gradsuite.REGISTRY))
        if missing:
            raise UsageError(f"unknown gradcheck cases: {', '.join(missing)}")
    seeds = range(args.seed, args.seed + args.instances)
    results = gradsuite.run_suite(seeds, include_corrupted=args.corrupt_gradient, names=names)
    width = max(len(r.name) for r in results)
    print(f"{'case':<{width}}  kind  max_rel_err  threshold  status")
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {r.kind:<4}  {r.worst:11.3e}  {r.threshold:9.0e}  {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} case(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


# export-metrics -------------------------------------------------------------------------

def read_metrics_log(path) -> list[dict]:
    records = []
    with _require_file(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RunFailure(f"{path}:{lineno}: malformed line ({exc.msg})") from exc
            if not isinstance(rec, dict) or set(rec) != set(METRIC_COLUMNS):
                raise RunFailure(f"{path}:{lineno}: record does not match the metrics schema")
            records.append(rec)
    return records


def format_metrics(records: list[dict], fmt: str) -> str:
    if fmt == "records":
        return _dump([{c: r[c] for c in METRIC_COLUMNS} for r in records]) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for r in records:
        # repr keeps every float bit so values survive a re-parse unchanged.
        writer.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in METRIC_COLUMNS])
    return buf.getvalue()


def cmd_export_metrics(args) -> int:
    text = format_metrics(read_metrics_log(args.log), args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dotuda", description="Domain-token transformer for unsupervised adaptation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic source/target pair")
    defaults = SyntheticSpec()
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=defaults.num_classes)
    g.add_argument("--samples-per-class", type=int, default=defaults.samples_per_class)
    g.add_argument("--image-size", type=int, default=defaults.image_size)
    g.add_argument("--seed", type=int, default=defaults.seed)
    g.add_argument("--brightness", type=float, default=defaults.shift.brightness_offset)
    g.add_argument("--noise", type=float, default=defaults.shift.noise_sigma)
    g.add_argument("--texture", type=float, default=defaults.shift.background_texture_amplitude)
    g.add_argument("--invert", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run source-only training then adaptation")
    t.add_argument("--config")
    t.add_argument("--source")
    t.add_argument("--target")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--stage1-lr", type=float)
    t.add_argument("--stage1-epochs", type=int)
    t.add_argument("--stage2-epochs", type=int)
    t.add_argument("--refine-start", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--metric", choices=[m.value for m in MetricKind])
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--tau", type=float)
    t.add_argument("--warm-start", action="store_true")
    t.add_argument("--no-refine", action="store_true")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy of a head on one domain-oriented space")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--head", choices=["s", "t"], default="t")
    e.add_argument("--space", choices=["s", "t"])
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("refine-once", help="one round of pseudo-label refinement")
    r.add_argument("checkpoint")
    r.add_argument("dataset")
    r.add_argument("--metric", choices=[m.value for m in MetricKind], default=MetricKind.ENERGY.value)
    r.add_argument("--space", choices=["source", "target"], default="source")
    r.add_argument("--out", required=True)
    r.add_argument("--report")
    r.set_defaults(func=cmd_refine_once)

    c = sub.add_parser("gradcheck", help="finite-difference check of every registered op and loss")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--only", nargs="+")
    c.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-metrics", help="convert a metrics log to csv or a records list")
    x.add_argument("log")
    x.add_argument("--format", choices=["csv", "records"], default="csv")
    x.add_argument("--out")
    x.set_defaults(func=cmd_export_metrics)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dotuda: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RunFailure, FormatError, ConfigError, OSError) as exc:
        print(f"dotuda: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
