"""Command-line pipeline: synth, fit-stats, pure, train, rescore, eval, viz.

Every command writes its outputs into --out-dir together with a
run_manifest.json recording the command line, resolved configuration,
seeds, input file digests, and output file list. All randomness sits
behind explicit seeds, so identical manifests imply byte-identical
outputs. Report paths emit CSV tables plus SVG figures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .context_stats import HistConfig, fit_stats, load_stats, save_stats
from .evaluation import (
    METHODS,
    evaluate_scenes,
    precision_thresholds,
    rescore_scenes,
    run_baseline,
    selecting_ratios,
    sweep_precision_threshold,
    train_models,
)
from .latent_svm import TrainConfig, save_report, train_for_against, train_select_all
from .pure_context import (
    ClassMask,
    accuracy,
    load_pure_model,
    ral_table,
    save_pure_model,
    train_pure,
)
from .rescoring import load_model, save_model
from .scenes import (
    ClassVocab,
    DatasetError,
    load_dataset,
    load_vocab,
    save_dataset,
    save_vocab,
)
from .synthetic import (
    default_detector,
    default_world,
    generate,
    load_detector,
    load_world,
    noisy_detector,
    rules_world,
    save_detector,
    save_world,
    simulate_detector,
)

WORKERS_ENV = "CTXRESCORE_WORKERS"


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, argv, config: dict, inputs: list, outputs: list) -> None:
    manifest = {
        "tool": "ctxrescore",
        "version": __version__,
        "command": list(argv),
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": sorted(str(Path(p).relative_to(out_dir)) for p in outputs),
    }
    with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _resolve_world(name_or_path: str, seed: int | None):
    if name_or_path == "default":
        world = default_world()
    elif name_or_path == "rules":
        world = rules_world()
    else:
        world = load_world(name_or_path)
    if seed is not None:
        from dataclasses import replace

        world = replace(world, seed=seed)
    return world


def _resolve_detector(name_or_path: str, n_classes: int):
    if name_or_path == "default":
        return default_detector(n_classes)
    if name_or_path == "noisy":
        return noisy_detector(n_classes)
    if name_or_path == "none":
        return None
    return load_detector(name_or_path)


def cmd_synth(args, argv) -> int:
    out = _out_dir(args)
    world = _resolve_world(args.world, args.seed)
    detector = _resolve_detector(args.detector, len(world.vocab))
    workers = args.workers or _default_workers()

    inputs = [p for p in (args.world, args.detector) if p and Path(p).is_file()]
    scenes = generate(world, args.n_train + args.n_test, workers=workers)
    if detector is not None:
        scenes = simulate_detector(scenes, detector, seed=world.seed)
    train, test = scenes[: args.n_train], scenes[args.n_train :]

    outputs = []
    from .synthetic import detector_to_dict, world_to_dict

    save_world(out / "world.json", world)
    outputs.append(out / "world.json")
    if detector is not None:
        save_detector(out / "detector.json", detector)
        outputs.append(out / "detector.json")
    save_vocab(out / "vocab.json", world.vocab)
    outputs.append(out / "vocab.json")
    save_dataset(out / "train.jsonl", train, world.vocab)
    outputs.append(out / "train.jsonl")
    save_dataset(out / "test.jsonl", test, world.vocab)
    outputs.append(out / "test.jsonl")

    config = {
        "world": world_to_dict(world),
        "detector": None if detector is None else detector_to_dict(detector),
        "n_train": args.n_train,
        "n_test": args.n_test,
        "seed": world.seed,
        "workers": workers,
    }
    _write_manifest(out, argv, config, inputs, outputs)
    print(f"wrote {len(train)} train and {len(test)} test scenes to {out}")
    return 0


def cmd_fit_stats(args, argv) -> int:
    out = _out_dir(args)
    vocab = load_vocab(args.vocab)
    config = HistConfig(
        n_scale_bins=args.scale_bins,
        n_spatial_bins=args.spatial_bins,
        scale_log_range=(args.scale_range[0], args.scale_range[1]),
        laplace_alpha=args.alpha,
    )
    scenes = load_dataset(args.scenes, vocab)
    stats = fit_stats(scenes, vocab, config)
    save_stats(out / "stats.json", stats)
    _write_manifest(
        out,
        argv,
        {
            "n_scale_bins": config.n_scale_bins,
            "n_spatial_bins": config.n_spatial_bins,
            "scale_log_range": list(config.scale_log_range),
            "laplace_alpha": config.laplace_alpha,
            "n_scenes": len(scenes),
        },
        [args.scenes, args.vocab],
        [out / "stats.json"],
    )
    print(f"fitted statistics over {len(scenes)} scenes ({len(vocab)} classes) -> {out / 'stats.json'}")
    return 0


def cmd_pure(args, argv) -> int:
    out = _out_dir(args)
    stats = load_stats(args.stats)
    vocab = stats.vocab
    train = load_dataset(args.train, vocab)
    test = load_dataset(args.test, vocab)
    mask = ClassMask({vocab.index(name) for name in args.mask or []})

    model, objectives = train_pure(
        train, stats, reg_lambda=args.reg_lambda, epochs=args.epochs, seed=args.seed
    )
    per_class, mean = accuracy(model, test, mask)

    outputs = [out / "pure_model.json", out / "accuracy.csv", out / "summary.json"]
    save_pure_model(out / "pure_model.json", model)
    _write_csv(
        out / "accuracy.csv",
        ["class", "accuracy"],
        [
            [vocab.names[c], "" if not np.isfinite(per_class[c]) else repr(float(per_class[c]))]
            for c in range(len(vocab))
        ],
    )
    summary = {
        "mean_accuracy": mean,
        "objective_per_epoch": objectives,
        "masked_classes": sorted(vocab.names[c] for c in mask.excluded),
    }
    _write_json(out / "summary.json", summary)

    if args.ral:
        rows = ral_table(model, test)
        _write_csv(
            out / "ral.csv",
            ["target_class", "context_class", "acc_full", "acc_masked", "ral", "abs_ral"],
            [
                [
                    r["target_class"],
                    r["context_class"],
                    "" if r["acc_full"] is None else repr(r["acc_full"]),
                    "" if r["acc_masked"] is None else repr(r["acc_masked"]),
                    "" if r["ral"] is None else repr(r["ral"]),
                    "" if r["ral"] is None else repr(abs(r["ral"])),
                ]
                for r in rows
            ],
        )
        outputs.append(out / "ral.csv")

    config = {
        "reg_lambda": args.reg_lambda,
        "epochs": args.epochs,
        "seed": args.seed,
        "mask": sorted(vocab.names[c] for c in mask.excluded),
        "ral": bool(args.ral),
    }
    _write_manifest(out, argv, config, [args.train, args.test, args.stats], outputs)
    print(f"pure-context mean accuracy {mean:.4f} over {len(vocab)} classes -> {out}")
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        reg_lambda=args.reg_lambda,
        outer_iters=args.outer_iters,
        inner_epochs=args.inner_epochs,
        seed=args.seed,
        tol=args.tol,
        batch_size=args.batch_size,
    )


def cmd_train(args, argv) -> int:
    out = _out_dir(args)
    stats = load_stats(args.stats)
    vocab = stats.vocab
    scenes = load_dataset(args.train, vocab)
    config = _train_config(args)
    thresholds = precision_thresholds(scenes, args.precision, vocab)

    class_ids = [vocab.index(args.target_class)] if args.target_class else list(range(len(vocab)))
    trainer = train_select_all if args.method == "sa" else train_for_against

    outputs = []
    _write_json(out / "thresholds.json", {vocab.names[c]: thresholds[c] for c in range(len(vocab))})
    outputs.append(out / "thresholds.json")
    for c in class_ids:
        model, reports = trainer(scenes, c, thresholds, stats, config, oracle=args.oracle)
        model_path = out / f"model_{vocab.names[c]}.json"
        report_path = out / f"report_{vocab.names[c]}.json"
        save_model(model_path, model)
        save_report(report_path, reports)
        outputs.extend([model_path, report_path])

    config_dict = {
        "method": args.method,
        "precision": args.precision,
        "oracle": bool(args.oracle),
        "classes": [vocab.names[c] for c in class_ids],
        "reg_lambda": config.reg_lambda,
        "outer_iters": config.outer_iters,
        "inner_epochs": config.inner_epochs,
        "tol": config.tol,
        "seed": config.seed,
        "batch_size": config.batch_size,
    }
    _write_manifest(out, argv, config_dict, [args.train, args.stats], outputs)
    print(f"trained {len(class_ids)} {args.method} model(s) -> {out}")
    return 0


def _load_models(models_dir) -> dict:
    models = {}
    for path in sorted(Path(models_dir).glob("model_*.json")):
        model = load_model(path)
        models[model.target_class] = model
    if not models:
        raise DatasetError(f"no model_*.json files found in {models_dir}")
    vocabs = {m.stats.vocab.names for m in models.values()}
    if len(vocabs) > 1:
        raise DatasetError("models in the directory disagree on the class vocabulary")
    return models


def cmd_rescore(args, argv) -> int:
    out = _out_dir(args)
    inputs = [args.scenes]
    if args.method == "ST":
        if not args.vocab:
            raise DatasetError("method ST needs --vocab to parse the scenes")
        vocab = load_vocab(args.vocab)
        models = {}
        inputs.append(args.vocab)
    else:
        models = _load_models(args.models)
        vocab = next(iter(models.values())).stats.vocab
        inputs.extend(sorted(str(p) for p in Path(args.models).glob("model_*.json")))
    scenes = load_dataset(args.scenes, vocab)
    rescored, traces = rescore_scenes(scenes, models, args.method)

    outputs = [out / "rescored.jsonl"]
    save_dataset(out / "rescored.jsonl", rescored, vocab)
    if args.method != "ST":
        with open(out / "traces.jsonl", "w", encoding="utf-8") as fh:
            for trace in traces:
                fh.write(json.dumps(trace))
                fh.write("\n")
        outputs.append(out / "traces.jsonl")

    _write_manifest(out, argv, {"method": args.method}, inputs, outputs)
    print(f"re-scored {sum(len(s.dets) for s in rescored)} detections with {args.method} -> {out}")
    return 0


def _eval_file_mode(args, argv, out: Path) -> int:
    from .plots import save_pr_curve

    vocab = load_vocab(args.vocab)
    scenes = load_dataset(args.scenes, vocab, clamp_scores=False)
    if args.gt:
        gt_scenes = {s.image_id: s for s in load_dataset(args.gt, vocab)}
        from dataclasses import replace as _replace

        missing = [s.image_id for s in scenes if s.image_id not in gt_scenes]
        if missing:
            raise DatasetError(f"ground-truth file lacks image ids: {missing[:5]}")
        scenes = [_replace(s, gts=gt_scenes[s.image_id].gts) for s in scenes]
    report, curves = evaluate_scenes(scenes, vocab, args.method_tag, eleven_point=args.eleven_point)

    outputs = [out / "eval.csv", out / "eval.json"]
    rows = [[vocab.names[c], repr(report.per_class_ap[c])] for c in sorted(report.per_class_ap)]
    rows.append(["mAP", "" if report.map is None else repr(report.map)])
    _write_csv(out / "eval.csv", ["class", "ap"], rows)
    _write_json(out / "eval.json", report.to_dict(vocab))
    for c, curve in sorted(curves.items()):
        path = out / f"pr_{vocab.names[c]}.svg"
        save_pr_curve(curve, vocab.names[c], path)
        outputs.append(path)

    inputs = [args.scenes, args.vocab] + ([args.gt] if args.gt else [])
    _write_manifest(
        out,
        argv,
        {"mode": "file", "method_tag": args.method_tag, "eleven_point": bool(args.eleven_point)},
        inputs,
        outputs,
    )
    map_str = "n/a" if report.map is None else f"{report.map:.4f}"
    print(f"mAP[{args.method_tag}] = {map_str} over {len(report.per_class_ap)} classes -> {out}")
    return 0


def _eval_protocol_mode(args, argv, out: Path) -> int:
    from .plots import save_sweep_chart

    stats = load_stats(args.stats)
    vocab = stats.vocab
    train = load_dataset(args.train, vocab)
    test = load_dataset(args.test, vocab)
    config = _train_config(args)

    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if args.oracle:
        methods = [m if m in ("ST",) or m.endswith("-O") else f"{m}-O" if m in ("SA", "CS") else m for m in methods]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise DatasetError(f"unknown methods {bad}; expected a subset of {METHODS}")
    p_values = [float(v) for v in args.sweep.split(",")] if args.sweep else [args.precision]

    rows = []
    for p in p_values:
        thresholds = precision_thresholds(train, p, vocab)
        models_by_method = train_models(train, vocab, stats, thresholds, config, methods)
        for method in methods:
            report = run_baseline(method, models_by_method[method], test, vocab=vocab)
            rows.append({"precision_target": p, "method": method, "map": report.map})

    outputs = [out / "sweep.csv", out / "sweep.svg"]
    _write_csv(
        out / "sweep.csv",
        ["precision_target", "method", "map"],
        [[repr(r["precision_target"]), r["method"], "" if r["map"] is None else repr(r["map"])] for r in rows],
    )
    save_sweep_chart(rows, out / "sweep.svg")
    _write_manifest(
        out,
        argv,
        {
            "mode": "protocol",
            "methods": methods,
            "p_values": p_values,
            "oracle": bool(args.oracle),
            "seed": config.seed,
            "reg_lambda": config.reg_lambda,
            "outer_iters": config.outer_iters,
            "inner_epochs": config.inner_epochs,
            "tol": config.tol,
            "batch_size": config.batch_size,
        },
        [args.train, args.test, args.stats],
        outputs,
    )
    for r in rows:
        map_str = "n/a" if r["map"] is None else f"{r['map']:.4f}"
        print(f"p={r['precision_target']:.2f} {r['method']:>5}: mAP {map_str}")
    return 0


def cmd_eval(args, argv) -> int:
    out = _out_dir(args)
    protocol = bool(args.sweep or args.oracle or args.train)
    if protocol:
        if not (args.train and args.test and args.stats):
            raise DatasetError("protocol evaluation (--sweep/--oracle) needs --train, --test, and --stats")
        return _eval_protocol_mode(args, argv, out)
    if not (args.scenes and args.vocab):
        raise DatasetError("file evaluation needs --scenes and --vocab")
    return _eval_file_mode(args, argv, out)


def _safe_name(value: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", value)


def cmd_viz(args, argv) -> int:
    from .plots import save_selection_overlay

    out = _out_dir(args)
    dims = {}
    with open(args.scenes, "r", encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw:
                continue
            obj = json.loads(raw)
            dims[obj["image_id"]] = (obj["width"], obj["height"])

    outputs = []
    with open(args.traces, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            trace = json.loads(raw)
            image_id = trace["image_id"]
            if image_id not in dims:
                raise DatasetError(f"trace references unknown image id {image_id!r}", lineno)
            width, height = dims[image_id]
            name = f"{_safe_name(image_id)}-det{trace['det_index']:03d}-{trace['side']}.svg"
            path = out / name
            save_selection_overlay(trace, width, height, path)
            outputs.append(path)

    _write_manifest(out, argv, {"n_overlays": len(outputs)}, [args.scenes, args.traces], outputs)
    print(f"wrote {len(outputs)} selection overlays -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxrescore",
        description="Context-selection re-scoring of object detections.",
    )
    parser.add_argument("--version", action="version", version=f"ctxrescore {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic train/test scenes")
    p.add_argument("--world", default="default", help="world JSON path, or one of: default, rules")
    p.add_argument("--detector", default="default", help="detector JSON path, or one of: default, noisy, none")
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--seed", type=int, default=None, help="override the world seed")
    p.add_argument("--workers", type=int, default=None, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-stats", help="fit pairwise likelihood histograms from ground truth")
    p.add_argument("--scenes", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--scale-bins", type=int, default=10)
    p.add_argument("--spatial-bins", type=int, default=10)
    p.add_argument("--scale-range", type=float, nargs=2, default=(-3.0, 3.0), metavar=("LO", "HI"))
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_fit_stats)

    p = sub.add_parser("pure", help="pure-context label prediction study")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--ral", action="store_true", help="also emit the relative accuracy loss table")
    p.add_argument("--mask", action="append", metavar="CLASS", help="mask a context class at inference")
    p.add_argument("--reg-lambda", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_pure)

    p = sub.add_parser("train", help="train re-scoring models")
    p.add_argument("--train", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--class", dest="target_class", default=None, help="train a single class (default: all)")
    p.add_argument("--method", choices=("cs", "sa"), default="cs")
    p.add_argument("--precision", type=float, default=0.4, help="context precision target")
    p.add_argument("--oracle", action="store_true", help="restrict context pools to true positives")
    p.add_argument("--reg-lambda", type=float, default=1e-2)
    p.add_argument("--outer-iters", type=int, default=10)
    p.add_argument("--inner-epochs", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rescore", help="re-score detections with a trained model family")
    p.add_argument("--scenes", required=True)
    p.add_argument("--models", help="directory of model_*.json files")
    p.add_argument("--vocab", help="vocabulary file (needed for method ST)")
    p.add_argument("--method", choices=METHODS, default="CS")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_rescore)

    p = sub.add_parser("eval", help="evaluate scored scenes, or run protocol sweeps")
    p.add_argument("--scenes", help="scored scenes JSONL (file mode)")
    p.add_argument("--vocab", help="vocabulary file (file mode)")
    p.add_argument("--gt", help="take ground truth from this file instead (file mode)")
    p.add_argument("--method-tag", default="ST", help="method label for the report (file mode)")
    p.add_argument("--eleven-point", action="store_true", help="11-point interpolated AP")
    p.add_argument("--sweep", help="comma-separated precision targets (protocol mode)")
    p.add_argument("--oracle", action="store_true", help="oracle context pools (protocol mode)")
    p.add_argument("--methods", default="SA,CS", help="methods for protocol mode")
    p.add_argument("--train", help="training scenes (protocol mode)")
    p.add_argument("--test", help="test scenes (protocol mode)")
    p.add_argument("--stats", help="fitted statistics (protocol mode)")
    p.add_argument("--precision", type=float, default=0.4)
    p.add_argument("--reg-lambda", type=float, default=1e-2)
    p.add_argument("--outer-iters", type=int, default=10)
    p.add_argument("--inner-epochs", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="render selection-trace overlays as SVG")
    p.add_argument("--scenes", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_viz)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except (DatasetError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
