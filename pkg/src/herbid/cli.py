"""Single command-line entry point for the whole pipeline:

    ingest -> split -> extract-features -> train-head -> eval -> export
    -> verify -> serve / predict / dump-activations / augment-preview

Every flag has a config-file equivalent (--config, JSON); flags override
file values. Outputs go to the stated paths, logs to stderr. Exit codes:
0 success, 1 usage error, 2 runtime error. Subcommands whose outputs
already exist are skipped unless --force is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

log = logging.getLogger("herbid")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


class UsageError(Exception):
    pass


def _load_config(path):
    if not path:
        return {}
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ValueError(f"config {path} must be a JSON object")
    return doc


def _resolve(args, config, key, default=None, required=False):
    """Flag value if given, else config-file value, else default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is None:
        value = config.get(key, default)
    if value is None and required:
        raise UsageError(f"missing --{key} (no flag given and no {key!r} in the config file)")
    return value


def _skip_existing(outputs, force) -> bool:
    existing = [str(p) for p in outputs if p and os.path.exists(str(p))]
    if existing and len(existing) == len([p for p in outputs if p]) and not force:
        log.info("outputs exist, skipping (use --force to redo): %s", ", ".join(existing))
        return True
    return False


def _parse_ratios(text):
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) != 3:
        raise ValueError(f"ratios must be three comma-separated numbers, got {text!r}")
    return tuple(parts)


def _save_image_chw(img, path):
    from PIL import Image

    arr = np.clip(np.asarray(img) * 255.0, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


def cmd_ingest(args, config):
    from .dataset import ingest_directory, save_manifest, save_rejects, validate_manifest

    out = _resolve(args, config, "out", required=True)
    rejects_path = _resolve(args, config, "rejects", str(out) + ".rejects.jsonl")
    if _skip_existing([out], args.force):
        return 0
    result = ingest_directory(_resolve(args, config, "root", required=True))
    problems = validate_manifest(result.manifest)
    for v in problems:
        log.warning("manifest violation: %s", v.message)
    save_manifest(result.manifest, out)
    save_rejects(result.rejects, rejects_path)
    log.info(
        "ingested %d records across %d classes (%d rejects) -> %s",
        len(result.manifest.records), len(result.manifest.classes), len(result.rejects), out,
    )
    return 0


def cmd_split(args, config):
    from .dataset import SplitSpec, load_manifest, save_manifest, stratified_split

    manifest_path = _resolve(args, config, "manifest", required=True)
    out = _resolve(args, config, "out") or manifest_path
    manifest = load_manifest(manifest_path)
    spec = SplitSpec(
        ratios=_parse_ratios(_resolve(args, config, "ratios", "0.75,0.125,0.125")),
        seed=int(_resolve(args, config, "seed", 0)),
    )
    result = stratified_split(manifest, spec)
    save_manifest(result, out)
    sizes = {s: len(result.records_for_split(s)) for s in ("train", "validation", "test")}
    log.info("split %s -> %s (%s)", manifest_path, out, sizes)
    return 0


def cmd_augment_preview(args, config):
    from .augment import AugmentSpec, RngState, apply, load_augment_spec, sample_pipeline
    from .dataset import load_standardized

    out_dir = _resolve(args, config, "out-dir", required=True)
    os.makedirs(out_dir, exist_ok=True)
    spec_path = _resolve(args, config, "spec")
    spec = load_augment_spec(spec_path) if spec_path else AugmentSpec()
    img = load_standardized(_resolve(args, config, "image", required=True))
    seed = int(_resolve(args, config, "seed", 0))
    count = int(_resolve(args, config, "count", 4))
    _save_image_chw(img, os.path.join(out_dir, "before.png"))
    for i in range(count):
        aug = sample_pipeline(spec, RngState(seed, i))
        _save_image_chw(apply(aug, img), os.path.join(out_dir, f"after_{i:02d}.png"))
        with open(os.path.join(out_dir, f"after_{i:02d}.json"), "w", encoding="utf-8") as f:
            f.write(aug.to_json())
    log.info("wrote before/after pairs for %d samples -> %s", count, out_dir)
    return 0


def cmd_extract_features(args, config):
    from .dataset import load_manifest
    from .predict import load_model
    from .train import extract_split_features, save_features

    out = _resolve(args, config, "out", required=True)
    if _skip_existing([out], args.force):
        return 0
    model = load_model(_resolve(args, config, "model", required=True))
    manifest = load_manifest(_resolve(args, config, "manifest", required=True))
    split = _resolve(args, config, "split", "train")
    feats, ids, labels = extract_split_features(
        model.package.graph, model.package.weights, manifest, split,
        batch_size=int(_resolve(args, config, "batch", 8)),
    )
    save_features(out, feats, ids, labels, manifest.classes)
    log.info("extracted %s features for split %s -> %s", feats.shape, split, out)
    return 0


def cmd_train_head(args, config):
    from .train import TrainConfig, load_features, train_head

    out = _resolve(args, config, "out", required=True)
    report_path = _resolve(args, config, "report")
    if _skip_existing([out, report_path], args.force):
        return 0
    train_cfg_file = config.get("train", {})
    overrides = {
        "learning_rate": args.learning_rate,
        "momentum": args.momentum,
        "l2_lambda": args.l2,
        "dropout_p": args.dropout,
        "batch_size": args.batch_size,
        "max_epochs": args.max_epochs,
        "patience": args.patience,
        "seed": args.seed,
    }
    merged = {**train_cfg_file, **{k: v for k, v in overrides.items() if v is not None}}
    cfg = TrainConfig.from_dict(merged)

    f_tr, _, y_tr, classes = load_features(_resolve(args, config, "train-features", required=True))
    f_va, _, y_va, _ = load_features(_resolve(args, config, "val-features", required=True))
    head, report = train_head(f_tr, y_tr, f_va, y_va, cfg)
    with open(out, "w", encoding="utf-8") as f:
        json.dump({"classes": classes, **head.to_dict()}, f)
    if report_path:
        with open(report_path, "w", encoding="utf-8") as f:
            json.dump({"config": cfg.to_dict(), **report.to_dict()}, f, indent=1)
    log.info(
        "trained head: best epoch %d, val acc %.3f -> %s",
        report.best_epoch, report.val_accuracy[report.best_epoch], out,
    )
    return 0


def _package_split_probs(model, manifest, split, batch):
    from .dataset import load_standardized
    from .nnrt import forward
    from .train import TrainError

    records = manifest.records_for_split(split)
    if not records:
        raise TrainError(f"split {split!r} is empty")
    class_index = {c: i for i, c in enumerate(manifest.classes)}
    labels = np.array([class_index[r.class_label] for r in records])
    chunks = []
    for start in range(0, len(records), batch):
        x = np.stack([load_standardized(r.source_path) for r in records[start : start + batch]])
        chunks.append(forward(model.package.graph, model.package.weights, x))
    return np.concatenate(chunks, axis=0), labels


def cmd_eval(args, config):
    from .dataset import load_manifest
    from .metrics import build_report, emit_confusion_csv, emit_json, emit_roc_csv, emit_roc_svg
    from .predict import load_model
    from .train import cross_entropy_loss

    out = _resolve(args, config, "out", required=True)
    if _skip_existing([out], args.force):
        return 0
    model = load_model(_resolve(args, config, "model", required=True))
    manifest = load_manifest(_resolve(args, config, "manifest", required=True))
    split = _resolve(args, config, "split", "test")
    probs, labels = _package_split_probs(model, manifest, split,
                                         int(_resolve(args, config, "batch", 8)))
    loss = cross_entropy_loss(probs, labels)
    report = build_report(probs, labels, loss, classes=manifest.classes)
    emit_json(report, out)
    csv_dir = _resolve(args, config, "csv-dir")
    if csv_dir:
        os.makedirs(csv_dir, exist_ok=True)
        emit_confusion_csv(report, os.path.join(csv_dir, "confusion.csv"))
        emit_roc_csv(report, csv_dir)
    svg_dir = _resolve(args, config, "svg-dir")
    if svg_dir:
        emit_roc_svg(report, svg_dir)
    log.info(
        "eval split=%s: accuracy %.4f, loss %.4f, macro AUC %s -> %s",
        split, report.accuracy, report.loss,
        "n/a" if report.auc_macro is None else f"{report.auc_macro:.4f}", out,
    )
    return 0


def cmd_export(args, config):
    from .modelpack import save_package, serialize
    from .predict import load_model

    out = _resolve(args, config, "out", required=True)
    if _skip_existing([out], args.force):
        return 0
    quantize = _resolve(args, config, "quantize", "none")
    base = _resolve(args, config, "base")
    init = _resolve(args, config, "init")
    if base:
        from .train import HeadParams

        model = load_model(base)
        graph, weights, labels = model.package.graph, model.package.weights, model.package.class_labels
        head = None
        head_path = _resolve(args, config, "head")
        if head_path:
            with open(head_path, encoding="utf-8") as f:
                doc = json.load(f)
            head = HeadParams.from_dict(doc)
            if doc.get("classes") and list(doc["classes"]) != list(labels):
                raise ValueError("head was trained against a different class list than the base package")
        data = serialize(graph, weights, head, labels, quantize)
    elif init:
        from .dataset import load_manifest
        from .nnrt import build_tiny_densenet

        if init != "tiny":
            raise ValueError(f"unknown --init architecture {init!r} (only 'tiny')")
        manifest = load_manifest(_resolve(args, config, "manifest", required=True))
        graph, weights = build_tiny_densenet(
            num_classes=len(manifest.classes),
            seed=int(_resolve(args, config, "seed", 0)),
            input_size=int(_resolve(args, config, "input-size", 256)),
        )
        name = _resolve(args, config, "name")
        if name:
            graph.name = name
        data = serialize(graph, weights, None, manifest.classes, quantize)
    else:
        raise ValueError("export needs either --base PACKAGE or --init tiny")
    save_package(data, out)
    log.info("exported %s package (%d bytes) -> %s", quantize, len(data), out)
    return 0


def cmd_verify(args, config):
    from .modelpack import deserialize, verify_package
    from .predict import load_model

    model_path = _resolve(args, config, "model", required=True)
    with open(model_path, "rb") as f:
        data = f.read()
    pkg = deserialize(data)
    probes = int(_resolve(args, config, "probes", 10))
    seed = int(_resolve(args, config, "seed", 0))
    reference = _resolve(args, config, "reference")
    if reference:
        ref = load_model(reference)
        report = verify_package(ref.package.graph, ref.package.weights, data, probes=probes, seed=seed)
    else:
        report = verify_package(pkg.graph, pkg.weights, data, probes=probes, seed=seed)
    doc = {
        "model": str(model_path),
        "quantization": pkg.quantization,
        "classes": len(pkg.class_labels),
        "reference": str(reference) if reference else None,
        **report.to_dict(),
    }
    if pkg.flags:
        doc["flags"] = pkg.flags
    print(json.dumps(doc, indent=1))
    return 0


def cmd_predict(args, config):
    from .dataset import load_herb_info
    from .predict import load_model, predict_topk

    model = load_model(_resolve(args, config, "model", required=True))
    herb_path = _resolve(args, config, "herb-info")
    herbs = load_herb_info(herb_path) if herb_path else None
    with open(_resolve(args, config, "image", required=True), "rb") as f:
        image = f.read()
    k = _resolve(args, config, "k")
    if k is None:
        k = min(5, model.num_classes)  # default clamps like the service does
    result = predict_topk(model, image, int(k), herbs)
    print(json.dumps(result, indent=1))
    return 0


def cmd_dump_activations(args, config):
    from .dataset import load_standardized
    from .nnrt import dump_activations
    from .predict import load_model

    model = load_model(_resolve(args, config, "model", required=True))
    x = load_standardized(_resolve(args, config, "image", required=True))
    files = dump_activations(model.package.graph, model.package.weights, x[None],
                             _resolve(args, config, "out-dir", required=True))
    log.info("wrote %d activation grids", len(files))
    return 0


def cmd_serve(args, config):
    from .serve import run_server

    run_server(
        model_path=_resolve(args, config, "model"),
        herb_info_path=_resolve(args, config, "herb-info"),
        bind=_resolve(args, config, "bind"),
        default_k=int(_resolve(args, config, "k", 5)),
    )
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="herbid", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, fn, *specs, force=True):
        p = sub.add_parser(name, help=fn.__doc__)
        for flags, kwargs in specs:
            p.add_argument(*flags, **kwargs)
        if force:
            p.add_argument("--force", action="store_true", help="redo even if outputs exist")
        p.set_defaults(func=fn)
        return p

    add("ingest", cmd_ingest,
        (("--root",), {"help": "directory of label-named subdirectories"}),
        (("--out",), {"help": "manifest output path (JSON-lines)"}),
        (("--rejects",), {"help": "rejects report path"}))
    add("split", cmd_split,
        (("--manifest",), {}),
        (("--ratios",), {"help": "train,validation,test fractions (default 0.75,0.125,0.125)"}),
        (("--seed",), {"type": int}),
        (("--out",), {"help": "output manifest (default: overwrite input)"}))
    add("augment-preview", cmd_augment_preview,
        (("--image",), {}),
        (("--spec",), {"help": "augmentation spec JSON"}),
        (("--seed",), {"type": int}),
        (("--count",), {"type": int}),
        (("--out-dir",), {}))
    add("extract-features", cmd_extract_features,
        (("--model",), {"help": "model package (.hmp1)"}),
        (("--manifest",), {}),
        (("--split",), {"choices": ["train", "validation", "test"]}),
        (("--batch",), {"type": int}),
        (("--out",), {"help": "feature cache output (.bin + .json sidecar)"}))
    add("train-head", cmd_train_head,
        (("--train-features",), {}),
        (("--val-features",), {}),
        (("--out",), {"help": "trained head JSON"}),
        (("--report",), {"help": "training report JSON"}),
        (("--learning-rate",), {"type": float}),
        (("--momentum",), {"type": float}),
        (("--l2",), {"type": float}),
        (("--dropout",), {"type": float}),
        (("--batch-size",), {"type": int}),
        (("--max-epochs",), {"type": int}),
        (("--patience",), {"type": int}),
        (("--seed",), {"type": int}))
    add("eval", cmd_eval,
        (("--model",), {}),
        (("--manifest",), {}),
        (("--split",), {"choices": ["train", "validation", "test"]}),
        (("--batch",), {"type": int}),
        (("--out",), {"help": "evaluation report JSON"}),
        (("--csv-dir",), {"help": "also emit confusion/ROC CSVs here"}),
        (("--svg-dir",), {"help": "also emit ROC SVGs here"}))
    add("export", cmd_export,
        (("--base",), {"help": "existing package to re-pack"}),
        (("--head",), {"help": "trained head JSON to install"}),
        (("--init",), {"help": "fresh architecture: 'tiny'"}),
        (("--manifest",), {"help": "class list source for --init"}),
        (("--seed",), {"type": int}),
        (("--input-size",), {"type": int}),
        (("--name",), {"help": "model name stored in the package"}),
        (("--quantize",), {"choices": ["none", "f16", "i8"]}),
        (("--out",), {}))
    add("verify", cmd_verify,
        (("--model",), {}),
        (("--reference",), {"help": "compare against this package instead of itself"}),
        (("--probes",), {"type": int}),
        (("--seed",), {"type": int}), force=False)
    add("serve", cmd_serve,
        (("--model",), {}),
        (("--herb-info",), {}),
        (("--bind",), {"help": "host:port (default 127.0.0.1:8077)"}),
        (("--k",), {"type": int, "help": "default top-k"}), force=False)
    add("predict", cmd_predict,
        (("--model",), {}),
        (("--image",), {}),
        (("--k",), {"type": int}),
        (("--herb-info",), {}), force=False)
    add("dump-activations", cmd_dump_activations,
        (("--model",), {}),
        (("--image",), {}),
        (("--out-dir",), {}), force=False)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except SystemExit as exc:
        raise exc
    except UsageError as exc:
        sys.stderr.write(f"herbid {args.command}: {exc}\n")
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:
        log.error("%s", exc)
        if getattr(args, "verbose", False):
            raise
        return 2


if __name__ == "__main__":
    sys.exit(main())
