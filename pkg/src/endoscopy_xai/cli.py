"""Command-line entry point: prepare, train, evaluate, compare, explain.

Settings are resolved in increasing precedence: built-in defaults, the
``--config`` file, ``--set key=value`` pairs, then the dedicated flags
``--output``, ``--seed`` and ``--interactive/--no-interactive``.

Exit codes: 0 success, 1 user or configuration error, 2 data error,
3 internal error (including aborted training).
"""

import argparse
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from ._io import write_json, write_text
from .config import config_dict, load_config
from .explain import explain_instance, render_overlay, save_explanation
from .model import BackboneLoadError, ConfigurationError, build_classifier, load_checkpoint, save_checkpoint
from .training import PromptChannel, TrainingAborted, train

log = logging.getLogger("endoscopy_xai")

EXIT_OK, EXIT_USER, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UserError(Exception):
    pass


def _resolve(args):
    overrides = list(_split_pair(p) for p in args.set or ())
    if args.output is not None:
        overrides.append(("output", args.output))
    if args.seed is not None:
        overrides.append(("seed", str(args.seed)))
    if args.interactive is not None:
        overrides.append(("interactive", str(args.interactive)))
    cfg = load_config(args.config, overrides)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_text(cfg.output_dir / f"resolved_config_{args.command}.txt", cfg.to_text())
    return cfg


def _split_pair(text):
    if "=" not in text:
        raise ConfigurationError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _normalization(cfg):
    return data_mod.ScalarNormalization(cfg.data.normalization_scale, cfg.data.normalization_offset)


def _load_manifest(cfg):
    path = cfg.manifest_path
    if not path.exists():
        raise UserError(f"manifest {path} not found; run 'prepare' first")
    return data_mod.SplitManifest.load(path, cfg.seed, cfg.data.ratios)


def cmd_prepare(cfg, args):
    if not cfg.data.root:
        raise UserError("data.root is not set")
    scan = data_mod.scan_corpus(cfg.data.root)
    manifest = data_mod.make_splits(scan.records, cfg.data.ratios, cfg.seed)
    manifest.save(cfg.manifest_path)
    write_text(cfg.output_dir / "rejects.csv", scan.rejects_csv())
    if scan.rejects:
        print(f"warning: {len(scan.rejects)} undecodable file(s) listed in {cfg.output_dir / 'rejects.csv'}",
              file=sys.stderr)
    counts = manifest.counts()
    print(f"{len(manifest.class_names)} classes, {len(manifest.records)} images")
    print("class".ljust(28) + "".join(s.rjust(8) for s in data_mod.SPLITS))
    for name in manifest.class_names:
        print(name.ljust(28) + "".join(str(counts[s][name]).rjust(8) for s in data_mod.SPLITS))
    print("total".ljust(28) + "".join(str(len(manifest.split(s))).rjust(8) for s in data_mod.SPLITS))
    return EXIT_OK


def cmd_train(cfg, args):
    manifest = _load_manifest(cfg)
    head = cfg.head
    if head.num_classes != len(manifest.class_names):
        head = type(head)(**{**head.__dict__, "num_classes": len(manifest.class_names)})
    model = build_classifier(cfg.model.backbone, head, cfg.model.trainable_backbone, cfg.seed,
                             cfg.backbone_weights, manifest.class_names)
    out = cfg.output_dir
    channel = PromptChannel(interactive=cfg.interactive, timeout=cfg.train.prompt_timeout) if cfg.interactive else None
    checkpoint = out / "checkpoint.pt"
    try:
        model, history = train(model, manifest, cfg.train, cfg.seed, channel, checkpoint, _normalization(cfg))
    except TrainingAborted as exc:
        print(f"training aborted: {exc}; last good checkpoint kept at {checkpoint}", file=sys.stderr)
        return EXIT_INTERNAL
    save_checkpoint(model, checkpoint, {"best_epoch": history.metadata.get("best_epoch")})
    write_text(out / "history.csv", history.to_csv())
    write_json(out / "run_metadata.json", {**history.metadata, "config": config_dict(cfg),
                                           "normalization": _normalization(cfg).describe()})
    if len(history):
        metrics_mod.render_curves(history, out)
    print(f"trained {len(history)} epoch(s); stop reason: {history.metadata['stop_reason']}")
    print(f"checkpoint: {checkpoint}")
    return EXIT_OK


def _checkpoint(path):
    path = Path(path)
    if not path.exists() or not Path(f"{path}.json").exists():
        raise UserError(f"checkpoint {path} (with {path}.json) not found")
    return load_checkpoint(path)[0]


def cmd_evaluate(cfg, args):
    model = _checkpoint(args.checkpoint)
    manifest = _load_manifest(cfg)
    if not manifest.split(args.split):
        raise data_mod.DataError(f"split {args.split!r} is empty")
    report = metrics_mod.evaluate(model, manifest, args.split, cfg.train.batch_size,
                                  normalization=_normalization(cfg))
    out = cfg.output_dir
    metrics_mod.save_report(report, out / "report.json")
    metrics_mod.render_confusion_matrix(report.confusion, out / "confusion_matrix.png")
    print(metrics_mod.compare_report([(Path(args.checkpoint).stem, report)]).to_text(), end="")
    return EXIT_OK


def cmd_compare(cfg, args):
    manifest = _load_manifest(cfg)
    if not manifest.split(args.split):
        raise data_mod.DataError(f"split {args.split!r} is empty")
    entries = []
    failed = 0
    for entry in args.checkpoints:
        name, _, path = entry.rpartition("=")
        name = name or Path(path).stem
        try:
            model = _checkpoint(path)
            report = metrics_mod.evaluate(model, manifest, args.split, cfg.train.batch_size,
                                          normalization=_normalization(cfg))
        except Exception as exc:  # one bad entry must not sink the table
            print(f"evaluation of {name} failed: {exc}", file=sys.stderr)
            entries.append((name, None))
            failed += 1
            continue
        entries.append((name, report))
    table = metrics_mod.compare_report(entries)
    metrics_mod.save_comparison(table, cfg.output_dir)
    print(table.to_text(), end="")
    if failed:
        return EXIT_DATA if failed < len(entries) else EXIT_INTERNAL
    return EXIT_OK


def cmd_explain(cfg, args):
    model = _checkpoint(args.checkpoint)
    out = cfg.output_dir / "explanations"
    failures = 0
    names = model.class_names
    for image_path in args.images:
        try:
            image = data_mod.load_image(image_path)
            explanation = explain_instance(model, image, cfg.lime)
            overlay = render_overlay(image, explanation.segments, explanation)
            save_explanation(out, Path(image_path).stem, image, overlay, explanation)
        except Exception as exc:  # report and move on to the next image
            print(f"{image_path}: explanation failed: {exc}", file=sys.stderr)
            failures += 1
            continue
        label = names[explanation.predicted_class] if names else explanation.predicted_class
        print(f"{image_path}: predicted {label}, {len(explanation.selected_segments)} segment(s) selected")
    return EXIT_DATA if failures else EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "evaluate": cmd_evaluate,
            "compare": cmd_compare, "explain": cmd_explain}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="endoscopy-xai",
        description=__doc__.split("\n\n")[0],
        epilog="Precedence: defaults < --config file < --set key=value < --output/--seed/--interactive.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file with dotted section keys")
    common.add_argument("--output", help="output directory (config key: output)")
    common.add_argument("--seed", type=int, help="seed for splits, head init and training (config key: seed)")
    common.add_argument("--interactive", action=argparse.BooleanOptionalAction, default=None,
                        help="prompt for continue/stop/extend during training")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="scan the corpus and write split manifests")
    sub.add_parser("train", parents=[common], help="train and keep the best checkpoint")
    p = sub.add_parser("evaluate", parents=[common], help="metrics report on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=data_mod.SPLITS)
    p = sub.add_parser("compare", parents=[common], help="comparison table over checkpoints")
    p.add_argument("checkpoints", nargs="+", metavar="[NAME=]CHECKPOINT")
    p.add_argument("--split", default="test", choices=data_mod.SPLITS)
    p = sub.add_parser("explain", parents=[common], help="LIME overlays for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](cfg, args)
    except (UserError, ConfigurationError, BackboneLoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except data_mod.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
