"""Command-line entry points: split a dataset, train a stage, evaluate a
checkpoint, run one image through the cascade, or start the service."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import backbone as bb
from . import data as D
from . import training as tr
from .cascade import infer_hierarchical
from .service import DEFAULT_MAX_UPLOAD, load_bundle, response_from_label, serve
from .training import CheckpointError, TrainConfig


def resolve_config(name_or_path: str) -> bb.BackboneConfig:
    """Named geometry ('tiny', 'cvt13') or a path to a saved config file."""
    if name_or_path in bb.NAMED_CONFIGS:
        return bb.NAMED_CONFIGS[name_or_path]()
    if Path(name_or_path).is_file():
        return bb.load_config(name_or_path)
    raise ValueError(
        f"unknown config {name_or_path!r}; expected one of "
        f"{sorted(bb.NAMED_CONFIGS)} or a config file path"
    )


def cmd_split(args) -> int:
    manifest = D.build_manifest(args.data_root, args.stage)
    manifest = D.split_manifest(manifest, seed=args.seed)
    D.save_manifest(manifest, args.out)
    counts = {s: sum(1 for r in manifest.records if r.split == s) for s in D.SPLITS}
    skipped = f", {manifest.skipped} skipped" if manifest.skipped else ""
    print(
        f"stage {args.stage}: {len(manifest.records)} images -> "
        f"{counts['train']} train / {counts['val']} val / {counts['test']} test{skipped}"
    )
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    manifest = D.load_manifest(args.manifest)
    if manifest.stage != args.stage:
        raise ValueError(
            f"manifest is for stage {manifest.stage}, not stage {args.stage}"
        )
    config = resolve_config(args.config)
    arrays = D.load_split_arrays(manifest)
    model = bb.init_stage_model(config, args.stage, args.seed)
    if args.head_only:
        bb.freeze_backbone(model)

    epochs = args.epochs
    train_config = TrainConfig(
        total_epochs=epochs,
        warmup_epochs=min(5, epochs - 1),
        batch_size=args.batch_size,
        seed=args.seed,
    )
    # vertical flips would turn an embryo-up kernel into an embryo-down one,
    # so stage 3 trains without them
    augment = D.AugmentConfig(vertical_flip=args.stage != 3)

    model, history = tr.train_stage(args.stage, arrays, model, train_config, augment)
    tr.save_checkpoint(model, history, args.out)
    history_path = str(args.out) + ".history.csv"
    tr.save_history(history, history_path)
    best = max(history, key=lambda h: (h.val_acc, h.val_macro_f1))
    print(
        f"trained stage {args.stage} for {epochs} epochs; "
        f"best val acc {best.val_acc:.4f} (epoch {best.epoch})"
    )
    print(f"wrote {args.out} and {history_path}")
    return 0


def cmd_eval(args) -> int:
    model, _ = tr.load_checkpoint(args.checkpoint)
    manifest = D.load_manifest(args.manifest)
    if manifest.stage != model.stage:
        raise ValueError(
            f"checkpoint is stage {model.stage} but manifest is stage {manifest.stage}"
        )
    arrays = D.load_split_arrays(manifest)
    images, labels = arrays.get(args.split)
    if not images:
        raise ValueError(f"manifest has no {args.split!r} records")
    report = tr.evaluate_model(model, images, labels)
    text = report.to_text()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote {args.out}")
    return 0


def cmd_infer(args) -> int:
    bundle = load_bundle(args.checkpoint_1, args.checkpoint_2, args.checkpoint_3)
    image = D.load_rgb(args.image)
    label = infer_hierarchical(*bundle.models, image)
    print(json.dumps(response_from_label(label, bundle.versions), indent=2))
    return 0


def cmd_serve(args) -> int:
    bundle = load_bundle(args.checkpoint_1, args.checkpoint_2, args.checkpoint_3)
    print(f"serving on {args.host}:{args.port}")
    serve(bundle, args.host, args.port, args.max_upload)
    return 0


def _add_checkpoint_trio(parser) -> None:
    parser.add_argument("--checkpoint-1", required=True, help="stage 1 checkpoint path")
    parser.add_argument("--checkpoint-2", required=True, help="stage 2 checkpoint path")
    parser.add_argument("--checkpoint-3", required=True, help="stage 3 checkpoint path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corngrader", description="three-stage corn kernel grading"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="scan a dataset tree and write a split manifest")
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--data-root", required=True, help="directory with one subdir per class")
    p.add_argument("--out", required=True, help="manifest CSV to write")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one stage from a split manifest")
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default="tiny", help="'tiny', 'cvt13', or a config file")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument(
        "--head-only",
        action="store_true",
        help="freeze the backbone and train only the classification head",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report a checkpoint's metrics on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", default=None, help="optional path for the text report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run one image through the full cascade")
    p.add_argument("--image", required=True)
    _add_checkpoint_trio(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("serve", help="start the inference service")
    _add_checkpoint_trio(p)
    p.add_argument("--host", default=os.environ.get("CORNGRADER_HOST", "127.0.0.1"))
    p.add_argument(
        "--port", type=int, default=int(os.environ.get("CORNGRADER_PORT", "8000"))
    )
    p.add_argument("--max-upload", type=int, default=DEFAULT_MAX_UPLOAD)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
