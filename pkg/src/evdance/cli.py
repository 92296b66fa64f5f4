"""Command-line entry point: ``evdance <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime error, 2 usage error. Errors go to stderr
as one JSON line ``{"error": "..."}``. Logging verbosity comes from the
``EVDANCE_LOG`` environment variable (quiet, info or debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .adaptation import (
    TARGET_KINDS,
    AdaptConfig,
    TrainState,
    adapt_run,
    build_feature_providers,
    evaluate,
    evaluate_baseline,
    init_state,
    prepare_streams,
    pretrain_reconstruction,
    pretrain_source,
)
from .clip_bridge import (
    PrecomputedEmbedder,
    RandomProjectionEmbedder,
    stub_text_features,
    write_feature_bank,
)
from .errors import EvDanceError, InvalidConfig
from .events import DatasetManifest, read_events_file, split_windows, write_events_file
from .models import (
    Classifier,
    ReconstructionNet,
    leaky_integration_target,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    save_model,
)
from .representations import RepresentationKind, build_est, build_stack_image, build_voxel_grid
from .synthetic import synthesize_dataset

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- helpers --------------------------------------------------------------

def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _config(args) -> AdaptConfig:
    cfg = AdaptConfig.load(args.config) if args.config else AdaptConfig()
    overrides = {
        "seed": args.seed, "bins": args.bins, "windows": args.windows,
        "count_threshold": args.count_threshold, "batch_size": args.batch,
        "stub_feature_dim": args.stub_feature_dim,
    }
    changes = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "feature_bank", None):
        changes["text_bank"] = args.feature_bank
    if getattr(args, "visual_bank", None):
        changes["visual_bank"] = args.visual_bank
    return cfg.replace(**changes) if changes else cfg


class _Data:
    """A dataset directory: manifest.json plus the stream files it lists."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = DatasetManifest.load(self.root / "manifest.json")

    def streams(self, split: str):
        entries = self.manifest.split(split)
        return [read_events_file(self.root / e.path) for e in entries], [e.path for e in entries]

    def prepared(self, split: str, config: AdaptConfig):
        streams, ids = self.streams(split)
        return prepare_streams(streams, config, ids)

    def source_frames(self, split: str = "train"):
        frames = np.load(self.root / "source_frames.npy")
        labels = np.load(self.root / "source_labels.npy")
        if len(frames) != len(self.manifest.entries):
            raise InvalidConfig("source_frames.npy must hold one frame per manifest entry")
        mask = np.array([e.split == split for e in self.manifest.entries])
        return frames[mask], labels[mask]


def _representation(stream, kind: RepresentationKind, bins: int, count_threshold: int) -> dict:
    if kind is RepresentationKind.STACK:
        rep = build_stack_image(stream, count_threshold)
        return {"kind": "stack", "shape": list(rep.data.shape), "count_used": rep.count_used,
                "data": rep.data.tolist()}
    if kind is RepresentationKind.VOXEL:
        rep = build_voxel_grid(stream, bins)
        return {"kind": "voxel", "shape": list(rep.data.shape), "t_min": rep.t_min, "t_max": rep.t_max,
                "data": rep.data.tolist()}
    rep = build_est(stream, bins)
    return {"kind": "est", "shape": list(rep.data.shape), "data": rep.data.tolist()}


# --- subcommands ----------------------------------------------------------

def cmd_gen_synthetic(args) -> dict:
    ds = synthesize_dataset(args.seed or 0, k=args.classes, streams_per_class=args.streams_per_class,
                            width=args.width, height=args.height,
                            events_per_stream=args.events_per_stream)
    ds.write(args.out)
    return {"out": str(args.out), "streams": len(ds.manifest.entries), "classes": ds.manifest.classes}


def cmd_gen_features(args) -> dict:
    data = _Data(args.data)
    seed = args.seed or 0
    dim = args.stub_feature_dim or 32
    if args.kind == "text":
        bank = stub_text_features(data.manifest.classes, max(dim, data.manifest.num_classes), seed)
    else:
        # frozen random projection of each stream's anchor leaky-integration frame
        cfg = _config(args)
        ids, frames = [], []
        for e in data.manifest.entries:
            anchor = split_windows(read_events_file(data.root / e.path).time_sorted(), cfg.windows)[0]
            frames.append(leaky_integration_target(anchor, cfg.recon_tau_us).reshape(-1))
            ids.append(e.path)
        frames = np.asarray(frames)
        feats = RandomProjectionEmbedder(frames.shape[1], dim, seed).embed(frames)
        bank = PrecomputedEmbedder(feats, ids)
    write_feature_bank(args.out, bank)
    return {"out": str(args.out), "kind": args.kind, "rows": int(bank.features.shape[0]),
            "dim": int(bank.features.shape[1])}


def cmd_convert(args) -> dict:
    stream = read_events_file(args.input)
    if args.kind == "events":
        write_events_file(args.out, stream)
        return {"out": str(args.out), "events": len(stream)}
    kind = RepresentationKind.parse(args.kind)
    doc = _representation(stream, kind, args.bins or 4, args.count_threshold or AdaptConfig.count_threshold)
    _write_json(args.out, doc)
    return {"out": str(args.out), "kind": doc["kind"], "shape": doc["shape"]}


def cmd_pretrain_source(args) -> dict:
    data = _Data(args.data)
    cfg = _config(args)
    changes = {k: v for k, v in (("source_epochs", args.epochs), ("source_lr", args.lr)) if v is not None}
    cfg = cfg.replace(**changes) if changes else cfg
    frames, labels = data.source_frames("train")
    model, history = pretrain_source(frames, labels, cfg, data.manifest.num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "source.ckpt", model, {"role": "source", "frame_shape": list(frames.shape[1:])})
    _write_json(out / "source_history.json", history)
    test_frames, test_labels = data.source_frames("test")
    result = {"checkpoint": str(out / "source.ckpt"), "epochs": len(history),
              "train_accuracy": history[-1]["train_accuracy"] if history else None}
    if len(test_labels):
        result["test_accuracy"] = evaluate(model, test_frames.reshape(len(test_frames), -1), test_labels,
                                           data.manifest.num_classes).accuracy
    return result


def cmd_pretrain_recon(args) -> dict:
    data = _Data(args.data)
    cfg = _config(args)
    changes = {k: v for k, v in (("recon_epochs", args.epochs), ("recon_lr", args.lr)) if v is not None}
    cfg = cfg.replace(**changes) if changes else cfg
    streams, _ = data.streams("train")
    net, history = pretrain_reconstruction(streams, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "recon.ckpt", net, {"role": "recon"})
    _write_json(out / "recon_history.json", history)
    return {"checkpoint": str(out / "recon.ckpt"), "initial_mse": history[0]["mse"],
            "final_mse": history[-1]["mse"]}


def _load_role(path, cls):
    model = model_from_checkpoint(load_checkpoint(path))
    if not isinstance(model, cls):
        raise InvalidConfig(f"{path} does not hold a {cls.__name__}")
    return model


def cmd_adapt(args) -> dict:
    cfg = _config(args)
    changes = {k: v for k, v in (("epochs", args.epochs), ("lr", args.lr)) if v is not None}
    cfg = cfg.replace(**changes) if changes else cfg
    source_path = args.source_checkpoint or cfg.source_checkpoint
    recon_path = args.recon_checkpoint or cfg.recon_checkpoint
    if not source_path or not recon_path:
        raise UsageError("adapt needs both --source-checkpoint and --recon-checkpoint "
                         "(run pretrain-source and pretrain-recon first)")
    source = _load_role(source_path, Classifier)
    recon = _load_role(recon_path, ReconstructionNet)
    data = _Data(args.data)
    if source.config.num_classes != data.manifest.num_classes:
        raise InvalidConfig(f"source model has {source.config.num_classes} classes, "
                            f"manifest has {data.manifest.num_classes}")
    train = data.prepared("train", cfg)
    test = data.prepared("test", cfg)
    feats = build_feature_providers(cfg, data.manifest.classes, train.height * train.width)
    if args.resume:
        state = TrainState.from_checkpoint(load_checkpoint(args.resume), cfg)
    else:
        state = init_state(recon, source, cfg, {k: train.reps[k].shape[1] for k in TARGET_KINDS})

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mode = "a" if args.resume else "w"
    with open(out / "loss_reports.jsonl", mode, encoding="utf-8") as reports, \
            open(out / "history.jsonl", mode, encoding="utf-8") as history:
        result = adapt_run(train, test, state, cfg, feats,
                           on_report=lambda r: reports.write(r.to_json() + "\n"),
                           on_epoch=lambda rec: history.write(json.dumps(rec, sort_keys=True) + "\n"))
    save_checkpoint(out / "state.ckpt", state.to_checkpoint())
    best = state.to_checkpoint()
    for name, sd in zip(("target_1", "target_2", "target_3"), result.best_targets):
        for pname, arr in sd.items():
            best.tensors[f"{name}/{pname}"] = arr
    best.meta["best_epoch"] = result.best_epoch
    save_checkpoint(out / "best.ckpt", best)
    _write_json(out / "config.json", cfg.to_dict())
    summary = {"initial": result.initial, "final": result.history[-1] if result.history else None,
               "best_epoch": result.best_epoch,
               "baseline": evaluate_baseline(source, test).to_dict()}
    _write_json(out / "metrics.json", summary)
    final_acc = summary["final"]["target_2"]["accuracy"] if summary["final"] else None
    return {"out": str(out), "epochs": state.epoch, "voxel_accuracy": final_acc,
            "baseline_accuracy": summary["baseline"]["accuracy"], "best_epoch": result.best_epoch}


def cmd_eval(args) -> dict:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    cfg = _config(args)
    data = _Data(args.data)
    prepared = data.prepared(args.split, cfg)
    ckpt = load_checkpoint(args.checkpoint)
    kind = RepresentationKind.parse(args.representation or "voxel")
    if ckpt.meta.get("kind") == "train_state":
        state = TrainState.from_checkpoint(ckpt, cfg)
        model = state.targets[TARGET_KINDS.index(kind)]
        report = evaluate(model, prepared.reps[kind], prepared.labels, model.config.num_classes)
        target = f"target_{int(kind)}"
    else:
        model = model_from_checkpoint(ckpt)
        if not isinstance(model, Classifier):
            raise InvalidConfig("eval needs a classifier or train-state checkpoint")
        if ckpt.meta.get("role") == "source":
            report, target = evaluate_baseline(model, prepared), "baseline"
        else:
            report = evaluate(model, prepared.reps[kind], prepared.labels, model.config.num_classes)
            target = f"target_{int(kind)}"
    doc = {"model": target, "split": args.split, **report.to_dict()}
    if args.out:
        _write_json(args.out, doc)
    return doc


# --- parser ---------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON file with AdaptConfig fields")
    p.add_argument("--out", required=out_required)
    p.add_argument("--bins", type=int)
    p.add_argument("--windows", type=int)
    p.add_argument("--count-threshold", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--feature-bank", help="text feature bank file")
    p.add_argument("--visual-bank", help="precomputed visual feature bank file")
    p.add_argument("--stub-feature-dim", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evdance", description="Source-free image-to-event adaptation toolkit.")
    parser.add_argument("--version", action="version", version=f"evdance {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="write the seeded synthetic bar-sweep dataset")
    _common(p)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--streams-per-class", type=int, default=100)
    p.add_argument("--events-per-stream", type=int, default=2000)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--height", type=int, default=16)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("gen-features", help="write a stub text or visual feature bank")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory with manifest.json")
    p.add_argument("--kind", choices=["text", "visual"], default="text")
    p.set_defaults(func=cmd_gen_features)

    p = sub.add_parser("convert", help="build a representation of one event file, or re-encode it")
    _common(p)
    p.add_argument("input")
    p.add_argument("--kind", "--representation", dest="kind", default="voxel",
                   choices=["stack", "voxel", "est", "events"])
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("pretrain-source", help="train the image-domain source classifier")
    _common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_pretrain_source)

    p = sub.add_parser("pretrain-recon", help="train the event-to-frame reconstruction net")
    _common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_pretrain_recon)

    p = sub.add_parser("adapt", help="joint source-free adaptation")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--source-checkpoint")
    p.add_argument("--recon-checkpoint")
    p.add_argument("--resume", help="train-state checkpoint to continue from")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a dataset split")
    _common(p, out_required=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--representation", choices=["stack", "voxel", "est"])
    p.set_defaults(func=cmd_eval)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("EVDANCE_LOG", "quiet").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"EVDANCE_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(message: str, code: int) -> int:
    print(json.dumps({"error": message}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        result = args.func(args)
    except UsageError as exc:
        return _fail(str(exc), 2)
    except (EvDanceError, ValueError, KeyError, OSError) as exc:
        return _fail(f"{type(exc).__name__}: {exc}", 1)
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
