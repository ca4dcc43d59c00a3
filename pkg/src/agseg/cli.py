"""Command-line entry point.

Subcommands cover the whole workflow: synthesize a corpus, materialize edge
targets, train once on the 6/2/2 split, run k-fold cross-validation, rank a
hyperparameter grid, predict on a single image, and render report plots.

Training runs are driven by one JSON config file (sections: network, hyper,
loss, augment, plus manifest and out_dir) so every experiment is a
reproducible artifact; the fully defaulted config is echoed into the output
directory. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .data import (MASK_THRESHOLD, AugmentationSpec, Manifest, decode_image,
                   load_manifest, resize, synth_corpus)
from .edge import edge_target_from_mask
from .model import NetworkConfig, forward, load_network, save_network
from .nn import LossConfig
from .svgplot import write_report_plots
from .train import HyperConfig, TrainRunReport, hyper_search, run_cv, train_622

SEED_ENV_VAR = "AGSEG_SEED"
_GRID_RESOURCE = "resources/default_grid.json"
_CONFIG_KEYS = {"manifest", "out_dir", "network", "hyper", "loss", "augment"}


class UsageError(Exception):
    """Bad invocation: malformed flags, config files, or missing inputs."""


@dataclass
class RunConfig:
    """A parsed run config file with every default materialized."""

    manifest_path: Path
    out_dir: Path
    network: NetworkConfig
    hyper: HyperConfig
    loss: LossConfig
    augment: AugmentationSpec | None

    def to_dict(self) -> dict:
        return {"manifest": str(self.manifest_path), "out_dir": str(self.out_dir),
                "network": self.network.to_dict(), "hyper": self.hyper.to_dict(),
                "loss": self.loss.to_dict(),
                "augment": self.augment.to_dict() if self.augment is not None else None}


def load_run_config(path) -> RunConfig:
    """Parse and validate a run config JSON file.

    Unknown keys anywhere are rejected (typo protection), every violation is
    reported at once, and relative manifest/out_dir paths resolve against the
    config file's own directory so configs stay portable. The AGSEG_SEED
    environment variable, when set, overrides every seed in the file.
    """
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{path}: no such config file")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a JSON object")

    errors = []
    unknown = sorted(set(raw) - _CONFIG_KEYS)
    if unknown:
        errors.append(f"unknown config keys: {', '.join(unknown)}")
    for required in ("manifest", "out_dir"):
        if not isinstance(raw.get(required), str):
            errors.append(f"key {required!r} must be present and a string path")

    def section(key: str, parser, default):
        data = raw.get(key)
        if data is None:
            return default
        if not isinstance(data, dict):
            errors.append(f"section {key!r} must be a JSON object")
            return default
        try:
            return parser(data)
        except (TypeError, ValueError) as exc:
            errors.append(str(exc))
            return default

    network = section("network", NetworkConfig.from_dict, NetworkConfig())
    hyper = section("hyper", HyperConfig.from_dict, HyperConfig())
    loss = section("loss", LossConfig.from_dict, LossConfig())
    augment = section("augment", AugmentationSpec.from_dict, None)

    override = os.environ.get(SEED_ENV_VAR)
    if override is not None:
        try:
            seed = int(override)
        except ValueError:
            errors.append(f"{SEED_ENV_VAR} must be an integer, got {override!r}")
        else:
            network = replace(network, seed=seed)
            hyper = replace(hyper, seed=seed)
            if augment is not None:
                augment = replace(augment, seed=seed)

    for cfg in (network, hyper, loss, augment):
        if cfg is not None:
            errors.extend(cfg.validate())
    if errors:
        raise UsageError(f"{path}: " + "; ".join(errors))

    base = path.parent
    return RunConfig(manifest_path=(base / raw["manifest"]).resolve(),
                     out_dir=(base / raw["out_dir"]).resolve(),
                     network=network, hyper=hyper, loss=loss, augment=augment)


def _prepare_run(config_path) -> tuple[RunConfig, Manifest]:
    """Load config and manifest, create out_dir, echo the resolved config."""
    cfg = load_run_config(config_path)
    try:
        manifest = load_manifest(cfg.manifest_path)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.out_dir / "resolved_config.json", cfg.to_dict())
    return cfg, manifest


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _write_losses_csv(path: Path, report: TrainRunReport) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fold", "epoch", "train_loss", "val_loss"])
        for fold in report.folds:
            for epoch, (tr, va) in enumerate(zip(fold.train_losses, fold.val_losses), 1):
                writer.writerow([fold.fold, epoch, tr, va])


def _write_confusion_csv(path: Path, report: TrainRunReport) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fold", "tp", "fp", "fn", "tn"])
        for fold in report.folds:
            cm = fold.confusion
            writer.writerow([fold.fold, cm.tp, cm.fp, cm.fn, cm.tn])
        agg = report.aggregate_confusion
        writer.writerow(["aggregate", agg.tp, agg.fp, agg.fn, agg.tn])


def _write_run_artifacts(cfg: RunConfig, report: TrainRunReport) -> None:
    _write_json(cfg.out_dir / "report.json", report.to_dict())
    _write_losses_csv(cfg.out_dir / "losses.csv", report)
    _write_confusion_csv(cfg.out_dir / "confusion.csv", report)


def _write_gray(path: Path, plane: np.ndarray) -> None:
    """Save a [0,1] 2-D array as 8-bit grayscale (0 -> 0, 1 -> 255)."""
    levels = np.rint(np.asarray(plane, dtype=np.float64) * 255.0)
    Image.fromarray(np.clip(levels, 0, 255).astype(np.uint8), mode="L").save(path)


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.size < 8:
        raise UsageError("--size must be >= 8")
    if args.seed < 0:
        raise UsageError("--seed must be >= 0")
    manifest = synth_corpus(args.n, args.size, args.seed, args.out)
    print(f"wrote {len(manifest)} image/mask pairs under {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg, manifest = _prepare_run(args.config)
    state, report = train_622(manifest, cfg.hyper, cfg.network, cfg.augment, cfg.loss)
    save_network(cfg.out_dir / "model.ckpt", state)
    _write_run_artifacts(cfg, report)
    agg = report.aggregate
    print(f"trained {report.folds[0].epochs_run} epochs; test iou {agg.iou:.4f}, "
          f"f1 {agg.f1:.4f}, bce {agg.bce:.4f}")
    print(f"artifacts in {cfg.out_dir}")
    return 0


def cmd_cv(args) -> int:
    cfg, manifest = _prepare_run(args.config)
    report = run_cv(manifest, cfg.hyper, cfg.network, cfg.augment, cfg.loss,
                    jobs=args.jobs)
    _write_run_artifacts(cfg, report)
    for fold in report.folds:
        print(f"fold {fold.fold}: epochs {fold.epochs_run}, iou {fold.report.iou:.4f}, "
              f"bce {fold.report.bce:.4f}")
    agg = report.aggregate
    print(f"aggregate: iou {agg.iou:.4f}, f1 {agg.f1:.4f}, bce {agg.bce:.4f}")
    print(f"artifacts in {cfg.out_dir}")
    return 0


def _load_grid(path) -> list[HyperConfig]:
    if path is None:
        text = resources.files("agseg").joinpath(_GRID_RESOURCE).read_text(encoding="utf-8")
        label = "default grid"
    else:
        grid_path = Path(path)
        if not grid_path.is_file():
            raise UsageError(f"{grid_path}: no such grid file")
        text = grid_path.read_text(encoding="utf-8")
        label = str(grid_path)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{label}: invalid JSON ({exc})") from exc
    if not isinstance(raw, list) or not raw:
        raise UsageError(f"{label}: grid must be a nonempty JSON array")
    grid = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise UsageError(f"{label}: entry {i} must be a JSON object")
        try:
            grid.append(HyperConfig.from_dict(entry))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{label}: entry {i}: {exc}") from exc
    return grid


def cmd_tune(args) -> int:
    cfg, manifest = _prepare_run(args.config)
    grid = _load_grid(args.grid)
    results = hyper_search(manifest, grid, cfg.network, cfg.augment, cfg.loss,
                           jobs=args.jobs)
    _write_json(cfg.out_dir / "tune_results.json", results)
    with (cfg.out_dir / "tune_results.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rank", "grid_index", "learning_rate", "filter_size",
                         "batch_size", "k", "val_bce", "error"])
        for entry in results:
            h = entry["hyper"]
            writer.writerow([entry["rank"], entry["grid_index"], h["learning_rate"],
                             "" if h["filter_size"] is None else h["filter_size"],
                             h["batch_size"], h["k"],
                             "" if entry["bce"] is None else entry["bce"],
                             entry["error"] or ""])
    best = results[0]
    if best["bce"] is None:
        print("no grid config trained successfully; see tune_results.csv")
    else:
        h = best["hyper"]
        print(f"best: lr {h['learning_rate']}, filters {h['filter_size']}, "
              f"batch {h['batch_size']}, k {h['k']}, val bce {best['bce']:.4f}")
    print(f"artifacts in {cfg.out_dir}")
    return 0


def cmd_predict(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"{ckpt}: no such checkpoint")
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError("--threshold must be in [0, 1]")
    try:
        state = load_network(ckpt)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    image_path = Path(args.image)
    if not image_path.is_file():
        raise UsageError(f"{image_path}: no such image")
    try:
        arr = decode_image(image_path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if arr.shape[0] != state.config.input_channels:
        raise UsageError(f"{image_path}: has {arr.shape[0]} channels, network "
                         f"expects {state.config.input_channels}")
    batch = Tensor(resize(Tensor(arr), state.config.input_size, kind="image").data[None])

    seg, edge, alpha = forward(state, batch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prob = seg.data[0, 0].astype(np.float64)
    _write_gray(out / "mask.png", (prob >= args.threshold).astype(np.float64))
    _write_gray(out / "prob.png", prob)
    _write_gray(out / "edge.png", edge.data[0, 0])
    written = ["mask.png", "prob.png", "edge.png"]
    if alpha is not None:
        _write_gray(out / "alpha.png", alpha.data[0, 0])
        written.append("alpha.png")
    print(f"wrote {', '.join(written)} under {out}")
    return 0


def cmd_edges(args) -> int:
    masks_dir = Path(args.masks)
    if not masks_dir.is_dir():
        raise UsageError(f"{masks_dir}: not a directory")
    files = sorted(masks_dir.glob(args.pattern))
    if not files:
        raise UsageError(f"{masks_dir}: no files match {args.pattern!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in files:
        try:
            with Image.open(path) as img:
                gray = np.asarray(img.convert("L"), dtype=np.float64)
        except Exception as exc:
            raise UsageError(f"cannot decode mask {path}: {exc}") from exc
        binary = (gray > MASK_THRESHOLD).astype(np.float32)[None, None]
        target = edge_target_from_mask(binary)
        _write_gray(out / f"{path.stem}_edge.png", target[0, 0].astype(np.float64))
    print(f"wrote {len(files)} edge maps under {out}")
    return 0


def cmd_plot(args) -> int:
    report_path = Path(args.report)
    if not report_path.is_file():
        raise UsageError(f"{report_path}: no such report file")
    try:
        payload = json.loads(report_path.read_text(encoding="utf-8"))
        report = TrainRunReport.from_dict(payload)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{report_path}: not a training report ({exc})") from exc
    written = write_report_plots(report, args.out)
    print(f"wrote {len(written)} plots under {args.out}")
    return 0


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agseg",
        description="Train and run an attention-gated, edge-supervised "
                    "segmentation autoencoder.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="write a synthetic image/mask corpus with a manifest")
    p.add_argument("--n", type=int, required=True, help="number of image/mask pairs")
    p.add_argument("--size", type=int, default=64, help="square image side in pixels (default 64)")
    p.add_argument("--seed", type=int, default=0, help="corpus random seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train once on the 6/2/2 subject split")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="subject-wise k-fold cross-validation")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.add_argument("--jobs", type=_positive_int, default=1,
                   help="parallel fold jobs (default 1)")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("tune", help="rank a hyperparameter grid by one-epoch validation BCE")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.add_argument("--grid", default=None,
                   help="grid JSON file, an array of hyper configs "
                        "(default: the shipped 5-round grid)")
    p.add_argument("--jobs", type=_positive_int, default=1,
                   help="parallel trial jobs (default 1)")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("predict", help="segment one image with a trained checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file from train")
    p.add_argument("--image", required=True, help="input image (8-bit L or RGB)")
    p.add_argument("--out", required=True, help="output directory for the maps")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="mask binarization threshold (default 0.5)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("edges", aliases=["make-edges"],
                       help="materialize boundary targets from a directory of binary masks")
    p.add_argument("--masks", required=True, help="directory holding mask images")
    p.add_argument("--pattern", default="*.png",
                   help="glob for mask files inside --masks (default '*.png')")
    p.add_argument("--out", required=True, help="output directory for edge maps")
    p.set_defaults(func=cmd_edges)

    p = sub.add_parser("plot", help="render SVG loss curves, metric bars, and "
                                    "confusion heatmaps from a report")
    p.add_argument("--report", required=True, help="report JSON from train or cv")
    p.add_argument("--out", required=True, help="output directory for .svg files")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage or help
        code = exc.code
        return code if isinstance(code, int) else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
