"""Command-line front end: ``semcount {synth,train,eval,sweep,overhead}``.

Every command writes ``<command>.manifest.json`` into ``--out`` before doing
any work. A failed command removes whatever it created and exits nonzero
with one diagnostic line on stderr.

Typical session::

    semcount synth --out run --seed 7
    semcount train --out run
    semcount eval  --out run
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import shutil
import sys
import traceback
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from .config import RunSettings, parse_config
from .data import load_dataset, split, synth_generate, write_dataset
from .errors import ConfigError, DatasetError
from .evaluation import compare_report, evaluate, overhead, p_sweep, received_maps, reference_reports, sweep_csv
from .model import FrameSet, ModelBundle
from .training import checkpoint_load, fit, write_history_csv

log = logging.getLogger("semcount")

DEFAULT_P_GRID = tuple(round(0.1 * i, 1) for i in range(11))
COMMANDS = ("synth", "train", "eval", "sweep", "overhead")


class MissingCheckpointError(ConfigError):
    pass


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    digest = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return f"{version}+{digest.hexdigest()[:12]}"


class Run:
    """Output directory bookkeeping for one command: tracks what it creates."""

    def __init__(self, out: Path):
        self.out = out
        self.created: list[Path] = []
        if not out.exists():
            out.mkdir(parents=True)
            self.created.append(out)

    def path(self, name: str) -> Path:
        p = self.out / name
        if not p.exists():
            self.created.append(p)
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        return p

    def cleanup(self) -> None:
        for p in reversed(self.created):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def _write_manifest(run: Run, command: str, args: argparse.Namespace, settings: RunSettings) -> None:
    manifest = {
        "command": command,
        "arguments": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "command"},
        "seed": settings.train.seed,
        "config": settings.to_dict(),
        "code_version": code_version(),
        "created": datetime.now(timezone.utc).isoformat(),
    }
    run.write_text(f"{command}.manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _dataset_dir(args: argparse.Namespace) -> Path:
    root = Path(args.dataset) if args.dataset else args.out / "dataset"
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} not found (pass --dataset or run 'synth' first)")
    return root


def _load_frames(args, settings: RunSettings, encoder_cfg=None):
    enc = encoder_cfg or settings.encoder
    if settings.data.grayscale != (enc.input_channels == 1):
        raise ConfigError(f"data.grayscale={settings.data.grayscale} conflicts with encoder.input_channels={enc.input_channels}")
    frames = load_dataset(_dataset_dir(args), grayscale=settings.data.grayscale, size=(enc.input_height, enc.input_width))
    if not frames:
        raise DatasetError("dataset contains no frames")
    return frames


def _splits(frames, settings: RunSettings, blob_sigma: float) -> dict[str, FrameSet]:
    parts = split(frames, test=settings.data.test)
    return {name: FrameSet.from_frames(fr, blob_sigma) for name, fr in parts.items() if fr}


def _checkpoint(args) -> Path:
    if args.checkpoint:
        path = Path(args.checkpoint)
    else:
        ckpt_dir = args.out / "checkpoints"
        path = next((p for p in (ckpt_dir / "best.semc", ckpt_dir / "final.semc") if p.is_file()), ckpt_dir / "final.semc")
    if not path.is_file():
        raise MissingCheckpointError(f"missing checkpoint: {path} does not exist (run 'train' first or pass --checkpoint)")
    return path


def _test_split(args, settings, bundle) -> FrameSet:
    splits = _splits(_load_frames(args, settings, bundle.encoder_cfg), settings, bundle.train_cfg.blob_sigma)
    if "test" not in splits:
        raise DatasetError("test split is empty")
    return splits["test"]


def cmd_synth(args, settings: RunSettings, run: Run) -> None:
    frames = synth_generate(settings.synthetic)
    write_dataset(frames, run.path("dataset"))
    print(f"wrote {len(frames)} frames to {args.out / 'dataset'}")


def cmd_train(args, settings: RunSettings, run: Run) -> None:
    frames = _load_frames(args, settings)
    splits = _splits(frames, settings, settings.train.blob_sigma)
    if "train" not in splits:
        raise DatasetError("training split is empty")
    if args.checkpoint:
        bundle = checkpoint_load(_checkpoint(args))
        cfg = dataclasses.replace(bundle.train_cfg, epochs=settings.train.epochs)
    else:
        bundle = ModelBundle(settings.encoder, settings.channel, settings.decoder, settings.train)
        cfg = settings.train
    bundle, history = fit(splits, bundle, cfg, checkpoint_dir=run.path("checkpoints"))
    write_history_csv(history, run.path("loss_history.csv"))
    last = history[-1]
    print(f"trained {bundle.epoch} epochs; last {last.split} L_count {last.total:.6g}")


def cmd_eval(args, settings: RunSettings, run: Run) -> None:
    bundle = checkpoint_load(_checkpoint(args))
    test = _test_split(args, settings, bundle)
    report, preds = evaluate(bundle, test, args.snr_db, seed=settings.train.seed)
    run.write_text("metrics.csv", compare_report([report], ["model"]))
    lines = ["frame_id,pred,gt"] + [f"{fid},{p!r},{g!r}" for fid, p, g in zip(test.frame_ids, preds.tolist(), test.counts.tolist())]
    run.write_text("predictions.csv", "\n".join(lines) + "\n")
    refs = reference_reports()
    print(compare_report([report] + [r for _, r in refs], ["model"] + [name for name, _ in refs], fmt="table"), end="")


def _parse_grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--p-grid: expected a comma-separated list of numbers, got {text!r}") from None


def cmd_sweep(args, settings: RunSettings, run: Run) -> None:
    bundle = checkpoint_load(_checkpoint(args))
    test = _test_split(args, settings, bundle)
    grid = _parse_grid(args.p_grid) if args.p_grid else list(DEFAULT_P_GRID)
    result = p_sweep(bundle, test, grid, args.snr_db, seed=settings.train.seed)
    run.write_text("sweep.csv", sweep_csv(result))
    print(f"argmin p = {result.best_p} (MAE {result.best.mae:.4f}, MSE {result.best.mse:.4f})")


def cmd_overhead(args, settings: RunSettings, run: Run) -> None:
    root = _dataset_dir(args)
    if args.checkpoint:
        bundle = checkpoint_load(_checkpoint(args))
        frames = _load_frames(args, settings, bundle.encoder_cfg)
        data = FrameSet.from_frames(frames, bundle.train_cfg.blob_sigma)
        maps, _ = received_maps(bundle, data, math.inf)  # encoder output D
        source = "encoder"
    else:
        frames = _load_frames(args, settings)
        maps = FrameSet.from_frames(frames, settings.train.blob_sigma).densities
        source = "ground-truth"
    images = sorted(p for p in (root / "images").iterdir() if p.stem in {f.frame_id for f in frames})
    report = overhead(images, list(np.asarray(maps)))
    run.write_text(
        "overhead.csv",
        "raw_bytes,encoded_bytes,reduction_pct,maps\n"
        f"{report.raw_bytes},{report.encoded_bytes},{report.reduction_pct!r},{source}\n",
    )
    kib = 1024.0
    print(f"raw {report.raw_bytes / kib:.1f} KiB, density maps {report.encoded_bytes / kib:.1f} KiB, reduction {report.reduction_pct:.2f}%")


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "overhead": cmd_overhead}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semcount", description="Density-map semantic communication for vehicle counting.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate a synthetic corpus into <out>/dataset",
        "train": "train the joint model; writes checkpoints and loss_history.csv",
        "eval": "test-split MAE/MSE; writes metrics.csv and predictions.csv",
        "sweep": "MAE/MSE over residual fractions p; writes sweep.csv",
        "overhead": "raw image bytes against serialized density-map bytes; writes overhead.csv",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, help="TOML config file (defaults for anything omitted)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--dataset", type=Path, help="dataset root (default <out>/dataset)")
        p.add_argument("--checkpoint", type=Path, help="checkpoint file (eval/sweep default: <out>/checkpoints)")
        p.add_argument("--p-grid", help="comma-separated residual fractions for sweep")
        p.add_argument("--snr-db", type=float, help="evaluation SNR in dB (default: the trained channel's)")
    return parser


def _origin(exc: BaseException) -> str:
    """Name of the innermost package module the exception passed through."""
    name = "cli"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith(__package__ + "."):
            name = mod.rsplit(".", 1)[-1]
    return name


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    run = None
    try:
        settings = parse_config(args.config)
        if args.seed is not None:
            settings = settings.with_seed(args.seed)
        run = Run(args.out)
        _write_manifest(run, args.command, args, settings)
        HANDLERS[args.command](args, settings, run)
    except (ValueError, RuntimeError, OSError) as exc:
        if run is not None:
            run.cleanup()
        print(f"semcount {args.command}: error in {_origin(exc)}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
