"""Joint end-to-end training: losses, the epoch loop, checkpoints and loss history."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .channel import ChannelConfig
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import CorruptionError, DivergenceError, ShapeError
from .model import FrameSet, ModelBundle, TrainConfig
from .optim import adam_step
from .tensor import Tensor

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def encoder_loss(density: Tensor, target) -> Tensor:
    """Per-frame sum of squared pixel errors, averaged over the batch."""
    target = T.as_tensor(target)
    if density.shape != target.shape:
        raise ShapeError(f"encoder_loss: {density.shape} vs {target.shape}")
    diff = T.sub(density, target)
    return T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / density.shape[0])


def decoder_loss(pred: Tensor, target) -> Tensor:
    """Mean squared count error over the batch."""
    target = T.as_tensor(target)
    if pred.shape != target.shape or pred.ndim != 1:
        raise ShapeError(f"decoder_loss: {pred.shape} vs {target.shape}")
    diff = T.sub(pred, target)
    return T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / pred.shape[0])


def total_loss(enc, dec, lam: float):
    """``enc + lam * dec`` for floats or 0-d tensors."""
    if isinstance(enc, Tensor):
        return T.add(enc, T.scale(dec, lam))
    return enc + dec * float(lam)


@dataclass
class LossReport:
    epoch: int
    split: str
    enc_loss: float
    dec_loss: float
    total: float


@dataclass
class BatchLosses:
    enc: Tensor
    dec: Tensor
    total: Tensor


def batch_losses(bundle: ModelBundle, data: FrameSet, sl: slice, *, training: bool, rng, noise=None) -> BatchLosses:
    fwd = bundle.forward(data.images[sl], training=training, rng=rng, noise=noise)
    enc = encoder_loss(fwd.density, data.densities[sl])
    dec = decoder_loss(fwd.counts, data.counts[sl])
    return BatchLosses(enc, dec, total_loss(enc, dec, bundle.train_cfg.lam))


def evaluate_losses(bundle: ModelBundle, data: FrameSet, rng: np.random.Generator) -> tuple[float, float]:
    """Batch-averaged encoder and decoder losses with dropout off and noise on."""
    enc, dec = [], []
    with T.no_grad():
        for sl in data.batches(bundle.train_cfg.batch_size):
            losses = batch_losses(bundle, data, sl, training=False, rng=rng)
            enc.append(losses.enc.item())
            dec.append(losses.dec.item())
    return float(np.mean(enc)), float(np.mean(dec))


def _report(epoch: int, split: str, enc: float, dec: float, lam: float) -> LossReport:
    return LossReport(epoch, split, enc, dec, total_loss(enc, dec, lam))


def fit(
    splits: dict[str, FrameSet],
    bundle: ModelBundle,
    cfg: TrainConfig | None = None,
    *,
    checkpoint_dir: str | Path | None = None,
) -> tuple[ModelBundle, list[LossReport]]:
    """Train until ``cfg.epochs`` epochs have run or the training loss drops below the threshold.

    One Adam step per batch on ``L_enc + lambda * L_dec`` (or one per epoch
    with ``per_epoch_updates``). Training resumes from ``bundle.epoch``, so a
    bundle restored from a checkpoint continues where it stopped. With
    ``checkpoint_dir`` the best-validation and final states are written as
    ``best.semc`` and ``final.semc``.
    """
    cfg = cfg or bundle.train_cfg
    bundle.train_cfg = cfg
    train = splits["train"]
    val = splits.get("validation")
    if len(train) == 0:
        raise ValueError("training split is empty")
    params = bundle.parameters()
    history: list[LossReport] = []
    best = math.inf
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    while bundle.epoch < cfg.epochs:
        epoch = bundle.epoch + 1
        enc_vals, dec_vals = [], []
        n_batches = math.ceil(len(train) / cfg.batch_size)
        bundle.zero_grad()
        for sl in train.batches(cfg.batch_size):
            if not cfg.per_epoch_updates:
                bundle.zero_grad()
            losses = batch_losses(bundle, train, sl, training=True, rng=bundle.rng)
            if not math.isfinite(losses.total.item()):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            objective = losses.total if not cfg.per_epoch_updates else T.scale(losses.total, 1.0 / n_batches)
            objective.backward()
            if not cfg.per_epoch_updates:
                adam_step(params, [p.grad for p in params], bundle.adam, cfg.learning_rate)
            enc_vals.append(losses.enc.item())
            dec_vals.append(losses.dec.item())
        if cfg.per_epoch_updates:
            adam_step(params, [p.grad for p in params], bundle.adam, cfg.learning_rate)
        bundle.epoch = epoch
        report = _report(epoch, "train", float(np.mean(enc_vals)), float(np.mean(dec_vals)), cfg.lam)
        history.append(report)
        if val is not None and len(val):
            v = _report(epoch, "validation", *evaluate_losses(bundle, val, bundle.rng), cfg.lam)
            history.append(v)
            if ckpt is not None and v.total < best:
                best = v.total
                checkpoint_save(bundle, ckpt / "best.semc")
        log.info("epoch %d train %.6g", epoch, report.total)
        if math.isfinite(cfg.loss_threshold) and report.total < cfg.loss_threshold:
            break
    if ckpt is not None:
        checkpoint_save(bundle, ckpt / "final.semc")
    return bundle, history


def write_history_csv(history: Sequence[LossReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "enc_loss", "dec_loss", "total"])
        for r in history:
            writer.writerow([r.epoch, r.split, repr(r.enc_loss), repr(r.dec_loss), repr(r.total)])


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (little-endian):
#   b"SEMC" | u32 version | u32 meta_len | meta JSON
#   u32 entry count | per entry: u16 name_len, name, u8 ndim, u32 dims...
#   float64 payload of every entry in table order
#   u32 CRC-32 of everything above
# ---------------------------------------------------------------------------

MAGIC = b"SEMC"
FORMAT_VERSION = 1


def _entries(bundle: ModelBundle) -> list[tuple[str, np.ndarray]]:
    named = bundle.named_parameters()
    out = [(f"param/{n}", t.data) for n, t in named]
    out += [(f"adam_m/{n}", m) for (n, _), m in zip(named, bundle.adam.first_moment)]
    out += [(f"adam_v/{n}", v) for (n, _), v in zip(named, bundle.adam.second_moment)]
    return out


def _meta(bundle: ModelBundle) -> dict:
    adam = bundle.adam
    return {
        "encoder": dataclasses.asdict(bundle.encoder_cfg),
        "channel": dataclasses.asdict(bundle.channel_cfg),
        "decoder": dataclasses.asdict(bundle.decoder_cfg),
        "train": dataclasses.asdict(bundle.train_cfg),
        "epoch": bundle.epoch,
        "adam": {"step_count": adam.step_count, "beta1": adam.beta1, "beta2": adam.beta2, "epsilon": adam.epsilon},
        "rng": bundle.rng.bit_generator.state,
    }


def checkpoint_bytes(bundle: ModelBundle) -> bytes:
    meta = json.dumps(_meta(bundle), sort_keys=True).encode()
    entries = _entries(bundle)
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta)), meta, struct.pack("<I", len(entries))]
    for name, arr in entries:
        raw = name.encode()
        parts.append(struct.pack("<HB", len(raw), arr.ndim) + raw + struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in entries:
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_save(bundle: ModelBundle, path: str | Path) -> None:
    """Write atomically: a temporary file in the target directory, then rename."""
    path = Path(path)
    payload = checkpoint_bytes(bundle)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_load(path: str | Path) -> ModelBundle:
    """Rebuild a bundle from a checkpoint; raises :class:`CorruptionError` on any inconsistency."""
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CorruptionError(f"{path}: bad magic, not a checkpoint")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(body)
    r.take(4)
    version, meta_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CorruptionError(f"{path}: unsupported format version {version}")
    if zlib.crc32(body) != crc:
        raise CorruptionError(f"{path}: checksum mismatch (truncated or corrupted)")
    try:
        meta = json.loads(r.take(meta_len))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable metadata") from exc
    (count,) = r.unpack("<I")
    table = []
    for _ in range(count):
        name_len, ndim = r.unpack("<HB")
        name = r.take(name_len).decode()
        table.append((name, r.unpack(f"<{ndim}I")))
    arrays = {}
    for name, shape in table:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(body):
        raise CorruptionError(f"{path}: trailing bytes after payload")

    try:
        bundle = ModelBundle(
            EncoderConfig(**meta["encoder"]),
            ChannelConfig(**meta["channel"]),
            DecoderConfig(**meta["decoder"]),
            TrainConfig(**meta["train"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptionError(f"{path}: invalid configuration block: {exc}") from exc
    expected = _entries(bundle)
    if [n for n, _ in expected] != [n for n, _ in table]:
        raise CorruptionError(f"{path}: parameter manifest does not match the configured model")
    for name, arr in expected:
        if arrays[name].shape != arr.shape:
            raise CorruptionError(f"{path}: {name} has shape {arrays[name].shape}, model expects {arr.shape}")
    for name, t in bundle.named_parameters():
        t.data[...] = arrays[f"param/{name}"]
    for (name, _), m, v in zip(bundle.named_parameters(), bundle.adam.first_moment, bundle.adam.second_moment):
        m[...] = arrays[f"adam_m/{name}"]
        v[...] = arrays[f"adam_v/{name}"]
    adam = meta["adam"]
    bundle.adam.step_count = adam["step_count"]
    bundle.adam.beta1, bundle.adam.beta2, bundle.adam.epsilon = adam["beta1"], adam["beta2"], adam["epsilon"]
    bundle.epoch = meta["epoch"]
    bundle.rng.bit_generator.state = meta["rng"]
    return bundle
