"""Count metrics, the residual-fraction sweep, overhead accounting and report tables."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .channel import ChannelConfig
from .decoder import check_p
from .errors import DatasetError, ShapeError
from .model import FrameSet, ModelBundle, decode_in_sequences


def _errors(preds: Sequence[float], gts: Sequence[float]) -> list[Fraction]:
    preds = np.asarray(preds, dtype=float).ravel().tolist()
    gts = np.asarray(gts, dtype=float).ravel().tolist()
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions vs {len(gts)} ground-truth counts")
    if not preds:
        raise ValueError("metrics need at least one sample")
    return [Fraction(p) - Fraction(g) for p, g in zip(preds, gts)]


# Both metrics are evaluated in exact rational arithmetic and rounded once,
# so the result is the float nearest the true mean and independent of order.


def mae(preds, gts) -> float:
    """Mean absolute count error over the I frames."""
    errs = _errors(preds, gts)
    return float(sum(abs(e) for e in errs) / len(errs))


def mse(preds, gts) -> float:
    """Mean squared count error over the I frames."""
    errs = _errors(preds, gts)
    return float(sum(e * e for e in errs) / len(errs))


@dataclass
class MetricsReport:
    mae: float
    mse: float
    i_count: int
    snr_db: float
    p: float

    @classmethod
    def from_counts(cls, preds, gts, snr_db: float, p: float) -> "MetricsReport":
        return cls(mae(preds, gts), mse(preds, gts), len(np.ravel(gts)), snr_db, p)


@dataclass
class OverheadReport:
    raw_bytes: float
    encoded_bytes: float
    reduction_pct: float


def overhead_from_sizes(raw_bytes: float, encoded_bytes: float) -> OverheadReport:
    if raw_bytes <= 0:
        raise ValueError(f"raw size must be positive, got {raw_bytes}")
    return OverheadReport(raw_bytes, encoded_bytes, 100.0 * (raw_bytes - encoded_bytes) / raw_bytes)


def serialize_density_map(density: np.ndarray) -> bytes:
    """8-bit quantization over the map's own [min, max] range, then zlib.

    Payload: float32 min, float32 max, u16 height, u16 width, then the
    deflated uint8 pixels.
    """
    density = np.asarray(density, dtype=np.float64)
    lo, hi = float(density.min()), float(density.max())
    span = hi - lo
    q = np.zeros(density.shape, dtype=np.uint8) if span == 0 else np.round((density - lo) / span * 255.0).astype(np.uint8)
    header = struct.pack("<ffHH", lo, hi, *density.shape)
    return header + zlib.compress(q.tobytes(), 9)


def deserialize_density_map(payload: bytes) -> np.ndarray:
    lo, hi, h, w = struct.unpack("<ffHH", payload[:12])
    q = np.frombuffer(zlib.decompress(payload[12:]), dtype=np.uint8).reshape(h, w)
    return lo + q.astype(np.float64) / 255.0 * (hi - lo)


def overhead(image_paths: Iterable[str | Path], density_maps: Sequence[np.ndarray]) -> OverheadReport:
    """Raw on-disk image bytes against serialized density-map bytes, one map per image."""
    paths = [Path(p) for p in image_paths]
    if len(paths) != len(density_maps):
        raise ShapeError(f"{len(paths)} images but {len(density_maps)} density maps")
    for p in paths:
        if not p.is_file():
            raise DatasetError(f"missing image file {p}")
    raw = sum(p.stat().st_size for p in paths)
    encoded = sum(len(serialize_density_map(d)) for d in density_maps)
    return overhead_from_sizes(raw, encoded)


def _channel_at(bundle: ModelBundle, snr_db: float | None) -> ChannelConfig:
    if snr_db is None:
        return bundle.channel_cfg
    return dataclasses.replace(bundle.channel_cfg, snr_db=float(snr_db))


def received_maps(bundle: ModelBundle, data: FrameSet, snr_db: float | None = None, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Encoder densities ``D`` and received maps ``Z`` for every frame, batch by batch."""
    rng = np.random.default_rng(seed)
    channel = _channel_at(bundle, snr_db)
    dens, maps = [], []
    with T.no_grad():
        for sl in data.batches(bundle.train_cfg.batch_size):
            fwd = bundle.forward(data.images[sl], rng=rng, channel=channel)
            dens.append(fwd.density.data)
            maps.append(fwd.maps.data)
    return np.concatenate(dens), np.concatenate(maps)


def predict_from_maps(bundle: ModelBundle, maps: np.ndarray, p: float | None = None) -> np.ndarray:
    preds = []
    step = bundle.train_cfg.batch_size
    with T.no_grad():
        for start in range(0, len(maps), step):
            z = T.Tensor(maps[start : start + step])
            preds.append(decode_in_sequences(bundle.decoder, z, bundle.decoder_cfg.sequence_length, p=p).data)
    return np.concatenate(preds)


def evaluate(bundle: ModelBundle, data: FrameSet, snr_db: float | None = None, seed: int = 0, p: float | None = None) -> tuple[MetricsReport, np.ndarray]:
    """Test-split metrics with dropout off and channel noise on; returns the report and predictions."""
    p = bundle.decoder_cfg.p if p is None else check_p(p)
    _, maps = received_maps(bundle, data, snr_db, seed)
    preds = predict_from_maps(bundle, maps, p)
    snr = _channel_at(bundle, snr_db).snr_db
    return MetricsReport.from_counts(preds, data.counts, snr, p), preds


@dataclass
class SweepResult:
    curve: list[tuple[float, MetricsReport]]
    best_p: float
    best: MetricsReport


def p_sweep(bundle: ModelBundle, data: FrameSet, p_grid: Sequence[float], snr_db: float | None = None, seed: int = 0) -> SweepResult:
    """Metrics at each residual fraction, reusing one channel realization and no retraining.

    The residual path has no parameters, so only ``p`` changes between grid
    points. Ties for the minimum MAE go to the earliest grid point.
    """
    grid = [check_p(p) for p in p_grid]
    if not grid:
        raise ValueError("p_grid is empty")
    _, maps = received_maps(bundle, data, snr_db, seed)
    snr = _channel_at(bundle, snr_db).snr_db
    curve = [(p, MetricsReport.from_counts(predict_from_maps(bundle, maps, p), data.counts, snr, p)) for p in grid]
    best_p, best = min(curve, key=lambda item: item[1].mae)
    return SweepResult(curve, best_p, best)


# Reference MAE/MSE on TRANCOS, for side-by-side tables.
TABLE_II = {
    "GRU": (11.88, 77.79),
    "LSTM": (10.78, 67.74),
    "FCN-rLSTM": (7.42, 43.28),
    "CNN-LSTM": (6.23, 38.15),
}


def reference_reports() -> list[tuple[str, MetricsReport]]:
    return [(f"reference:{name}", MetricsReport(a, b, 421, math.nan, math.nan)) for name, (a, b) in TABLE_II.items()]


REPORT_COLUMNS = ("label", "mae", "mse", "i_count", "snr_db", "p")


def compare_report(runs: Sequence[MetricsReport], labels: Sequence[str], *, fmt: str = "csv") -> str:
    """Render reports as CSV (``fmt="csv"``) or an aligned plain-text table (``fmt="table"``)."""
    if not runs:
        raise ValueError("nothing to report")
    if len(runs) != len(labels):
        raise ShapeError(f"{len(runs)} reports but {len(labels)} labels")
    rows = [[label, r.mae, r.mse, r.i_count, r.snr_db, r.p] for label, r in zip(labels, runs)]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        writer.writerows([[row[0]] + [repr(v) if isinstance(v, float) else v for v in row[1:]] for row in rows])
        return buf.getvalue()
    text = [[str(row[0])] + [f"{v:.4f}" if isinstance(v, float) else str(v) for v in row[1:]] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in text)) for i, c in enumerate(REPORT_COLUMNS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(REPORT_COLUMNS, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in text]
    return "\n".join(lines) + "\n"


def sweep_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["p", "mae", "mse", "i_count", "snr_db", "argmin"])
    for p, r in result.curve:
        writer.writerow([repr(p), repr(r.mae), repr(r.mse), r.i_count, repr(r.snr_db), int(p == result.best_p)])
    return buf.getvalue()
