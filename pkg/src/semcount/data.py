"""Dataset ingestion, ground-truth density synthesis, synthetic scenes and splits.

On disk a dataset is::

    <root>/images/<name>.png|.jpg
    <root>/annotations/<name>.txt      # one "x y" integer pair per line

Frames are ordered by file name; that order is the sequence order seen by
the recurrent decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# Standard train/validation/test split of the 1244-frame TRANCOS corpus.
TRANCOS_FRAMES = 1244
TRANCOS_SPLIT = (658, 165, 421)


@dataclass
class AnnotatedFrame:
    image: np.ndarray  # (C, H, W) floats in [0, 1]
    dots: list[tuple[float, float]]  # (x, y) = (column, row)
    frame_id: str

    def __post_init__(self):
        _, h, w = self.image.shape
        for x, y in self.dots:
            if not (0 <= x < w and 0 <= y < h):
                raise DatasetError(f"frame {self.frame_id}: dot ({x}, {y}) outside {w}x{h} image")

    @property
    def count(self) -> int:
        return len(self.dots)


@dataclass
class SyntheticConfig:
    count_range: tuple[int, int] = (2, 10)
    blob_sigma: float = 4.0
    image_size: tuple[int, int] = (64, 64)  # (height, width)
    background_noise: float = 0.05
    seed: int = 0
    num_frames: int = 64
    vehicle_size: tuple[int, int] = (4, 6)  # (height, width) in pixels

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"count_range must satisfy 0 <= min <= max, got {self.count_range}")
        if self.blob_sigma <= 0:
            raise ConfigError(f"blob_sigma must be positive, got {self.blob_sigma}")
        if self.num_frames < 0:
            raise ConfigError(f"num_frames must be non-negative, got {self.num_frames}")
        self.count_range = (int(lo), int(hi))
        self.image_size = tuple(self.image_size)
        self.vehicle_size = tuple(self.vehicle_size)


def _truncated_gaussian(length: int, center: float, sigma: float) -> np.ndarray:
    g = np.exp(-0.5 * ((np.arange(length) - center) / sigma) ** 2)
    return g / g.sum()


def make_gt_density(dots: Sequence[tuple[float, float]], image_size: tuple[int, int], blob_sigma: float = 4.0) -> np.ndarray:
    """Sum of one isotropic Gaussian per dot, each renormalized to unit mass inside the image.

    The kernel is separable, so renormalizing each 1-D factor over the grid
    makes the truncated 2-D kernel sum to exactly 1 even at the border.
    """
    if blob_sigma <= 0:
        raise ConfigError(f"blob_sigma must be positive, got {blob_sigma}")
    h, w = image_size
    density = np.zeros((h, w))
    for x, y in dots:
        if not (0 <= x < w and 0 <= y < h):
            raise DatasetError(f"dot ({x}, {y}) outside {w}x{h} image")
        density += np.outer(_truncated_gaussian(h, y, blob_sigma), _truncated_gaussian(w, x, blob_sigma))
    return density


def synth_generate(cfg: SyntheticConfig) -> list[AnnotatedFrame]:
    """Deterministic scenes: dark noisy background with light rectangles at the dots.

    Pixel values are quantized to 8 bits so that a corpus written to disk and
    read back is identical to the in-memory one.
    """
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.image_size
    vh, vw = cfg.vehicle_size
    lo, hi = cfg.count_range
    width = max(4, len(str(max(cfg.num_frames - 1, 0))))
    frames = []
    for idx in range(cfg.num_frames):
        n = int(rng.integers(lo, hi + 1))
        xs = rng.integers(0, w, size=n)
        ys = rng.integers(0, h, size=n)
        img = 0.1 + cfg.background_noise * rng.standard_normal((h, w))
        for x, y in zip(xs, ys):
            r0, c0 = max(0, y - vh // 2), max(0, x - vw // 2)
            img[r0 : y - vh // 2 + vh, c0 : x - vw // 2 + vw] = 0.8
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        dots = [(int(x), int(y)) for x, y in zip(xs, ys)]
        frames.append(AnnotatedFrame(img[None], dots, f"frame_{idx:0{width}d}"))
    return frames


def write_dataset(frames: Sequence[AnnotatedFrame], root: str | Path) -> None:
    """Write frames in the on-disk layout read by :func:`load_dataset`."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    for frame in frames:
        pixels = np.round(frame.image * 255.0).astype(np.uint8)
        mode_img = Image.fromarray(pixels[0]) if pixels.shape[0] == 1 else Image.fromarray(pixels.transpose(1, 2, 0))
        mode_img.save(root / "images" / f"{frame.frame_id}.png")
        lines = "".join(f"{int(x)} {int(y)}\n" for x, y in frame.dots)
        (root / "annotations" / f"{frame.frame_id}.txt").write_text(lines)


def _parse_annotations(path: Path) -> list[tuple[int, int]]:
    dots = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError
            dots.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: expected 'x y' integer pair, got {line.strip()!r}") from None
    return dots


def load_dataset(
    root: str | Path,
    *,
    grayscale: bool = True,
    size: tuple[int, int] | None = None,
) -> list[AnnotatedFrame]:
    """Read every image and its sidecar annotation file, ordered by file name.

    ``size=(height, width)`` resizes images bilinearly and rescales the dots.
    """
    root = Path(root)
    image_dir, ann_dir = root / "images", root / "annotations"
    if not image_dir.is_dir():
        raise DatasetError(f"{image_dir} is not a directory")
    paths = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    frames = []
    for path in paths:
        ann = ann_dir / f"{path.stem}.txt"
        if not ann.is_file():
            raise DatasetError(f"missing annotation file {ann} for image {path.name}")
        dots = _parse_annotations(ann)
        with Image.open(path) as img:
            img = img.convert("L" if grayscale else "RGB")
            w0, h0 = img.size
            for x, y in dots:
                if not (0 <= x < w0 and 0 <= y < h0):
                    raise DatasetError(f"{ann}: dot ({x}, {y}) outside {w0}x{h0} image {path.name}")
            if size is not None and (h0, w0) != tuple(size):
                img = img.resize((size[1], size[0]), Image.BILINEAR)
                sx, sy = size[1] / w0, size[0] / h0
                dots = [(min(x * sx, size[1] - 1), min(y * sy, size[0] - 1)) for x, y in dots]
            pixels = np.asarray(img, dtype=np.float64) / 255.0
        pixels = pixels[None] if pixels.ndim == 2 else pixels.transpose(2, 0, 1)
        frames.append(AnnotatedFrame(pixels, dots, path.stem))
    return frames


def split(
    frames: Sequence,
    counts: tuple[int, int, int] | None = None,
    *,
    test: int | None = None,
) -> dict[str, list]:
    """Contiguous ``train``/``validation``/``test`` splits preserving order.

    With explicit ``counts`` those sizes are used. Otherwise a 1244-frame
    corpus gets the 658/165/421 split, and any other corpus reserves ``test``
    frames (default: the same test fraction) and divides the rest 4:1.
    """
    n = len(frames)
    if counts is None:
        if test is None and n == TRANCOS_FRAMES:
            counts = TRANCOS_SPLIT
        else:
            if test is None:
                test = round(n * TRANCOS_SPLIT[2] / TRANCOS_FRAMES)
            if not 0 <= test <= n:
                raise ConfigError(f"test count {test} does not fit a corpus of {n} frames")
            rest = n - test
            train = math.floor(rest * 4 / 5)
            counts = (train, rest - train, test)
    if any(c < 0 for c in counts) or sum(counts) > n:
        raise ConfigError(f"split counts {counts} overflow a corpus of {n} frames")
    a, b, c = counts
    return {
        "train": list(frames[:a]),
        "validation": list(frames[a : a + b]),
        "test": list(frames[a + b : a + b + c]),
    }


def stack_frames(frames: Sequence[AnnotatedFrame], blob_sigma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Images ``[N, C, H, W]``, ground-truth densities ``[N, H, W]`` and counts ``[N]``."""
    if not frames:
        raise DatasetError("no frames to stack")
    images = np.stack([f.image for f in frames])
    h, w = images.shape[2:]
    gt = np.stack([make_gt_density(f.dots, (h, w), blob_sigma) for f in frames])
    counts = np.array([f.count for f in frames], dtype=np.float64)
    return images, gt, counts
