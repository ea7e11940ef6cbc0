"""CNN semantic encoder mapping image batches to same-size density maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .module import Module, fan_in_uniform
from .tensor import Tensor


@dataclass
class EncoderConfig:
    """Structure of the encoder.

    Each entry of ``block_channels`` is a 3x3 conv + ReLU followed by a 2x2
    max pool, so the feature map shrinks by ``2 ** len(block_channels)``.
    The two transposed convolutions split that factor between them and
    restore the input resolution exactly.
    """

    input_height: int = 64
    input_width: int = 64
    input_channels: int = 1
    block_channels: list[int] = field(default_factory=lambda: [32, 64])
    sandwich_channels: int | None = None  # defaults to block_channels[-1] // 4
    atrous_rate: int = 2
    reweight_channels: int = 16
    deconv_channels: list[int] = field(default_factory=lambda: [32, 16])

    def __post_init__(self):
        self.block_channels = list(self.block_channels)
        self.deconv_channels = list(self.deconv_channels)
        self.validate()

    @property
    def pools(self) -> int:
        return len(self.block_channels)

    @property
    def sandwich(self) -> int:
        return self.sandwich_channels or max(1, self.block_channels[-1] // 4)

    @property
    def deconv_strides(self) -> tuple[int, int]:
        return 2 ** math.ceil(self.pools / 2), 2 ** (self.pools // 2)

    def validate(self) -> None:
        ints = {
            "input_height": self.input_height,
            "input_width": self.input_width,
            "input_channels": self.input_channels,
            "atrous_rate": self.atrous_rate,
            "reweight_channels": self.reweight_channels,
        }
        for key, value in ints.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{key} must be a positive integer, got {value!r}")
        if not self.block_channels or any(not isinstance(c, int) or c < 1 for c in self.block_channels):
            raise ConfigError(f"block_channels must be a non-empty list of positive ints, got {self.block_channels!r}")
        if len(self.deconv_channels) != 2 or any(not isinstance(c, int) or c < 1 for c in self.deconv_channels):
            raise ConfigError(f"deconv_channels must be two positive ints, got {self.deconv_channels!r}")
        if self.sandwich_channels is not None and self.sandwich_channels < 1:
            raise ConfigError(f"sandwich_channels must be positive, got {self.sandwich_channels!r}")
        factor = 2**self.pools
        if self.input_height % factor or self.input_width % factor:
            raise ConfigError(
                f"{self.input_height}x{self.input_width} input is not divisible by the pooling factor {factor}; "
                "the deconvolutions cannot restore it exactly"
            )


def trace_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, int, int]]]:
    """Spatial shape after every stage, computed from the size formulas alone."""
    h, w, c = cfg.input_height, cfg.input_width, cfg.input_channels
    trace = [("input", (c, h, w))]
    for i, ch in enumerate(cfg.block_channels):
        h, w = (T.conv_output_size(s, 3, 1, 1, 1) for s in (h, w))
        h, w = ((s - 2) // 2 + 1 for s in (h, w))
        c = ch
        trace.append((f"block{i}", (c, h, w)))
    c = cfg.sandwich
    trace.append(("sandwich", (c, h, w)))
    r = cfg.atrous_rate
    h, w = (T.conv_output_size(s, 3, 1, r, r) for s in (h, w))
    c = cfg.block_channels[-1]
    trace.append(("atrous", (c, h, w)))
    c = cfg.reweight_channels
    trace.append(("reweight", (c, h, w)))
    for i, (ch, s) in enumerate(zip(cfg.deconv_channels, cfg.deconv_strides)):
        h, w = (T.transposed_conv_output_size(x, 3, s, 1, s - 1) for x in (h, w))
        c = ch
        trace.append((f"deconv{i}", (c, h, w)))
    trace.append(("predictor", (1, h, w)))
    return trace


class SemanticEncoder(Module):
    def __init__(
        self,
        config: EncoderConfig,
        rng: np.random.Generator,
        predictor_gain: float = 0.01,
        predictor_bias: float = 1e-3,
    ):
        super().__init__()
        config.validate()
        self.config = config
        relu_gain = math.sqrt(2.0)
        c_in = config.input_channels
        for i, c_out in enumerate(config.block_channels):
            self._conv(f"block{i}", rng, c_out, c_in, 3, relu_gain)
            c_in = c_out
        self._conv("sandwich", rng, config.sandwich, c_in, 1, relu_gain)
        self._conv("atrous", rng, config.block_channels[-1], config.sandwich, 3, relu_gain)
        self._conv("reweight", rng, config.reweight_channels, config.block_channels[-1], 1, relu_gain)
        c_in = config.reweight_channels
        for i, c_out in enumerate(config.deconv_channels):
            fan_in = c_in * 9
            self.add_param(f"deconv{i}.weight", fan_in_uniform(rng, (c_in, c_out, 3, 3), fan_in, relu_gain))
            self.add_param(f"deconv{i}.bias", np.zeros(c_out))
            c_in = c_out
        self._conv("predictor", rng, 1, c_in, 1, predictor_gain)
        # start near a plausible per-pixel density so the output rectifier stays alive
        self.params["predictor.bias"].data[:] = predictor_bias
        self._check_output_size()

    def _conv(self, name, rng, c_out, c_in, k, gain):
        self.add_param(f"{name}.weight", fan_in_uniform(rng, (c_out, c_in, k, k), c_in * k * k, gain))
        self.add_param(f"{name}.bias", np.zeros(c_out))

    def _check_output_size(self) -> None:
        _, (_, h, w) = trace_shapes(self.config)[-1]
        if (h, w) != (self.config.input_height, self.config.input_width):
            raise ConfigError(f"encoder would emit {h}x{w} maps for {self.config.input_height}x{self.config.input_width} input")

    def encode(self, images: Tensor) -> Tensor:
        """Map ``images[N, C, H, W]`` to density maps ``[N, H, W]`` (all entries >= 0)."""
        cfg = self.config
        expected = (cfg.input_channels, cfg.input_height, cfg.input_width)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise T.ShapeError(f"encoder expects [N, {expected[0]}, {expected[1]}, {expected[2]}] images, got {images.shape}")
        p = self.params
        x = images
        for i in range(cfg.pools):
            x = T.relu(T.conv2d(x, p[f"block{i}.weight"], p[f"block{i}.bias"], padding=1))
            x = T.max_pool2d(x, 2, 2)
        x = T.relu(T.conv2d(x, p["sandwich.weight"], p["sandwich.bias"]))
        r = cfg.atrous_rate
        x = T.relu(T.conv2d(x, p["atrous.weight"], p["atrous.bias"], dilation=r, padding=r))
        x = T.relu(T.conv2d(x, p["reweight.weight"], p["reweight.bias"]))
        for i, s in enumerate(cfg.deconv_strides):
            x = T.relu(T.transposed_conv2d(x, p[f"deconv{i}.weight"], p[f"deconv{i}.bias"], stride=s, padding=1, output_padding=s - 1))
        x = T.relu(T.conv2d(x, p["predictor.weight"], p["predictor.bias"]))
        n = x.shape[0]
        return T.reshape(x, (n, cfg.input_height, cfg.input_width))


def build_encoder(config: EncoderConfig, rng: np.random.Generator) -> SemanticEncoder:
    return SemanticEncoder(config, rng)


def encode(images: Tensor, encoder: SemanticEncoder) -> Tensor:
    return encoder.encode(images)


def count_from_map(density) -> float | np.ndarray:
    """Implied vehicle count: the sum over all pixels.

    A single ``[H, W]`` map gives a float; a ``[N, H, W]`` batch gives one
    count per map.
    """
    values = density.data if isinstance(density, Tensor) else np.asarray(density, dtype=float)
    if values.ndim <= 2:
        return float(values.sum())
    return values.reshape(values.shape[0], -1).sum(axis=1)
