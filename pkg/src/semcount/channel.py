"""Learned channel codec around a differentiable AWGN channel ``Y = H X + noise``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .module import Module, fan_in_uniform
from .tensor import Tensor

NOISELESS = math.inf


@dataclass
class ChannelConfig:
    """AWGN channel settings. ``snr_db = inf`` disables the noise entirely."""

    snr_db: float = 20.0
    gain_h: float = 1.0
    seed: int = 0
    k: int | None = None  # symbols per frame; None means M // 4
    hidden: int = 128  # width of the codec's inner affine stage

    def __post_init__(self):
        if self.k is not None and (not isinstance(self.k, int) or self.k <= 0):
            raise ConfigError(f"k (symbols per frame) must be a positive integer, got {self.k!r}")
        if not isinstance(self.hidden, int) or self.hidden <= 0:
            raise ConfigError(f"hidden must be a positive integer, got {self.hidden!r}")
        if math.isnan(self.snr_db):
            raise ConfigError("snr_db is NaN")

    @property
    def noise_variance(self) -> float:
        # unit signal power after normalization
        if math.isinf(self.snr_db) and self.snr_db > 0:
            return 0.0
        return 10.0 ** (-self.snr_db / 10.0)

    def symbols_for(self, map_pixels: int) -> int:
        return self.k if self.k is not None else max(1, map_pixels // 4)


def power_normalize(x: Tensor) -> Tensor:
    """Scale a symbol batch so that the mean squared symbol is exactly 1.

    An all-zero batch has no defined scale and is returned unchanged.
    """
    mean_sq = T.scale(T.sum_all(T.mul(x, x)), 1.0 / x.size)
    if mean_sq.data == 0.0:
        return x
    return T.scale_by(x, T.power(mean_sq, -0.5))


class ChannelCodec(Module):
    """Channel encoder and decoder between flattened ``H x W`` maps and ``k`` symbols.

    Each side is ``affine -> tanh -> affine``; the encoder output is
    power-normalized before transmission and the decoder output carries a
    fixed ``1/M`` gain.
    """

    def __init__(self, map_shape: tuple[int, int], k: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        if k <= 0:
            raise ConfigError(f"k (symbols per frame) must be positive, got {k}")
        self.map_shape = tuple(map_shape)
        self.k = k
        self.hidden = hidden
        m = self.map_shape[0] * self.map_shape[1]
        self.pixels = m
        for name, d_in, d_out in (
            ("enc1", m, hidden),
            ("enc2", hidden, k),
            ("dec1", k, hidden),
            ("dec2", hidden, m),
        ):
            self.add_param(f"{name}.weight", fan_in_uniform(rng, (d_in, d_out), d_in))
            self.add_param(f"{name}.bias", np.zeros(d_out))
        # Fixed 1/M gain on the output stage: Adam moves every one of the M
        # output weights by ~lr per step, and without it sum(Z) would jump by ~M*lr.
        self.output_scale = 1.0 / m

    @classmethod
    def from_config(cls, map_shape: tuple[int, int], cfg: ChannelConfig, rng: np.random.Generator) -> "ChannelCodec":
        return cls(map_shape, cfg.symbols_for(map_shape[0] * map_shape[1]), cfg.hidden, rng)

    def _stage(self, x: Tensor, name: str) -> Tensor:
        return T.fully_connected(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def encode(self, density: Tensor) -> Tensor:
        """``[N, H, W]`` density maps to power-normalized ``[N, k]`` symbols."""
        if density.ndim != 3 or density.shape[1:] != self.map_shape:
            raise ShapeError(f"channel encoder expects [N, {self.map_shape[0]}, {self.map_shape[1]}], got {density.shape}")
        x = T.reshape(density, (density.shape[0], self.pixels))
        x = self._stage(T.tanh(self._stage(x, "enc1")), "enc2")
        return power_normalize(x)

    def decode(self, received: Tensor) -> Tensor:
        """``[N, k]`` received symbols to ``[N, H, W]`` maps."""
        if received.ndim != 2 or received.shape[1] != self.k:
            raise ShapeError(f"channel decoder expects [N, {self.k}] symbols, got {received.shape}")
        z = T.scale(self._stage(T.tanh(self._stage(received, "dec1")), "dec2"), self.output_scale)
        return T.reshape(z, (received.shape[0],) + self.map_shape)


def sample_noise(shape: tuple[int, ...], cfg: ChannelConfig, rng: np.random.Generator) -> np.ndarray | None:
    var = cfg.noise_variance
    if var == 0.0:
        return None
    return rng.normal(0.0, math.sqrt(var), size=shape)


def transmit(
    symbols: Tensor,
    cfg: ChannelConfig,
    rng: np.random.Generator | None = None,
    *,
    noise: np.ndarray | None = None,
) -> Tensor:
    """Pass symbols through ``Y = gain_h * X + noise``.

    Noise is i.i.d. Gaussian with variance ``10 ** (-snr_db / 10)``. Pass
    ``noise`` explicitly to freeze a draw; otherwise it is sampled from
    ``rng``. Gradients flow to ``symbols`` only.
    """
    y = T.scale(symbols, cfg.gain_h)
    if noise is None and cfg.noise_variance > 0.0:
        if rng is None:
            raise ConfigError("a noisy channel needs an rng or an explicit noise draw")
        noise = sample_noise(symbols.shape, cfg, rng)
    if noise is None:
        return y
    noise = np.asarray(noise, dtype=T.DTYPE)
    if noise.shape != symbols.shape:
        raise ShapeError(f"noise shape {noise.shape} != symbol shape {symbols.shape}")
    return T.add(y, Tensor(noise))


def channel_encode(density: Tensor, codec: ChannelCodec) -> Tensor:
    return codec.encode(density)


def channel_decode(received: Tensor, codec: ChannelCodec) -> Tensor:
    return codec.decode(received)


def measured_snr_db(clean: np.ndarray, received: np.ndarray, gain_h: float = 1.0) -> float:
    """Empirical SNR of a received block given the clean symbols."""
    signal = np.mean((gain_h * clean) ** 2)
    noise = np.mean((received - gain_h * clean) ** 2)
    return 10.0 * math.log10(signal / noise)
