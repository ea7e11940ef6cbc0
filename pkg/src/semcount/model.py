"""The full transmitter/channel/receiver pipeline and its parameter bundle."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .channel import ChannelCodec, ChannelConfig, transmit
from .data import AnnotatedFrame, stack_frames
from .decoder import DecoderConfig, SemanticDecoder, set_p
from .encoder import EncoderConfig, SemanticEncoder
from .errors import ConfigError
from .optim import AdamState
from .tensor import Tensor


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    dropout: float = 0.1
    epochs: int = 100
    batch_size: int = 8
    lam: float = 0.001
    p: float = 0.8
    loss_threshold: float = float("inf")  # inf disables the threshold stop
    seed: int = 0
    per_epoch_updates: bool = False
    blob_sigma: float = 4.0

    def __post_init__(self):
        checks = {
            "learning_rate": self.learning_rate > 0,
            "epochs": isinstance(self.epochs, int) and self.epochs >= 1,
            "batch_size": isinstance(self.batch_size, int) and self.batch_size >= 1,
            "lambda": self.lam >= 0,
            "dropout": 0 <= self.dropout < 1,
            "p": 0 <= self.p <= 1,
            "blob_sigma": self.blob_sigma > 0,
            "loss_threshold": self.loss_threshold > 0,
        }
        for key, ok in checks.items():
            if not ok:
                value = getattr(self, "lam" if key == "lambda" else key)
                raise ConfigError(f"invalid value for {key}: {value!r}")


@dataclass
class FrameSet:
    """A split as dense arrays: images, ground-truth densities and integer counts."""

    images: np.ndarray  # [N, C, H, W]
    densities: np.ndarray  # [N, H, W]
    counts: np.ndarray  # [N]
    frame_ids: list[str]

    @classmethod
    def from_frames(cls, frames: list[AnnotatedFrame], blob_sigma: float) -> "FrameSet":
        images, gt, counts = stack_frames(frames, blob_sigma)
        return cls(images, gt, counts, [f.frame_id for f in frames])

    def __len__(self) -> int:
        return len(self.counts)

    def batches(self, size: int):
        for start in range(0, len(self), size):
            yield slice(start, min(start + size, len(self)))


@dataclass
class Forward:
    density: Tensor  # D, encoder output
    symbols: Tensor  # X
    received: Tensor  # Y
    maps: Tensor  # Z, channel-decoder output
    counts: Tensor  # predicted counts, one per frame


class ModelBundle:
    """Encoder, channel codec and decoder plus everything needed to resume training."""

    def __init__(
        self,
        encoder_cfg: EncoderConfig,
        channel_cfg: ChannelConfig,
        decoder_cfg: DecoderConfig,
        train_cfg: TrainConfig,
    ):
        decoder_cfg = dataclasses.replace(decoder_cfg, p=train_cfg.p, dropout=train_cfg.dropout)
        self.encoder_cfg = encoder_cfg
        self.channel_cfg = channel_cfg
        self.decoder_cfg = decoder_cfg
        self.train_cfg = train_cfg
        init_rng = np.random.default_rng(train_cfg.seed)
        map_shape = (encoder_cfg.input_height, encoder_cfg.input_width)
        self.encoder = SemanticEncoder(encoder_cfg, init_rng)
        self.codec = ChannelCodec.from_config(map_shape, channel_cfg, init_rng)
        self.decoder = SemanticDecoder(map_shape, decoder_cfg, init_rng)
        # noise and dropout draws during training
        self.rng = np.random.default_rng([train_cfg.seed, 1])
        self.adam = AdamState.for_params(self.parameters())
        self.epoch = 0

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for prefix, module in (("encoder", self.encoder), ("codec", self.codec), ("decoder", self.decoder)):
            out.extend((f"{prefix}.{name}", t) for name, t in module.named_parameters())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def set_p(self, p: float) -> None:
        self.decoder_cfg = set_p(self.decoder_cfg, p)
        self.decoder.config = self.decoder_cfg
        self.train_cfg = dataclasses.replace(self.train_cfg, p=self.decoder_cfg.p)

    def forward(
        self,
        images: np.ndarray | Tensor,
        *,
        training: bool = False,
        rng: np.random.Generator | None = None,
        noise: np.ndarray | None = None,
        channel: ChannelConfig | None = None,
        p: float | None = None,
    ) -> Forward:
        """Run the whole pipeline on one batch of frames in sequence order.

        The batch is cut into consecutive sequences of ``sequence_length``
        frames (the last one may be shorter), each decoded from a zero state.
        """
        x = images if isinstance(images, Tensor) else Tensor(images)
        channel = channel or self.channel_cfg
        density = self.encoder.encode(x)
        symbols = self.codec.encode(density)
        received = transmit(symbols, channel, rng, noise=noise)
        maps = self.codec.decode(received)
        counts = decode_in_sequences(self.decoder, maps, self.decoder_cfg.sequence_length, p=p, training=training, rng=rng)
        return Forward(density, symbols, received, maps, counts)


def decode_in_sequences(
    decoder: SemanticDecoder,
    maps: Tensor,
    length: int,
    *,
    p: float | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Decode ``maps[N, H, W]`` as consecutive sequences of ``length`` frames; returns ``[N]`` counts."""
    n = maps.shape[0]
    hw = maps.shape[1:]
    full = n // length
    parts = []
    if full:
        block = T.reshape(T.take_rows(maps, 0, full * length), (full, length) + hw)
        parts.append(T.reshape(decoder.decode_counts(block, p, training=training, rng=rng), (full * length,)))
    if n % length:
        rest = T.reshape(T.take_rows(maps, full * length, n), (1, n % length) + hw)
        parts.append(T.reshape(decoder.decode_counts(rest, p, training=training, rng=rng), (n % length,)))
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
