"""Stacked peephole-LSTM semantic decoder with a partial residual count path.

For frame ``i`` of a sequence the predicted count is

    n_i = head(lstm(project(flatten(Z_i)))) + p * sum(Z_i)

where the LSTM state is carried across the frames of one sequence and reset
to zeros at its start.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, ShapeError
from .module import Module, fan_in_uniform
from .tensor import Tensor

GATE_WEIGHTS = ("W_xi", "W_hi", "W_ci", "W_xf", "W_hf", "W_cf", "W_xo", "W_ho", "W_co", "W_xc", "W_hc")
GATE_BIASES = ("b_i", "b_f", "b_o", "b_c")
PEEPHOLES = ("W_ci", "W_cf", "W_co")


def check_p(p: float) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"residual fraction p must lie in [0, 1], got {p}")
    return p


@dataclass
class DecoderConfig:
    layers: int = 3
    hidden: int = 100
    p: float = 0.8
    input_size: int = 100  # width of the learned projection of the flattened map
    sequence_length: int = 4
    dropout: float = 0.1  # between stacked layers, training only

    def __post_init__(self):
        self.p = check_p(self.p)
        for key in ("layers", "hidden", "input_size", "sequence_length"):
            value = getattr(self, key)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{key} must be a positive integer, got {value!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout!r}")


def set_p(config: DecoderConfig, p: float) -> DecoderConfig:
    return dataclasses.replace(config, p=check_p(p))


@dataclass
class LSTMCellParams:
    W_xi: Tensor
    W_hi: Tensor
    W_ci: Tensor
    W_xf: Tensor
    W_hf: Tensor
    W_cf: Tensor
    W_xo: Tensor
    W_ho: Tensor
    W_co: Tensor
    W_xc: Tensor
    W_hc: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_c: Tensor

    @property
    def hidden_size(self) -> int:
        return self.b_i.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_xi.shape[0]

    def validate(self) -> None:
        d, h = self.input_size, self.hidden_size
        want = {}
        for gate in "ifoc":
            want[f"W_x{gate}"] = (d, h)
            want[f"W_h{gate}"] = (h, h)
            want[f"b_{gate}"] = (h,)
        for gate in "ifo":
            want[f"W_c{gate}"] = (h,)
        for key, shape in want.items():
            if getattr(self, key).shape != shape:
                raise ShapeError(f"LSTM parameter {key} has shape {getattr(self, key).shape}, expected {shape}")


@dataclass
class LSTMState:
    c: Tensor
    h: Tensor

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "LSTMState":
        return cls(Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden))))


def lstm_cell_step(x: Tensor, state: LSTMState, params: LSTMCellParams) -> LSTMState:
    """One peephole-LSTM update for a batch of inputs ``x[B, D]``.

    Peephole weights ``W_ci``, ``W_cf``, ``W_co`` act elementwise on the cell
    vector.
    """
    if x.ndim != 2 or x.shape[1] != params.input_size:
        raise ShapeError(f"LSTM input {x.shape} does not match input size {params.input_size}")
    if state.c.shape != (x.shape[0], params.hidden_size) or state.h.shape != state.c.shape:
        raise ShapeError(f"LSTM state {state.c.shape}/{state.h.shape} does not match batch {x.shape[0]}, hidden {params.hidden_size}")
    P = params
    c_prev, h_prev = state.c, state.h
    i = T.sigmoid(
        T.add_row(T.matmul(x, P.W_xi) + T.matmul(h_prev, P.W_hi) + T.mul_row(c_prev, P.W_ci), P.b_i)
    )
    f = T.sigmoid(
        T.add_row(T.matmul(x, P.W_xf) + T.matmul(h_prev, P.W_hf) + T.mul_row(c_prev, P.W_cf), P.b_f)
    )
    g = T.tanh(T.add_row(T.matmul(x, P.W_xc) + T.matmul(h_prev, P.W_hc), P.b_c))
    c = f * c_prev + i * g
    o = T.sigmoid(
        T.add_row(T.matmul(x, P.W_xo) + T.matmul(h_prev, P.W_ho) + T.mul_row(c, P.W_co), P.b_o)
    )
    h = o * T.tanh(c)
    return LSTMState(c, h)


class SemanticDecoder(Module):
    def __init__(self, map_shape: tuple[int, int], config: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        self.map_shape = tuple(map_shape)
        self.config = config
        m = self.map_shape[0] * self.map_shape[1]
        self.pixels = m
        self.add_param("proj.weight", fan_in_uniform(rng, (m, config.input_size), m))
        self.add_param("proj.bias", np.zeros(config.input_size))
        hid = config.hidden
        bound = 1.0 / math.sqrt(hid)
        d = config.input_size
        for layer in range(config.layers):
            for name in GATE_WEIGHTS:
                if name in PEEPHOLES:
                    shape = (hid,)
                elif name.startswith("W_x"):
                    shape = (d, hid)
                else:
                    shape = (hid, hid)
                self.add_param(f"lstm{layer}.{name}", rng.uniform(-bound, bound, size=shape))
            for name in GATE_BIASES:
                self.add_param(f"lstm{layer}.{name}", np.zeros(hid))
            d = hid
        self.add_param("head.weight", fan_in_uniform(rng, (hid, 1), hid))
        self.add_param("head.bias", np.zeros(1))

    def cell_params(self, layer: int) -> LSTMCellParams:
        names = GATE_WEIGHTS + GATE_BIASES
        return LSTMCellParams(**{n: self.params[f"lstm{layer}.{n}"] for n in names})

    def head(self, h: Tensor) -> Tensor:
        out = T.fully_connected(h, self.params["head.weight"], self.params["head.bias"])
        return T.reshape(out, (h.shape[0],))

    def decode_counts(
        self,
        maps: Tensor,
        p: float | None = None,
        *,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Predict counts for ``maps[B, T, H, W]`` (``B`` parallel sequences of length ``T``).

        Returns a ``[B, T]`` tensor. ``p`` overrides the configured residual
        fraction without touching any parameter.
        """
        p = self.config.p if p is None else check_p(p)
        if maps.ndim != 4 or maps.shape[2:] != self.map_shape:
            raise ShapeError(f"decoder expects [B, T, {self.map_shape[0]}, {self.map_shape[1]}] maps, got {maps.shape}")
        b, steps = maps.shape[:2]
        cfg = self.config
        cells = [self.cell_params(layer) for layer in range(cfg.layers)]
        states = [LSTMState.zeros(b, cfg.hidden) for _ in range(cfg.layers)]
        counts = []
        for t in range(steps):
            flat = T.reshape(T.select(maps, 1, t), (b, self.pixels))
            x = T.fully_connected(flat, self.params["proj.weight"], self.params["proj.bias"])
            for layer, cell in enumerate(cells):
                states[layer] = lstm_cell_step(x, states[layer], cell)
                x = states[layer].h
                if layer < cfg.layers - 1:
                    x = T.dropout(x, cfg.dropout, training, rng)
            counts.append(self.head(x) + T.scale(T.sum_rows(flat), p))
        return T.stack(counts, axis=1)


def decode_counts(maps: Tensor, config: DecoderConfig, decoder: SemanticDecoder) -> Tensor:
    """Decode ``maps`` with the residual fraction taken from ``config``."""
    return decoder.decode_counts(maps, config.p)
