"""Shared oracles and micro-model builders for the test suite."""

from __future__ import annotations

import math

import numpy as np

from semcount import tensor as T
from semcount.channel import ChannelConfig
from semcount.data import SyntheticConfig, synth_generate
from semcount.decoder import DecoderConfig
from semcount.encoder import EncoderConfig
from semcount.model import FrameSet, ModelBundle, TrainConfig
from semcount.training import batch_losses

# Gradient agreement: |analytic - numeric| <= RTOL * max(|analytic|, |numeric|) + ATOL.
# ATOL sits well above the float64 cancellation noise of a 1e-6 central
# difference and well below any gradient that matters.
RTOL = 1e-4
ATOL = 1e-8
EPS = 1e-6


def numeric_grad(f, arrays, eps=EPS):
    """Central differences of scalar ``f()`` with respect to each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f()
            flat[i] = orig - eps
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def grad_mismatch(analytic, numeric, rtol=RTOL, atol=ATOL):
    """Largest violation ratio ``|a - n| / (rtol * max(|a|, |n|) + atol)``; <= 1 passes."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / (rtol * np.maximum(np.abs(a), np.abs(n)) + atol)))


def check_op_grads(build, inputs, rtol=RTOL, atol=ATOL):
    """Gradient-check ``sum(build(*tensors) * w)`` for a fixed random weighting ``w``.

    ``inputs`` are numpy arrays; each becomes a requires-grad tensor whose
    ``data`` is perturbed in place by the numeric pass. Returns the worst
    violation ratio across all inputs.
    """
    tensors = [T.Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = build(*tensors)
    w = np.random.default_rng(123).standard_normal(out.shape)

    def loss():
        with T.no_grad():
            return float(np.sum(build(*tensors).data * w))

    T.sum_all(T.mul(out, T.Tensor(w))).backward()
    analytic = [t.grad.copy() for t in tensors]
    numeric = numeric_grad(loss, [t.data for t in tensors])
    return max(grad_mismatch(a, n, rtol, atol) for a, n in zip(analytic, numeric))


def micro_configs(snr_db: float = 10.0, seed: int = 0, **train):
    """8x8 pipeline small enough to finite-difference every parameter."""
    enc = EncoderConfig(
        input_height=8,
        input_width=8,
        block_channels=[4, 8],
        atrous_rate=2,
        reweight_channels=4,
        deconv_channels=[4, 4],
    )
    chan = ChannelConfig(snr_db=snr_db, k=16, hidden=16)
    dec = DecoderConfig(layers=3, hidden=4, input_size=4, sequence_length=2)
    opts = dict(seed=seed, batch_size=4, blob_sigma=1.0)
    opts.update(train)
    return enc, chan, dec, TrainConfig(**opts)


def micro_bundle(snr_db: float = 10.0, seed: int = 0, **train) -> ModelBundle:
    return ModelBundle(*micro_configs(snr_db, seed, **train))


def micro_frames(n: int = 4, seed: int = 0) -> FrameSet:
    cfg = SyntheticConfig(count_range=(0, 3), image_size=(8, 8), vehicle_size=(2, 2), num_frames=n, seed=seed, blob_sigma=1.0)
    return FrameSet.from_frames(synth_generate(cfg), 1.0)


def pipeline_loss(bundle: ModelBundle, data: FrameSet, noise) -> float:
    """``L_count`` on the whole set as one batch, dropout off, noise frozen."""
    with T.no_grad():
        return batch_losses(bundle, data, slice(0, len(data)), training=False, rng=None, noise=noise).total.item()


def frozen_noise(bundle: ModelBundle, n: int, seed: int = 5):
    var = bundle.channel_cfg.noise_variance
    if var == 0:
        return None
    return np.random.default_rng(seed).normal(0.0, math.sqrt(var), size=(n, bundle.codec.k))


def pipeline_gradcheck(bundle: ModelBundle, data: FrameSet, noise) -> dict[str, float]:
    """Violation ratio per named parameter for ``L_count`` through the whole pipeline."""
    bundle.zero_grad()
    batch_losses(bundle, data, slice(0, len(data)), training=False, rng=None, noise=noise).total.backward()
    out = {}
    for name, p in bundle.named_parameters():
        analytic = p.grad.copy()
        (numeric,) = numeric_grad(lambda: pipeline_loss(bundle, data, noise), [p.data])
        out[name] = grad_mismatch(analytic, numeric)
    return out
