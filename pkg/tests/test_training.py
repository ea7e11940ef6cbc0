import math
import struct
import zlib

import numpy as np
import pytest

from semcount import tensor as T
from semcount.errors import ConfigError, CorruptionError, DivergenceError, ShapeError
from semcount.model import TrainConfig
from semcount.optim import adam_step
from semcount.tensor import Tensor
from semcount.training import (
    MAGIC,
    batch_losses,
    checkpoint_bytes,
    checkpoint_load,
    checkpoint_save,
    decoder_loss,
    encoder_loss,
    fit,
    total_loss,
    write_history_csv,
)

from helpers import frozen_noise, micro_bundle, micro_frames, pipeline_loss


# --- losses ---------------------------------------------------------------------


def naive_encoder_loss(d, d0):
    n = d.shape[0]
    total = 0.0
    for i in range(n):
        delta = 0.0
        for v, w in zip(d[i].ravel(), d0[i].ravel()):
            delta += (v - w) ** 2
        total += delta
    return total / n


def test_encoder_loss_examples():
    d = np.random.default_rng(0).random((2, 3, 3))
    assert encoder_loss(Tensor(d), d).item() == 0.0
    target = np.zeros((1, 2, 2))
    target[0, 1, 0] = 2.0
    assert encoder_loss(Tensor(np.zeros((1, 2, 2))), target).item() == 4.0


def test_encoder_loss_matches_double_loop():
    rng = np.random.default_rng(1)
    for _ in range(20):
        d, d0 = rng.random((4, 5, 6)), rng.random((4, 5, 6))
        assert encoder_loss(Tensor(d), d0).item() == pytest.approx(naive_encoder_loss(d, d0), rel=1e-13)


def test_decoder_loss_examples():
    assert decoder_loss(Tensor([3.0, 5.0]), [3.0, 5.0]).item() == 0.0
    assert decoder_loss(Tensor([3.0, 5.0]), [1.0, 5.0]).item() == 2.0
    rng = np.random.default_rng(2)
    pred, gt = rng.random(7), rng.random(7)
    base = decoder_loss(Tensor(pred), gt).item()
    scaled = decoder_loss(Tensor(gt + 3.0 * (pred - gt)), gt).item()
    assert scaled == pytest.approx(9.0 * base, rel=1e-12)


def test_loss_shape_errors():
    with pytest.raises(ShapeError):
        encoder_loss(Tensor(np.zeros((1, 2, 2))), np.zeros((1, 2, 3)))
    with pytest.raises(ShapeError):
        decoder_loss(Tensor([1.0, 2.0]), [1.0])


def test_total_loss():
    assert total_loss(2.0, 1000.0, 0.001) == 3.0
    assert total_loss(2.0, 1000.0, 0.0) == 2.0
    assert TrainConfig().lam == 0.001
    t = total_loss(Tensor(2.0), Tensor(1000.0), 0.001)
    assert t.item() == 3.0


def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.dropout, cfg.epochs, cfg.batch_size, cfg.lam, cfg.p) == (0.001, 0.1, 100, 8, 0.001, 0.8)
    assert math.isinf(cfg.loss_threshold)
    with pytest.raises(ConfigError, match="epochs"):
        TrainConfig(epochs=-1)
    with pytest.raises(ConfigError, match="lambda"):
        TrainConfig(lam=-0.5)


# --- fit ---------------------------------------------------------------------------


def splits(n_train=4, n_val=2):
    return {"train": micro_frames(n_train, seed=0), "validation": micro_frames(n_val, seed=1)}


def test_infinite_threshold_runs_exactly_k_epochs():
    bundle, history = fit(splits(), micro_bundle(epochs=3))
    assert bundle.epoch == 3
    assert [(r.epoch, r.split) for r in history] == [(e, s) for e in (1, 2, 3) for s in ("train", "validation")]


def test_finite_threshold_stops_early():
    bundle, history = fit(splits(), micro_bundle(epochs=50, loss_threshold=1e6))
    assert bundle.epoch == 1


def test_loss_composition_identity():
    _, history = fit(splits(), micro_bundle(epochs=3))
    for r in history:
        assert r.total == r.enc_loss + 0.001 * r.dec_loss


def test_same_seed_gives_identical_histories():
    _, a = fit(splits(), micro_bundle(epochs=3, seed=4))
    _, b = fit(splits(), micro_bundle(epochs=3, seed=4))
    assert a == b
    _, c = fit(splits(), micro_bundle(epochs=3, seed=5))
    assert a != c


def test_per_epoch_mode_steps_once_per_epoch():
    bundle, _ = fit(splits(n_train=8), micro_bundle(epochs=2, per_epoch_updates=True, batch_size=4))
    assert bundle.adam.step_count == 2
    bundle, _ = fit(splits(n_train=8), micro_bundle(epochs=2, batch_size=4))
    assert bundle.adam.step_count == 4


def test_divergence_is_reported():
    bundle = micro_bundle(epochs=2)
    bundle.encoder.params["predictor.bias"].data[:] = np.nan
    with pytest.raises(DivergenceError):
        fit(splits(), bundle)


def test_empty_training_split():
    data = micro_frames(4)
    empty = type(data)(data.images[:0], data.densities[:0], data.counts[:0], [])
    with pytest.raises(ValueError):
        fit({"train": empty}, micro_bundle())


def test_checkpoints_written(tmp_path):
    fit(splits(), micro_bundle(epochs=2), checkpoint_dir=tmp_path)
    assert (tmp_path / "best.semc").is_file() and (tmp_path / "final.semc").is_file()
    assert not list(tmp_path.glob("*.tmp"))


def test_history_csv(tmp_path):
    _, history = fit(splits(), micro_bundle(epochs=2))
    write_history_csv(history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,enc_loss,dec_loss,total"
    assert len(lines) == 1 + len(history)
    assert float(lines[1].split(",")[4]) == history[0].total


def test_single_batch_descent():
    violations = 0
    data = micro_frames(4, seed=3)
    for trial in range(100):
        bundle = micro_bundle(seed=trial)
        noise = frozen_noise(bundle, 4, seed=trial)
        before = pipeline_loss(bundle, data, noise)
        bundle.zero_grad()
        batch_losses(bundle, data, slice(0, 4), training=False, rng=None, noise=noise).total.backward()
        params = bundle.parameters()
        adam_step(params, [p.grad for p in params], bundle.adam, 1e-4)
        violations += pipeline_loss(bundle, data, noise) > before
    assert violations <= 2


def test_training_and_validation_loss_fall_together():
    data = splits(n_train=8, n_val=4)
    _, history = fit(data, micro_bundle(epochs=20, learning_rate=3e-3))
    train = [r.total for r in history if r.split == "train"]
    val = [r.total for r in history if r.split == "validation"]
    assert train[-1] < train[0] and val[-1] < val[0]
    # validation should track training: never better by more than half the training loss
    assert all(v >= 0.5 * t for v, t in zip(val, train))


# --- checkpoints ----------------------------------------------------------------


def test_round_trip_is_byte_identical(tmp_path):
    bundle, _ = fit(splits(), micro_bundle(epochs=2))
    checkpoint_save(bundle, tmp_path / "a.semc")
    loaded = checkpoint_load(tmp_path / "a.semc")
    checkpoint_save(loaded, tmp_path / "b.semc")
    assert (tmp_path / "a.semc").read_bytes() == (tmp_path / "b.semc").read_bytes()
    for (n1, p1), (n2, p2) in zip(bundle.named_parameters(), loaded.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    assert loaded.adam.step_count == bundle.adam.step_count and loaded.epoch == 2


def test_header_layout(tmp_path):
    blob = checkpoint_bytes(micro_bundle())
    assert blob[:4] == MAGIC == b"SEMC"
    assert struct.unpack("<I", blob[4:8])[0] == 1
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


def _write(tmp_path, data: bytes):
    path = tmp_path / "x.semc"
    path.write_bytes(data)
    return path


def _recrc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def test_truncated_file(tmp_path):
    blob = checkpoint_bytes(micro_bundle())
    for cut in (10, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CorruptionError):
            checkpoint_load(_write(tmp_path, blob[:cut]))


def test_bad_magic_version_and_flipped_byte(tmp_path):
    blob = checkpoint_bytes(micro_bundle())
    with pytest.raises(CorruptionError, match="magic"):
        checkpoint_load(_write(tmp_path, b"XXXX" + blob[4:]))
    body = blob[:-4]
    with pytest.raises(CorruptionError, match="version"):
        checkpoint_load(_write(tmp_path, _recrc(body[:4] + struct.pack("<I", 2) + body[8:])))
    flipped = bytearray(blob)
    flipped[-20] ^= 0xFF
    with pytest.raises(CorruptionError, match="checksum"):
        checkpoint_load(_write(tmp_path, bytes(flipped)))


def test_manifest_mismatch(tmp_path):
    # a valid file whose configuration no longer matches its parameter table
    blob = checkpoint_bytes(micro_bundle())
    body = blob[:-4]
    (meta_len,) = struct.unpack("<I", body[8:12])
    meta = body[12 : 12 + meta_len].replace(b'"hidden": 4', b'"hidden": 5')
    assert len(meta) == meta_len
    with pytest.raises(CorruptionError):
        checkpoint_load(_write(tmp_path, _recrc(body[:12] + meta + body[12 + meta_len :])))


def test_resume_matches_uninterrupted_run(tmp_path):
    data = splits()
    _, full = fit(data, micro_bundle(epochs=4, seed=2))
    first, part1 = fit(data, micro_bundle(epochs=2, seed=2))
    checkpoint_save(first, tmp_path / "mid.semc")
    resumed = checkpoint_load(tmp_path / "mid.semc")
    resumed.train_cfg = TrainConfig(**{**vars(resumed.train_cfg), "epochs": 4})
    _, part2 = fit(data, resumed)
    assert part1 + part2 == full


def test_encoder_overfits_three_blob_frame():
    from semcount.data import SyntheticConfig, synth_generate
    from semcount.encoder import EncoderConfig, SemanticEncoder
    from semcount.model import FrameSet
    from semcount.optim import Adam

    frames = synth_generate(SyntheticConfig(count_range=(3, 3), num_frames=1, image_size=(16, 16), vehicle_size=(3, 3), blob_sigma=1.5, seed=4))
    data = FrameSet.from_frames(frames, 1.5)
    enc = SemanticEncoder(EncoderConfig(16, 16, 1, [8, 16], None, 2, 8, [8, 8]), np.random.default_rng(0))
    opt = Adam(enc.parameters(), lr=1e-3)
    x = Tensor(data.images)
    for _ in range(150):
        opt.zero_grad()
        encoder_loss(enc.encode(x), data.densities).backward()
        opt.step()
    with T.no_grad():
        total = float(enc.encode(x).data.sum())
    assert 2.5 <= total <= 3.5
