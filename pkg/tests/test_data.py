import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from semcount.data import (
    AnnotatedFrame,
    SyntheticConfig,
    load_dataset,
    make_gt_density,
    split,
    stack_frames,
    synth_generate,
    write_dataset,
)
from semcount.encoder import count_from_map
from semcount.errors import ConfigError, DatasetError


def gaussian_mass_oracle(x, y, size, sigma):
    """Untruncated kernel evaluated pixel by pixel, normalized by its own in-image total."""
    h, w = size
    total = 0.0
    grid = np.zeros(size)
    for r in range(h):
        for c in range(w):
            grid[r, c] = math.exp(-((r - y) ** 2 + (c - x) ** 2) / (2 * sigma**2))
            total += grid[r, c]
    return grid / total


def test_no_dots_gives_zero_map():
    np.testing.assert_array_equal(make_gt_density([], (16, 16), 4.0), 0.0)


def test_centered_dot_has_unit_mass():
    d = make_gt_density([(32, 32)], (64, 64), 4.0)
    assert d.sum() == pytest.approx(1.0, abs=1e-3)
    np.testing.assert_allclose(d, gaussian_mass_oracle(32, 32, (64, 64), 4.0), rtol=1e-12, atol=1e-15)
    assert np.unravel_index(d.argmax(), d.shape) == (32, 32)


@pytest.mark.parametrize("dot", [(0, 0), (63, 0), (0, 63), (63, 63), (0, 30)])
def test_boundary_dot_keeps_unit_mass(dot):
    d = make_gt_density([dot], (64, 64), 4.0)
    assert d.sum() == pytest.approx(1.0, abs=1e-3)
    np.testing.assert_allclose(d, gaussian_mass_oracle(*dot, (64, 64), 4.0), rtol=1e-12, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(
    size=st.tuples(st.integers(1, 40), st.integers(1, 40)),
    sigma=st.floats(0.3, 10.0),
    data=st.data(),
)
def test_mass_equals_dot_count(size, sigma, data):
    h, w = size
    dots = data.draw(st.lists(st.tuples(st.integers(0, w - 1), st.integers(0, h - 1)), max_size=12))
    d = make_gt_density(dots, size, sigma)
    assert abs(d.sum() - len(dots)) <= 1e-3
    assert np.all(d >= 0)


def test_five_dot_map_counts_five():
    dots = [(3, 4), (10, 10), (0, 15), (15, 0), (8, 8)]
    assert count_from_map(make_gt_density(dots, (16, 16), 2.0)) == pytest.approx(5.0, abs=1e-3)


def test_out_of_bounds_dot_and_bad_sigma():
    with pytest.raises(DatasetError):
        make_gt_density([(16, 0)], (16, 16), 4.0)
    with pytest.raises(ConfigError):
        make_gt_density([(1, 1)], (16, 16), 0.0)
    with pytest.raises(DatasetError):
        AnnotatedFrame(np.zeros((1, 4, 4)), [(4, 0)], "f")


def test_synthetic_corpus_is_deterministic():
    a = synth_generate(SyntheticConfig(seed=7, num_frames=5))
    b = synth_generate(SyntheticConfig(seed=7, num_frames=5))
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa.image, fb.image)
        assert fa.dots == fb.dots and fa.frame_id == fb.frame_id
    c = synth_generate(SyntheticConfig(seed=8, num_frames=5))
    assert any(not np.array_equal(fa.image, fc.image) for fa, fc in zip(a, c))


def test_empty_scenes():
    frames = synth_generate(SyntheticConfig(count_range=(0, 0), num_frames=3))
    assert all(f.count == 0 for f in frames)
    assert all(np.all(f.image < 0.8) for f in frames)


def test_rectangles_sit_on_dots():
    frames = synth_generate(SyntheticConfig(count_range=(5, 5), num_frames=4, seed=2))
    for f in frames:
        assert f.count == 5
        for x, y in f.dots:
            assert f.image[0, y, x] == pytest.approx(0.8, abs=1 / 255)


def test_synthetic_config_validation():
    with pytest.raises(ConfigError):
        SyntheticConfig(count_range=(3, 2))
    with pytest.raises(ConfigError):
        SyntheticConfig(count_range=(-1, 2))


def test_write_then_load_round_trip(tmp_path):
    frames = synth_generate(SyntheticConfig(num_frames=6, seed=3, image_size=(16, 24)))
    write_dataset(frames, tmp_path)
    loaded = load_dataset(tmp_path)
    assert [f.frame_id for f in loaded] == [f.frame_id for f in frames]
    for a, b in zip(frames, loaded):
        np.testing.assert_array_equal(a.image, b.image)
        assert a.dots == b.dots


def _write_image(root, name, size=(8, 8)):
    (root / "images").mkdir(exist_ok=True)
    (root / "annotations").mkdir(exist_ok=True)
    Image.fromarray(np.zeros(size, dtype=np.uint8)).save(root / "images" / f"{name}.png")


def test_annotation_parsing(tmp_path):
    _write_image(tmp_path, "b")
    _write_image(tmp_path, "a")
    (tmp_path / "annotations" / "a.txt").write_text("")
    (tmp_path / "annotations" / "b.txt").write_text("1 2\n3 4\n\n5 6\n")
    frames = load_dataset(tmp_path)
    assert [f.frame_id for f in frames] == ["a", "b"]
    assert frames[0].count == 0
    assert frames[1].dots == [(1, 2), (3, 4), (5, 6)]


def test_missing_annotation(tmp_path):
    _write_image(tmp_path, "a")
    with pytest.raises(DatasetError, match="missing annotation"):
        load_dataset(tmp_path)


def test_malformed_line_reports_line_number(tmp_path):
    _write_image(tmp_path, "a")
    (tmp_path / "annotations" / "a.txt").write_text("1 2\n3 x\n")
    with pytest.raises(DatasetError, match=r"a\.txt:2"):
        load_dataset(tmp_path)


def test_out_of_bounds_annotation(tmp_path):
    _write_image(tmp_path, "a")
    (tmp_path / "annotations" / "a.txt").write_text("8 0\n")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_load_resizes_and_rescales_dots(tmp_path):
    _write_image(tmp_path, "a", size=(16, 32))
    (tmp_path / "annotations" / "a.txt").write_text("31 15\n10 4\n")
    (frame,) = load_dataset(tmp_path, size=(8, 8))
    assert frame.image.shape == (1, 8, 8)
    assert frame.dots == [(7, 7), (2.5, 2.0)]


def test_missing_image_dir(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_trancos_sized_split():
    parts = split(list(range(1244)))
    assert [len(parts[k]) for k in ("train", "validation", "test")] == [658, 165, 421]
    assert round(658 / 165, 2) == 3.99


def test_small_split_uses_four_to_one():
    parts = split(list(range(10)), test=2)
    assert [len(parts[k]) for k in ("train", "validation", "test")] == [6, 2, 2]


@settings(max_examples=50, deadline=None)
@given(n=st.integers(0, 300), data=st.data())
def test_split_is_ordered_partition_of_prefix(n, data):
    test = data.draw(st.one_of(st.none(), st.integers(0, n)))
    parts = split(list(range(n)), test=test)
    joined = parts["train"] + parts["validation"] + parts["test"]
    assert joined == list(range(len(joined)))


def test_split_overflow():
    with pytest.raises(ConfigError):
        split(list(range(10)), (5, 5, 1))
    with pytest.raises(ConfigError):
        split(list(range(10)), test=11)


def test_stack_frames():
    frames = synth_generate(SyntheticConfig(num_frames=3, image_size=(8, 8), vehicle_size=(2, 2), blob_sigma=1.0))
    images, gt, counts = stack_frames(frames, 1.0)
    assert images.shape == (3, 1, 8, 8) and gt.shape == (3, 8, 8)
    np.testing.assert_allclose(gt.reshape(3, -1).sum(axis=1), counts, atol=1e-9)
    with pytest.raises(DatasetError):
        stack_frames([], 1.0)
