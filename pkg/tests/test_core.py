import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from priorstain.core import (
    NORM_RANGE, RAW_RANGE, ImagePatch, MifStack, check_aligned, concat_channels, denormalize,
    normalize, read_label_png, read_png, read_stack, resize, resize_array, resize_to_256,
    write_label_png, write_png, write_stack,
)
from priorstain.errors import ParameterError, RangeViolationError, ShapeMismatchError
from priorstain.prior import BinaryMask, SoftPrior


def test_patch_range_is_enforced(rng):
    ImagePatch(rng.random((8, 8, 3)))
    with pytest.raises(RangeViolationError):
        ImagePatch(rng.random((8, 8, 3)) + 1.5)
    with pytest.raises(RangeViolationError):
        ImagePatch(np.full((8, 8, 3), np.nan))


def test_normalize_roundtrip(rng):
    p = ImagePatch(rng.random((16, 16, 3)))
    n = normalize(p)
    assert n.value_range == NORM_RANGE
    assert n.data.min() >= -1 and n.data.max() <= 1
    back = denormalize(n)
    assert back.value_range == RAW_RANGE
    np.testing.assert_allclose(back.data, p.data, atol=1e-6)
    with pytest.raises(RangeViolationError):
        normalize(n)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normalize_is_affine(seed):
    x = np.random.default_rng(seed).random((4, 4, 3)).astype(np.float32)
    np.testing.assert_allclose(normalize(ImagePatch(x)).data, 2 * x - 1, atol=1e-6)


def test_mif_stack_channels(rng):
    m = MifStack(rng.random((8, 8, 3)), ("DAPI", "Lap2", "Ki67"), 0)
    np.testing.assert_array_equal(m.channel("Ki67"), m.data[:, :, 2])
    np.testing.assert_array_equal(m.nuclear, m.data[:, :, 0])
    with pytest.raises(Exception):
        MifStack(rng.random((8, 8, 3)), ("a", "b"), 0)


def test_check_aligned(rng):
    a = ImagePatch(rng.random((8, 8, 3)))
    check_aligned(a, MifStack(rng.random((8, 8, 1)), ("DAPI",), 0))
    with pytest.raises(ShapeMismatchError):
        check_aligned(a, MifStack(rng.random((8, 9, 1)), ("DAPI",), 0))


def test_resize_shapes_and_bounds(rng):
    x = rng.random((40, 50, 3))
    y = resize_array(x, 64)
    assert y.shape == (64, 64, 3)
    assert y.min() >= x.min() - 1e-6 and y.max() <= x.max() + 1e-6
    p = resize_to_256(ImagePatch(x))
    assert p.shape == (256, 256, 3)
    assert resize(ImagePatch(x), 32).shape == (32, 32, 3)


def test_resize_constant_image_is_constant():
    y = resize_array(np.full((20, 20), 0.3), 37)
    np.testing.assert_allclose(y, 0.3, atol=1e-6)


def test_resize_rejects_degenerate():
    with pytest.raises(ParameterError):
        resize_array(np.zeros((4, 20)), 32)


def test_concat_channels_scales_prior(rng):
    x = normalize(ImagePatch(rng.random((8, 8, 3))))
    prob = rng.random((8, 8))
    out = concat_channels(x, SoftPrior(prob))
    assert out.channels == 4
    np.testing.assert_allclose(out.data[:, :, 3], 2 * prob - 1, atol=1e-6)
    mask = BinaryMask((prob > 0.5).astype(np.uint8), 0.5)
    np.testing.assert_allclose(concat_channels(x, mask).data[:, :, 3], np.where(prob > 0.5, 1.0, -1.0))
    with pytest.raises(ShapeMismatchError):
        concat_channels(x, SoftPrior(rng.random((7, 8))))
    with pytest.raises(ShapeMismatchError):
        concat_channels(out, SoftPrior(prob))


def test_png_roundtrip(tmp_path, rng):
    x = rng.random((10, 12, 3))
    write_png(tmp_path / "a.png", x)
    np.testing.assert_allclose(read_png(tmp_path / "a.png"), x, atol=0.5 / 255 + 1e-6)
    g = rng.random((10, 12))
    write_png(tmp_path / "g.png", g, bits=16)
    np.testing.assert_allclose(read_png(tmp_path / "g.png"), g, atol=0.5 / 65535 + 1e-6)
    with pytest.raises(ParameterError):
        write_png(tmp_path / "bad.png", x, bits=16)


def test_label_and_stack_roundtrip(tmp_path, rng):
    labels = rng.integers(0, 300, (9, 9))
    write_label_png(tmp_path / "l.png", labels)
    np.testing.assert_array_equal(read_label_png(tmp_path / "l.png"), labels)
    data = rng.random((6, 6, 5)).astype(np.float32)
    write_stack(tmp_path / "s.npz", data, list("abcde"))
    back, names = read_stack(tmp_path / "s.npz")
    np.testing.assert_array_equal(back, data)
    assert names == tuple("abcde")
