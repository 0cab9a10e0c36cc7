import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from priorstain.core import ImagePatch, write_png
from priorstain.errors import BackendError, ParameterError, RangeViolationError, ShapeMismatchError
from priorstain.prior import (
    BlobBackend, FileBackend, IntensityBackend, SegmentationBackend, SoftPrior, binarize,
    generate_soft_prior, synthetic_blob_backend,
)


def test_soft_prior_validation(rng):
    SoftPrior(rng.random((4, 4)))
    with pytest.raises(RangeViolationError):
        SoftPrior(np.full((4, 4), 1.2))
    with pytest.raises(ShapeMismatchError):
        SoftPrior(rng.random((4, 4, 1)))


def test_blob_oracle_values():
    b = synthetic_blob_backend([(10, 10, 4)])
    p = b.render((21, 21))
    assert p[10, 10] == pytest.approx(1.0)
    # half the radius away the value is exp(-1/2)
    assert p[10, 12] == pytest.approx(np.exp(-0.5), rel=1e-6)
    assert p.min() >= 0 and p.max() <= 1
    with pytest.raises(ParameterError):
        BlobBackend([(30, 1, 2)]).render((21, 21))
    with pytest.raises(ParameterError):
        BlobBackend([(3, 3, 0)])


def test_generate_soft_prior_is_single_pass_and_deterministic(rng):
    calls = []

    class Counting(SegmentationBackend):
        name = "counting"

        def predict(self, image, patch_id=None):
            calls.append(patch_id)
            return np.full(image.shape[:2], 0.25)

    x = ImagePatch(rng.random((8, 8, 3)))
    p = generate_soft_prior(x, Counting(), "c/p")
    assert calls == ["c/p"]
    assert p.prob.shape == (8, 8)
    ib = IntensityBackend()
    np.testing.assert_array_equal(generate_soft_prior(x, ib).prob, generate_soft_prior(x, ib).prob)


def test_backend_failures_name_the_patch(rng):
    class Broken(SegmentationBackend):
        def predict(self, image, patch_id=None):
            raise RuntimeError("boom")

    class WrongShape(SegmentationBackend):
        def predict(self, image, patch_id=None):
            return np.zeros((3, 3))

    x = ImagePatch(rng.random((8, 8, 3)))
    with pytest.raises(BackendError, match="c1/p7"):
        generate_soft_prior(x, Broken(), "c1/p7")
    with pytest.raises(BackendError, match="shape"):
        generate_soft_prior(x, WrongShape(), "c1/p7")
    with pytest.raises(ShapeMismatchError):
        generate_soft_prior(ImagePatch(rng.random((8, 8, 1))), IntensityBackend())


def test_file_backend(tmp_path, rng):
    prob = rng.random((16, 16))
    write_png(tmp_path / "priors" / "caseA" / "p0.png", prob, bits=16)
    fb = FileBackend(tmp_path)
    x = ImagePatch(rng.random((16, 16, 3)))
    np.testing.assert_allclose(generate_soft_prior(x, fb, "caseA/p0").prob, prob, atol=1e-4)
    big = ImagePatch(rng.random((32, 32, 3)))
    assert generate_soft_prior(big, fb, "caseA/p0").shape == (32, 32)
    with pytest.raises(BackendError):
        generate_soft_prior(x, fb, "caseA/missing")


def test_intensity_backend_dark_nuclei_score_high():
    img = np.ones((20, 20, 3))
    img[8:12, 8:12] = 0.1
    p = IntensityBackend().predict(img)
    assert p[10, 10] > 0.9 and p[0, 0] < 0.1


def test_binarize_strict_threshold():
    p = np.array([[0.5, 0.50001], [0.0, 1.0]])
    np.testing.assert_array_equal(binarize(p, 0.5).mask, [[0, 1], [0, 1]])
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ParameterError):
            binarize(p, bad)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.99))
def test_binarize_monotone_in_threshold(seed, t):
    p = np.random.default_rng(seed).random((6, 6))
    lo = binarize(p, t).mask
    hi = binarize(p, min(t + 0.005, 0.995)).mask
    assert np.all(hi <= lo)
    assert set(np.unique(lo)) <= {0, 1}
