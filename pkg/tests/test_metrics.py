import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from texvq.metrics import gradient_energy, pearson, per_image, psnr, ssim, upsample_bicubic


def test_psnr_known_values():
    a = np.zeros((3, 8, 8))
    assert psnr(a, a) == float("inf")
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-12
    with pytest.raises(ValueError, match="shape"):
        psnr(a, np.zeros((3, 8, 7)))


def test_ssim_identity_and_sign():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(3, 16, 16))
    assert abs(ssim(x, x) - 1.0) < 1e-12
    assert ssim(x, 1.0 - x) < 0.0
    with pytest.raises(ValueError):
        ssim(np.zeros((1, 5, 5)), np.zeros((1, 5, 5)))


@settings(max_examples=25, deadline=None)
@given(
    x=arrays(np.float64, (3, 12, 14), elements=st.floats(0, 1)),
    noise=arrays(np.float64, (3, 12, 14), elements=st.floats(-0.3, 0.3)),
)
def test_ssim_matches_skimage(x, noise):
    y = np.clip(x + noise, 0, 1)
    ref = structural_similarity(x, y, data_range=1.0, channel_axis=0, win_size=7)
    assert abs(ssim(x, y) - ref) <= 1e-6


def test_gradient_energy_and_pearson():
    flat = np.full((3, 8, 8), 0.4)
    stripes = np.zeros((3, 8, 8))
    stripes[..., ::2] = 1.0
    assert gradient_energy(flat) == 0.0
    assert gradient_energy(stripes) == 1.0
    assert pearson(flat, stripes) == 0.0
    assert abs(pearson(stripes, 2 * stripes + 1) - 1.0) < 1e-12


def test_upsample_preserves_constants_and_shape():
    img = np.full((3, 4, 4), 0.3)
    up = upsample_bicubic(img, 4)
    assert up.shape == (3, 16, 16) and np.allclose(up, 0.3, atol=1e-12)


def test_per_image_mean_is_aggregate():
    rng = np.random.default_rng(0)
    A, B = rng.uniform(size=(4, 3, 8, 8)), rng.uniform(size=(4, 3, 8, 8))
    vals = per_image(psnr, A, B)
    assert vals.shape == (4,) and vals[2] == psnr(A[2], B[2])
