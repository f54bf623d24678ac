import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bokehgan.imaging import (
    DimensionError,
    ShapeMismatchError,
    SobelDirection,
    psnr,
    sobel,
    ssim,
    total_variation,
)
from bokehgan.oracles import psnr_loop, sobel_loop, ssim_loop, total_variation_loop
from fdcheck import check_gradient

# frozen from the window-by-window SSIM loop on a 16x16 checkerboard vs its inverse
CHECKERBOARD_SSIM = -0.9964064683569566


def step_image():
    img = np.zeros((4, 4))
    img[:, 2:] = 1.0
    return img


class TestSobelKernels:
    @pytest.mark.parametrize("d", list(SobelDirection))
    def test_kernel_sums_to_zero(self, d):
        assert d.kernel.sum() == 0

    def test_d0_is_transpose_of_d90(self):
        np.testing.assert_array_equal(SobelDirection.D0.kernel, SobelDirection.D90.kernel.T)

    def test_d135_mirrors_d45(self):
        np.testing.assert_array_equal(SobelDirection.D135.kernel, SobelDirection.D45.kernel[:, ::-1])

    def test_diagonals_differ(self):
        assert not np.array_equal(SobelDirection.D45.kernel, SobelDirection.D135.kernel)


class TestSobel:
    @pytest.mark.parametrize("d", list(SobelDirection))
    @pytest.mark.parametrize("value", [0.0, 0.3, 1.0])
    def test_constant_image_gives_zero(self, d, value):
        out = sobel(torch.full((3, 7, 9), value, dtype=torch.float64), d)
        assert out.abs().max() < 1e-12

    def test_vertical_step_d0(self):
        # rows: 4 * (I[j+1] - I[j-1]) with clamped borders
        expected = np.array([[0, 4, 4, 0]] * 4, dtype=float)
        oracle = sobel_loop(step_image(), SobelDirection.D0.kernel)
        np.testing.assert_array_equal(oracle, expected)
        out = sobel(torch.tensor(step_image())[None], SobelDirection.D0)[0].numpy()
        np.testing.assert_allclose(out, expected, atol=1e-12)

    @pytest.mark.parametrize("d", list(SobelDirection))
    def test_matches_loop_oracle(self, d):
        rng = np.random.default_rng(int(d.value))
        for _ in range(10):
            img = rng.random((8, 8))
            out = sobel(torch.tensor(img), d).numpy()
            np.testing.assert_allclose(out, sobel_loop(img, d.kernel), atol=1e-6, rtol=0)

    def test_linearity(self):
        img = torch.rand(1, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        for d in SobelDirection:
            torch.testing.assert_close(sobel(2.5 * img, d), 2.5 * sobel(img, d))

    def test_transpose_relation(self):
        img = torch.rand(3, 8, 11, dtype=torch.float64)
        lhs = sobel(img, SobelDirection.D0)
        rhs = sobel(img.transpose(-1, -2), SobelDirection.D90).transpose(-1, -2)
        torch.testing.assert_close(lhs, rhs)

    def test_shape_preserved_for_batches(self):
        img = torch.rand(2, 3, 6, 5)
        assert sobel(img, SobelDirection.D45).shape == img.shape

    @pytest.mark.parametrize("shape", [(2, 5), (5, 2), (1, 2, 2)])
    def test_too_small(self, shape):
        with pytest.raises(DimensionError):
            sobel(torch.zeros(shape), SobelDirection.D0)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        weights = torch.tensor(rng.normal(size=(3, 8, 8)))
        errs = check_gradient(lambda x: (sobel(x, SobelDirection.D45) * weights).sum(),
                              torch.tensor(rng.random((3, 8, 8))), n_points=30, rng=rng)
        assert errs.max() < 1e-3


class TestTotalVariation:
    def test_constant_is_zero(self):
        assert float(total_variation(torch.full((3, 5, 5), 0.7))) == 0.0

    def test_two_by_two(self):
        img = [[0.0, 1.0], [0.0, 1.0]]
        assert total_variation_loop(np.array(img)) == 2.0
        assert float(total_variation(torch.tensor(img))) == 2.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            img = rng.random((8, 8))
            assert abs(float(total_variation(torch.tensor(img))) - total_variation_loop(img)) < 1e-6

    @given(arrays(np.float64, (2, 5, 6), elements=st.floats(0, 1)), st.floats(0, 10))
    @settings(max_examples=50, deadline=None)
    def test_homogeneous_and_nonnegative(self, img, c):
        t = torch.tensor(img)
        tv = float(total_variation(t))
        assert tv >= 0
        assert math.isclose(float(total_variation(c * t)), c * tv, rel_tol=1e-9, abs_tol=1e-9)

    @given(arrays(np.float64, (2, 4, 4), elements=st.floats(0, 1)))
    @settings(max_examples=50, deadline=None)
    def test_zero_iff_constant_per_channel(self, img):
        constant = all(np.all(ch == ch.flat[0]) for ch in img)
        assert (float(total_variation(torch.tensor(img))) == 0.0) == constant

    def test_too_small(self):
        with pytest.raises(DimensionError):
            total_variation(torch.zeros(1, 5))


class TestPSNR:
    def test_identical_is_infinite(self):
        img = torch.rand(3, 8, 8)
        assert psnr(img, img) == math.inf

    def test_constant_offset(self):
        a = torch.full((3, 8, 8), 0.2, dtype=torch.float64)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert abs(psnr(torch.tensor(a), torch.tensor(b)) - psnr_loop(a, b)) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            psnr(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))


class TestSSIM:
    def test_identity(self):
        img = torch.rand(3, 16, 16, dtype=torch.float64)
        assert float(ssim(img, img)) == pytest.approx(1.0, abs=1e-6)

    def test_checkerboard_inverse(self):
        cb = (np.indices((16, 16)).sum(0) % 2).astype(float)
        assert ssim_loop(cb, 1 - cb) == pytest.approx(CHECKERBOARD_SSIM, abs=1e-12)
        got = float(ssim(torch.tensor(cb)[None], torch.tensor(1 - cb)[None]))
        assert got == pytest.approx(CHECKERBOARD_SSIM, abs=1e-9)

    def test_matches_loop_on_random(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((12, 13)), rng.random((12, 13))
        got = float(ssim(torch.tensor(a)[None], torch.tensor(b)[None]))
        assert got == pytest.approx(ssim_loop(a, b), abs=1e-9)

    def test_symmetric(self):
        g = torch.Generator().manual_seed(4)
        for _ in range(5):
            a = torch.rand(3, 14, 14, generator=g, dtype=torch.float64)
            b = torch.rand(3, 14, 14, generator=g, dtype=torch.float64)
            assert float(ssim(a, b)) == pytest.approx(float(ssim(b, a)), abs=1e-12)

    def test_range(self):
        a, b = torch.rand(2, 3, 20, 20), torch.rand(2, 3, 20, 20)
        assert -1 <= float(ssim(a, b)) <= 1

    def test_errors(self):
        with pytest.raises(ShapeMismatchError):
            ssim(torch.zeros(1, 12, 12), torch.zeros(1, 12, 13))
        with pytest.raises(DimensionError):
            ssim(torch.zeros(1, 10, 12), torch.zeros(1, 10, 12))

    def test_gradient(self):
        rng = np.random.default_rng(6)
        target = torch.tensor(rng.random((3, 12, 12)))
        errs = check_gradient(lambda x: ssim(x, target), torch.tensor(rng.random((3, 12, 12))),
                              n_points=30, rng=rng)
        assert errs.max() < 1e-3
