import numpy as np
import pytest
from numpy.testing import assert_allclose

from dcl import autodiff as ad
from dcl import sobel
from dcl.autodiff import Tensor
from dcl.gradcheck import check_gradients


def test_kernel_constants():
    k = sobel.DEFAULT_KERNELS
    kx = np.asarray(k.kx)
    assert np.all(kx.sum(axis=1) == 0)
    assert np.array_equal(np.asarray(k.ky), kx.T)
    assert abs(sum(k.gray_weights) - 1.0) < 1e-12
    with pytest.raises(ValueError):
        sobel.SobelKernels(kx=((1, 1, 1),) * 3).validate()


def test_gray_equal_channels():
    img = Tensor(np.full((1, 3, 4, 4), 0.7))
    assert_allclose(sobel.rgb_to_gray(img).data, 0.7, rtol=1e-6)


def test_gray_pure_red():
    img = np.zeros((1, 3, 2, 2))
    img[0, 0] = 1.0
    assert_allclose(sobel.rgb_to_gray(Tensor(img)).data, 0.299, rtol=1e-6)


def test_gray_dot_product():
    img = np.zeros((1, 3, 1, 1))
    img[0, :, 0, 0] = [0.2, 0.4, 0.6]
    expected = 0.299 * 0.2 + 0.587 * 0.4 + 0.114 * 0.6  # = 0.3630
    out = sobel.rgb_to_gray(Tensor(img)).data
    assert_allclose(out, expected, rtol=1e-12)
    assert_allclose(expected, 0.3630, atol=5e-5)


def test_gray_rejects_wrong_channels():
    with pytest.raises(ad.ShapeError):
        sobel.rgb_to_gray(Tensor(np.zeros((1, 4, 2, 2))))


def test_edges_constant_image_zero_interior():
    out = sobel.sobel_edges(Tensor(np.full((1, 1, 6, 6), 3.0))).data
    assert np.all(out[:, :, 1:-1, 1:-1] == 0)


def test_edges_on_ramp():
    h = w = 7
    ramp = np.broadcast_to(np.arange(w, dtype=np.float64), (h, w)).copy()
    out = sobel.sobel_edges(Tensor(ramp[None, None])).data
    # correlation of [[-1,0,1],[-2,0,2],[-1,0,1]] with g(r,c)=c is 8 inside
    assert_allclose(out[0, 0, 1:-1, 1:-1], 8.0)
    assert_allclose(out[0, 1, 1:-1, 1:-1], 0.0, atol=1e-12)


def test_edges_transpose_swaps_channels():
    rng = np.random.default_rng(2)
    g = rng.standard_normal((5, 5))
    out = sobel.sobel_edges(Tensor(g[None, None])).data
    out_t = sobel.sobel_edges(Tensor(g.T[None, None])).data
    assert_allclose(out[0, 0].T, out_t[0, 1], atol=1e-12)
    assert_allclose(out[0, 1].T, out_t[0, 0], atol=1e-12)


def test_augment_channel_counts():
    assert sobel.augment_input(Tensor(np.zeros((2, 3, 32, 32)))).shape == (2, 5, 32, 32)
    assert sobel.augment_input(Tensor(np.zeros((2, 1, 24, 24)))).shape == (2, 3, 24, 24)
    with pytest.raises(ad.ShapeError):
        sobel.augment_input(Tensor(np.zeros((2, 2, 8, 8))))


def test_augment_zero_image():
    out = sobel.augment_input(Tensor(np.zeros((1, 3, 5, 5)))).data
    assert np.all(out == 0)


def test_augment_preserves_original_channels():
    rng = np.random.default_rng(3)
    img = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    out = sobel.augment_input(Tensor(img)).data
    assert np.array_equal(out[:, :3], img)


def test_edges_linear():
    rng = np.random.default_rng(4)
    g = rng.standard_normal((1, 1, 6, 6))
    a = sobel.sobel_edges(Tensor(g)).data
    b = sobel.sobel_edges(Tensor(2.5 * g)).data
    assert_allclose(b, 2.5 * a, rtol=1e-12)


def test_augment_differentiable_wrt_image():
    rng = np.random.default_rng(5)
    img = rng.standard_normal((1, 3, 5, 5))

    def build(x):
        weigh = Tensor(np.random.default_rng(11).standard_normal((1, 5, 5, 5)))
        return ad.sum_(ad.mul(sobel.augment_input(x), weigh))

    assert check_gradients(build, [img]) <= 1e-6
