"""Compiled and NumPy kernel backends must agree."""

import numpy as np
import pytest

from paanet import kernels

BACKENDS = kernels.available_backends()
needs_both = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled extension not built")


def test_backend_selected():
    assert kernels.BACKEND in BACKENDS


@needs_both
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (4, 2), (1, 1)])
def test_im2col_col2im_agree(rng, dtype, k, stride):
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    xp = rng.normal(size=(2, 3, 9, 8)).astype(dtype)
    ho, wo = (9 - k) // stride + 1, (8 - k) // stride + 1
    a, b = py.im2col(xp, k, stride, ho, wo), cy.im2col(xp, k, stride, ho, wo)
    np.testing.assert_array_equal(np.asarray(a), np.asarray(b))
    cols = rng.normal(size=a.shape).astype(dtype)
    np.testing.assert_allclose(py.col2im(cols, xp.shape, k, stride, ho, wo), cy.col2im(cols, xp.shape, k, stride, ho, wo), rtol=1e-5, atol=1e-6)


@needs_both
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("size", [(64, 64), (5, 7), (3, 2)])
def test_resize_agree(rng, dtype, size):
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    x = rng.normal(size=(2, 3, 16, 8)).astype(dtype)
    np.testing.assert_allclose(py.resize_forward(x, *size), cy.resize_forward(x, *size), rtol=1e-5, atol=1e-6)
    g = rng.normal(size=(2, 3) + size).astype(dtype)
    np.testing.assert_allclose(py.resize_backward(g, 16, 8), cy.resize_backward(g, 16, 8), rtol=1e-5, atol=1e-5)


@needs_both
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_direct_conv_agree(rng, dtype):
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    xp = rng.normal(size=(2, 5, 10, 9)).astype(dtype)
    w = rng.normal(size=(2, 5, 3, 3)).astype(dtype)
    np.testing.assert_allclose(py.conv_direct_forward(xp, w, 8, 7), cy.conv_direct_forward(xp, w, 8, 7), rtol=1e-5, atol=1e-5)
    g = rng.normal(size=(2, 2, 8, 7)).astype(dtype)
    np.testing.assert_allclose(
        py.conv_direct_backward_input(g, w, xp.shape), cy.conv_direct_backward_input(g, w, xp.shape), rtol=1e-5, atol=1e-5
    )
    np.testing.assert_allclose(py.conv_direct_backward_weight(g, xp, 3), cy.conv_direct_backward_weight(g, xp, 3), rtol=1e-5, atol=1e-4)


def test_python_backend_runs_model(monkeypatch, rng):
    """Force the fallback through the public kernel names and run a forward pass."""
    from paanet import tensor as T
    from paanet.model import ModelConfig, forward, init_params

    py = BACKENDS["python"]
    for name in ("im2col", "col2im", "resize_forward", "resize_backward", "conv_direct_forward",
                 "conv_direct_backward_input", "conv_direct_backward_weight"):
        monkeypatch.setattr(kernels, name, getattr(py, name))
    cfg = ModelConfig(encoder_channels=(4, 4, 4, 4), dense_layers=1, growth=2, num_blocks=1, input_size=(16, 16))
    params = init_params(cfg, rng)
    x = T.Tensor(rng.uniform(size=(1, 3, 16, 16)))
    out = forward(x, params, cfg)
    assert out.prediction.shape == (1, 1, 16, 16)
