import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paanet import tensor as T
from paanet.gradcheck import finite_diff_check
from paanet.tensor import Tensor


def conv_oracle(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for a in range(n):
        for o in range(cout):
            for y in range(ho):
                for z in range(wo):
                    patch = xp[a, :, y * stride : y * stride + k, z * stride : z * stride + k]
                    out[a, o, y, z] = np.sum(patch * w[o]) + b[o]
    return out


def scatter_oracle(x, w, b, stride, pad):
    """Transposed conv by scattering each input pixel's kernel copy."""
    n, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    full = np.zeros((n, cout, (h - 1) * stride + k, (wd - 1) * stride + k))
    for a in range(n):
        for c in range(cin):
            for y in range(h):
                for z in range(wd):
                    full[a, :, y * stride : y * stride + k, z * stride : z * stride + k] += x[a, c, y, z] * w[c]
    ho, wo = full.shape[2] - 2 * pad, full.shape[3] - 2 * pad
    return full[:, :, pad : pad + ho, pad : pad + wo] + b[None, :, None, None]


def bilinear_oracle(img, oh, ow):
    """Scalar half-pixel bilinear sampling, one output site at a time."""
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            sy = max((i + 0.5) * h / oh - 0.5, 0.0)
            sx = max((j + 0.5) * w / ow - 0.5, 0.0)
            y0, x0 = min(int(np.floor(sy)), h - 1), min(int(np.floor(sx)), w - 1)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            ly, lx = sy - y0, sx - x0
            out[i, j] = (
                (1 - ly) * (1 - lx) * img[y0, x0]
                + (1 - ly) * lx * img[y0, x1]
                + ly * (1 - lx) * img[y1, x0]
                + ly * lx * img[y1, x1]
            )
    return out


# ---------------------------------------------------------------- conv2d


def test_conv_ones_kernel_counts_neighbours():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, w, Tensor(np.zeros(1)), stride=1, padding=1).data[0, 0]
    expected = conv_oracle(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1)[0, 0]
    np.testing.assert_array_equal(expected, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])
    np.testing.assert_array_equal(out, expected)


def test_conv_delta_kernel_is_identity(rng):
    x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
    w = np.zeros((3, 3, 3, 3), dtype=np.float32)
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)), 1, 1)
    np.testing.assert_array_equal(out.data, x)


def test_conv_shape():
    out = T.conv2d(Tensor(np.zeros((2, 4, 8, 8))), Tensor(np.zeros((16, 4, 3, 3))), Tensor(np.zeros(16)), 1, 1)
    assert out.shape == (2, 16, 8, 8)


@pytest.mark.parametrize("cout", [1, 3, 7])
@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2), (1, 2, 5)])
def test_conv_matches_loop_oracle(rng, cout, stride, pad, k):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(cout, 3, k, k))
    b = rng.normal(size=cout)
    out = T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64), stride, pad)
    np.testing.assert_allclose(out.data, conv_oracle(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_errors():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError, match="channel"):
        T.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="larger"):
        T.conv2d(x, Tensor(np.zeros((1, 2, 5, 5))))
    bad = np.zeros((1, 2, 4, 4))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        T.conv2d(Tensor(bad), Tensor(np.zeros((1, 2, 3, 3))), padding=1)


@settings(max_examples=25, deadline=None)
@given(k=st.sampled_from([1, 3, 5, 7]), h=st.integers(1, 9), w=st.integers(1, 9))
def test_odd_kernel_same_padding_preserves_extent(k, h, w):
    x = Tensor(np.zeros((1, 1, h, w)))
    out = T.conv2d(x, Tensor(np.zeros((2, 1, k, k))), padding=(k - 1) // 2)
    assert out.shape == (1, 2, h, w)


# ---------------------------------------------------------------- transposed conv


def test_transposed_single_pixel():
    out = T.transposed_conv2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 4, 4))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, scatter_oracle(np.ones((1, 1, 1, 1)), np.ones((1, 1, 4, 4)), np.zeros(1), 2, 1))
    # each output site receives exactly one kernel tap (scatter semantics), so 1.0 rather than 4.0
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 1.0))


def test_transposed_shape_and_zero_kernel():
    out = T.transposed_conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 4))), Tensor([2.5]))
    assert out.shape == (1, 1, 8, 8)
    np.testing.assert_array_equal(out.data, 2.5)


def test_transposed_matches_scatter_oracle(rng):
    x, w, b = rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(3, 2, 4, 4)), rng.normal(size=2)
    f64 = np.float64
    out = T.transposed_conv2d(Tensor(x, dtype=f64), Tensor(w, dtype=f64), Tensor(b, dtype=f64))
    np.testing.assert_allclose(out.data, scatter_oracle(x, w, b, 2, 1), atol=1e-12)


def test_transposed_is_adjoint_of_strided_conv(rng):
    # <conv(x), y> == <x, convT(y)> with shared kernel
    f64 = np.float64
    w = rng.normal(size=(2, 3, 4, 4))
    x = rng.normal(size=(1, 3, 8, 8))
    y = rng.normal(size=(1, 2, 4, 4))
    cx = T.conv2d(Tensor(x, dtype=f64), Tensor(w, dtype=f64), stride=2, padding=1).data
    # conv weight (Cout=2, Cin=3) is the transposed-conv weight (Cin=2, Cout=3)
    ty = T.transposed_conv2d(Tensor(y, dtype=f64), Tensor(w, dtype=f64), stride=2, padding=1).data
    assert np.sum(cx * y) == pytest.approx(np.sum(x * ty), rel=1e-12)


@pytest.mark.parametrize("k,stride,pad", [(3, 2, 1), (4, 1, 1), (2, 2, 1)])
def test_transposed_rejects_non_doubling(k, stride, pad):
    with pytest.raises(ValueError, match="double"):
        T.transposed_conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, k, k))), stride=stride, padding=pad)


@settings(max_examples=20, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12))
def test_transposed_always_doubles(h, w):
    out = T.transposed_conv2d(Tensor(np.zeros((1, 2, h, w))), Tensor(np.zeros((2, 1, 4, 4))))
    assert out.shape == (1, 1, 2 * h, 2 * w)


# ---------------------------------------------------------------- channel plumbing and gating


def test_concat_shapes_and_identity(rng):
    a, b = Tensor(np.zeros((1, 16, 8, 8))), Tensor(np.zeros((1, 32, 8, 8)))
    assert T.concat_channels([a, b]).shape == (1, 48, 8, 8)
    x = Tensor(rng.normal(size=(1, 4, 3, 3)))
    np.testing.assert_array_equal(T.concat_channels([x]).data, x.data)


def test_concat_split_round_trip_is_bitwise(rng):
    a = rng.normal(size=(2, 16, 5, 5)).astype(np.float32)
    b = rng.normal(size=(2, 9, 5, 5)).astype(np.float32)
    ra, rb = T.split_channels(T.concat_channels([Tensor(a), Tensor(b)]), [16, 9])
    assert ra.data.tobytes() == a.tobytes() and rb.data.tobytes() == b.tobytes()


def test_concat_rejects_mismatched_space():
    with pytest.raises(ValueError):
        T.concat_channels([Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 5)))])
    with pytest.raises(ValueError):
        T.concat_channels([])


def test_mul_broadcast_examples(rng):
    f = Tensor(rng.normal(size=(2, 3, 4, 4)))
    np.testing.assert_array_equal(T.mul_broadcast(f, Tensor(np.ones((2, 1, 4, 4)))).data, f.data)
    np.testing.assert_array_equal(T.mul_broadcast(f, Tensor(np.zeros((2, 1, 4, 4)))).data, 0.0)
    out = T.mul_broadcast(Tensor([[[[3.0]], [[-2.0]]]]), Tensor([[[[0.5]]]]))
    np.testing.assert_array_equal(out.data.ravel(), [1.5, -1.0])
    with pytest.raises(ValueError):
        T.mul_broadcast(f, Tensor(np.ones((2, 1, 2, 2))))


# ---------------------------------------------------------------- sigmoid / resize


def test_sigmoid_values_and_gradient():
    assert T.sigmoid(Tensor([0.0])).item() == 0.5
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    T.backward(T.tsum(T.sigmoid(x)))
    np.testing.assert_array_equal(x.grad, 0.25)


@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=30))
def test_sigmoid_symmetry_and_open_interval(xs):
    x = np.array(xs, dtype=np.float32)
    s = T.sigmoid(Tensor(x)).data
    assert np.all(s > 0) and np.all(s < 1)
    np.testing.assert_allclose(s + T.sigmoid(Tensor(-x)).data, 1.0, atol=1e-6)


def test_resize_constant_and_identity(rng):
    c = Tensor(np.full((1, 2, 3, 5), 3.7))
    for oh, ow in [(7, 2), (1, 1), (12, 10)]:
        np.testing.assert_allclose(T.resize_bilinear(c, oh, ow).data, np.float32(3.7), rtol=1e-6)
    x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
    assert T.resize_bilinear(Tensor(x), 4, 4).data.tobytes() == x.tobytes()


def test_resize_matches_scalar_oracle():
    img = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = T.resize_bilinear(Tensor(img[None, None], dtype=np.float64), 4, 4).data[0, 0]
    np.testing.assert_allclose(out, bilinear_oracle(img, 4, 4), atol=1e-15)


@pytest.mark.parametrize("shape", [(5, 7, 3, 2), (3, 3, 9, 4), (8, 8, 1, 1), (4, 6, 13, 11)])
def test_resize_random_against_oracle(rng, shape):
    h, w, oh, ow = shape
    img = rng.normal(size=(h, w))
    out = T.resize_bilinear(Tensor(img[None, None], dtype=np.float64), oh, ow).data[0, 0]
    np.testing.assert_allclose(out, bilinear_oracle(img, oh, ow), atol=1e-12)


# ---------------------------------------------------------------- backward


def test_backward_examples():
    x = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, 1.0)

    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    y = Tensor(np.ones(5), requires_grad=True)
    T.backward(T.add(T.tsum(y), T.tsum(y)))
    np.testing.assert_array_equal(y.grad, 2.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(T.mul(x, 2.0))


def test_fan_out_gradient_is_sum_of_single_consumer_gradients(rng):
    f64 = np.float64
    x0 = rng.normal(size=(1, 2, 4, 4))
    w = Tensor(rng.normal(size=(2, 2, 3, 3)), dtype=f64)
    consumers = [
        lambda t: T.tsum(T.sigmoid(t)),
        lambda t: T.tsum(T.mul(T.conv2d(t, w, padding=1), T.conv2d(t, w, padding=1))),
        lambda t: T.tsum(T.resize_bilinear(t, 7, 3)),
    ]
    singles = []
    for c in consumers:
        x = Tensor(x0, requires_grad=True, dtype=f64)
        T.backward(c(x))
        singles.append(x.grad)
    x = Tensor(x0, requires_grad=True, dtype=f64)
    total = consumers[0](x)
    for c in consumers[1:]:
        total = T.add(total, c(x))
    T.backward(total)
    np.testing.assert_allclose(x.grad, sum(singles), rtol=1e-12)


def test_graph_is_released_after_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.mul(x, 3.0)
    loss = T.tsum(y)
    T.backward(loss)
    assert y.node is None and loss.node is None


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.sigmoid(x)
    assert y.node is None and not y.requires_grad


# ---------------------------------------------------------------- finite differences


def test_finite_diff_examples(rng):
    x = rng.normal(size=(3, 4))
    assert finite_diff_check(lambda t: T.tsum(T.sigmoid(t)), x, eps=1e-3) < 1e-3

    xc = Tensor(rng.normal(size=(1, 2, 5, 5)), dtype=np.float64)
    w = rng.normal(size=(3, 2, 3, 3))
    assert finite_diff_check(lambda t: T.tsum(T.conv2d(xc, t, padding=1)), w, eps=1e-3) < 1e-3

    lin = finite_diff_check(lambda t: T.tsum(T.mul(t, 3.0)), rng.normal(size=20).astype(np.float32), eps=1e-2)
    assert lin < 1e-4


def test_finite_diff_catches_a_wrong_gradient(rng):
    def bad_square(t):
        return T.Tensor.from_op(t.data**2, (t,), lambda g: (-2 * g * t.data,))

    assert finite_diff_check(lambda t: T.tsum(bad_square(t)), rng.normal(size=5) + 3, eps=1e-4) > 1.0


# ---------------------------------------------------------------- serialization


def test_tensor_bytes_round_trip(rng):
    arr = rng.normal(size=(2, 3, 4)).astype(np.float32)
    buf = T.tensor_to_bytes(arr)
    assert buf[:4] == (3).to_bytes(4, "little")
    assert buf[4:16] == b"".join(n.to_bytes(4, "little") for n in (2, 3, 4))
    back, end = T.tensor_from_bytes(buf)
    assert end == len(buf) and back.tobytes() == arr.tobytes()
    with pytest.raises(ValueError, match="truncated"):
        T.tensor_from_bytes(buf[:-1])
