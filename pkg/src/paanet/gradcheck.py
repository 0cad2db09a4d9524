"""Central finite-difference verification of analytic gradients."""

from dataclasses import dataclass

import numpy as np

from paanet import tensor as T
from paanet.tensor import Tensor, backward, no_grad


def finite_diff_check(f, x, eps: float = 1e-3, indices=None) -> float:
    """Compare ``backward`` against central differences of a scalar function.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic. ``x`` may
    be an array or Tensor; its dtype is kept, so pass float64 data for tight
    checks. ``indices`` restricts the comparison to chosen flat coordinates.

    Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x)
    if base.dtype not in (np.float32, np.float64):
        base = base.astype(np.float64)

    xt = Tensor(base.copy(), requires_grad=True, dtype=base.dtype)
    backward(f(xt))
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad
    analytic = analytic.reshape(-1)

    flat = base.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in coords:
            bumped = flat.copy()
            bumped[i] = flat[i] + eps
            up = f(Tensor(bumped.reshape(base.shape), dtype=base.dtype)).item()
            bumped[i] = flat[i] - eps
            down = f(Tensor(bumped.reshape(base.shape), dtype=base.dtype)).item()
            numeric = (up - down) / (2.0 * eps)
            err = abs(float(analytic[i]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _probe(rng, shape):
    """Fixed random weighting so the scalar test function sees the whole Jacobian."""
    return Tensor(rng.normal(size=shape), dtype=np.float64)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x) + 0.0


def op_cases(rng) -> list:
    """(name, function, input array) triples; every input has at most 512 elements."""
    from paanet.training import bce_iou_loss

    f64 = np.float64

    def const(shape, scale=1.0):
        return Tensor(rng.normal(size=shape) * scale, dtype=f64)

    def weighted(op, out_shape):
        r = _probe(rng, out_shape)
        return lambda t: T.tsum(T.mul(op(t), r))

    cases = []
    x = rng.normal(size=(2, 3, 6, 6))
    w3, b3 = const((5, 3, 3, 3)), const((5,))
    w1, b1 = const((1, 3, 3, 3)), const((1,))
    cases.append(("conv2d.input[im2col,s1]", weighted(lambda t: T.conv2d(t, w3, b3, 1, 1), (2, 5, 6, 6)), x))
    cases.append(("conv2d.input[im2col,s2]", weighted(lambda t: T.conv2d(t, w3, b3, 2, 1), (2, 5, 3, 3)), x))
    cases.append(("conv2d.input[direct]", weighted(lambda t: T.conv2d(t, w1, b1, 1, 1), (2, 1, 6, 6)), x))
    xt = Tensor(x, dtype=f64)
    cases.append(("conv2d.weight[im2col]", weighted(lambda t: T.conv2d(xt, t, b3, 2, 1), (2, 5, 3, 3)), w3.data))
    cases.append(("conv2d.weight[direct]", weighted(lambda t: T.conv2d(xt, t, b1, 1, 1), (2, 1, 6, 6)), w1.data))
    cases.append(("conv2d.bias", weighted(lambda t: T.conv2d(xt, w3, t, 1, 0), (2, 5, 4, 4)), b3.data))

    xu = rng.normal(size=(2, 3, 3, 3))
    wt, bt = const((3, 2, 4, 4)), const((2,))
    xut = Tensor(xu, dtype=f64)
    cases.append(("transposed_conv2d.input", weighted(lambda t: T.transposed_conv2d(t, wt, bt), (2, 2, 6, 6)), xu))
    cases.append(("transposed_conv2d.weight", weighted(lambda t: T.transposed_conv2d(xut, t, bt), (2, 2, 6, 6)), wt.data))
    cases.append(("transposed_conv2d.bias", weighted(lambda t: T.transposed_conv2d(xut, wt, t), (2, 2, 6, 6)), bt.data))

    other = const((2, 2, 6, 6))
    cases.append(("concat_channels", weighted(lambda t: T.concat_channels([other, t, t]), (2, 8, 6, 6)), x))
    cases.append(("channel_slice", weighted(lambda t: T.channel_slice(t, 1, 3), (2, 2, 6, 6)), x))
    gate = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 6, 6)), dtype=f64)
    cases.append(("mul_broadcast.features", weighted(lambda t: T.mul_broadcast(t, gate), (2, 3, 6, 6)), x))
    cases.append(("mul_broadcast.map", weighted(lambda t: T.mul_broadcast(xt, t), (2, 3, 6, 6)), gate.data))
    cases.append(("sigmoid", weighted(T.sigmoid, (2, 3, 6, 6)), x * 3))
    cases.append(("relu", weighted(T.relu, (2, 3, 6, 6)), _away_from_zero(rng, (2, 3, 6, 6))))
    cases.append(("one_minus", weighted(T.one_minus, (2, 3, 6, 6)), x))
    cases.append(("resize_bilinear.up", weighted(lambda t: T.resize_bilinear(t, 11, 13), (2, 3, 11, 13)), x))
    cases.append(("resize_bilinear.down", weighted(lambda t: T.resize_bilinear(t, 3, 2), (2, 3, 3, 2)), x))
    cases.append(("add", weighted(lambda t: T.add(t, xt), (2, 3, 6, 6)), x))
    cases.append(("mul", weighted(lambda t: T.mul(t, xt), (2, 3, 6, 6)), x))
    cases.append(("mean", lambda t: T.mean(T.mul(t, t)), x))

    mask = (rng.uniform(size=(2, 1, 8, 8)) > 0.5).astype(f64)
    probs = rng.uniform(0.05, 0.95, size=(2, 1, 8, 8))
    cases.append(("bce_iou_loss", lambda t: bce_iou_loss(t, mask), probs))
    return cases


def tiny_model_config():
    from paanet.model import ModelConfig

    return ModelConfig(dense_layers=2, growth=4, num_blocks=1, input_size=(32, 32))


def end_to_end_checks(rng, n_coords: int = 5, eps: float = 1e-3) -> list:
    """Finite differences of the deeply supervised loss at random parameter coordinates."""
    from paanet.model import forward, init_params
    from paanet.training import total_loss

    cfg = tiny_model_config()
    params = init_params(cfg, rng)
    image = Tensor(rng.uniform(size=(1, cfg.in_channels) + cfg.input_size))
    yy, xx = np.mgrid[0:32, 0:32]
    mask = (((yy - 14) ** 2 + (xx - 18) ** 2) < 64).astype(np.float32)[None, None]

    names = list(params)
    results = []
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        idx = int(rng.integers(params[name].data.size))

        def f(p, name=name):
            return total_loss(forward(image, {**params, name: p}, cfg), mask)

        err = finite_diff_check(f, params[name].data, eps=eps, indices=[idx])
        results.append(CheckResult(f"end_to_end[{name}#{idx}]", err, END_TO_END_TOLERANCE))
    return results


OP_TOLERANCE = 1e-3
END_TO_END_TOLERANCE = 1e-2


def run_suite(seed: int = 0) -> list:
    """Every tensor-core op (float64) plus the tiny end-to-end model (float32)."""
    rng = np.random.default_rng(seed)
    results = [CheckResult(name, finite_diff_check(f, x, eps=1e-4), OP_TOLERANCE) for name, f, x in op_cases(rng)]
    results += end_to_end_checks(rng)
    return results
