"""Define-by-run reverse-mode autodiff over dense float arrays.

Only the operators the segmentation network needs are provided. Each op that
touches a gradient-tracking input records a node holding its parents and a
backward closure; node ids come from a global append-only counter, so sorting
by id recovers a valid topological order.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
import threading

import numpy as np

from paanet import kernels

_node_ids = itertools.count()
_state = threading.local()

# Conv patch matrices above this size are rebuilt in backward instead of kept.
_COLS_CACHE_BYTES = 32 * 1024 * 1024
# Output-channel count at or below which stride-1 convs use the direct kernel.
_DIRECT_MAX_COUT = 4


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (evaluation, finite differences)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("id", "parents", "backward")

    def __init__(self, parents, backward):
        self.id = next(_node_ids)
        self.parents = parents
        self.backward = backward


class Tensor:
    """A float array plus optional gradient and graph handle."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents, backward) -> "Tensor":
        """Wrap an op result, recording a node when any parent tracks gradients.

        ``backward(g)`` must return one gradient (or None) per parent.
        """
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node = None
        out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.node = Node(tuple(parents), backward)
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, -1.0 * other if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf that tracks gradients.

    Leaf gradients accumulate additively (call ``zero_grad`` between steps).
    The recorded graph is released afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("backward() called on a non-finite loss")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")

    interior = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in interior:
            continue
        interior[id(t)] = t
        stack.extend(p for p in t.node.parents if p.requires_grad)

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for t in sorted(interior.values(), key=lambda t: t.node.id, reverse=True):
        g = grads.pop(id(t), None)
        node = t.node
        t.node = None
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.node is None:
                leaves[key] = parent
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ----------------------------------------------------------------------------
# convolution family


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"{what} contains NaN or Inf")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an N x Cin x H x W batch with Cout x Cin x k x k filters."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if k != k2 or k < 1:
        raise ValueError(f"conv2d needs a square kernel, got {k}x{k2}")
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin} channels, weight expects {wcin}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")
    _check_finite(x.data, "conv2d input")

    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    if stride == 1 and cout <= _DIRECT_MAX_COUT:
        return _conv2d_direct(x, weight, bias, xp, padding, ho, wo, parents)

    cols = kernels.im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out2d = cols @ wmat.T
    if bias is not None:
        out2d += bias.data
    out = np.ascontiguousarray(out2d.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    keep = cols if cols.nbytes <= _COLS_CACHE_BYTES else None

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dx = dw = db = None
        if weight.requires_grad:
            c = keep if keep is not None else kernels.im2col(xp, k, stride, ho, wo)
            dw = (g2.T @ c).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            db = g2.sum(axis=0)
        if x.requires_grad:
            dcols = np.ascontiguousarray(g2 @ wmat)
            dxp = kernels.col2im(dcols, xp.shape, k, stride, ho, wo)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return (dx, dw) if bias is None else (dx, dw, db)

    return Tensor.from_op(out, parents, grad_fn)


def _conv2d_direct(x, weight, bias, xp, padding, ho, wo, parents):
    # stride-1, few output channels: skip the patch matrix entirely
    h, w = x.shape[2:]
    wdata = np.ascontiguousarray(weight.data, dtype=xp.dtype)
    out = kernels.conv_direct_forward(xp, wdata, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        g = np.ascontiguousarray(g, dtype=xp.dtype)
        dx = dw = db = None
        if weight.requires_grad:
            dw = kernels.conv_direct_backward_weight(g, xp, weight.shape[2])
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxp = kernels.conv_direct_backward_input(g, wdata, xp.shape)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return (dx, dw) if bias is None else (dx, dw, db)

    return Tensor.from_op(out, parents, grad_fn)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, padding: int = 1) -> Tensor:
    """Learned 2x upsampling: the input-gradient of a strided convolution.

    ``weight`` is Cin x Cout x k x k. Only parameter combinations that exactly
    double H and W are accepted.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"transposed_conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    wcin, cout, k, k2 = weight.shape
    if wcin != cin:
        raise ValueError(f"transposed_conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if k != k2:
        raise ValueError(f"transposed_conv2d needs a square kernel, got {k}x{k2}")
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho != 2 * h or wo != 2 * w:
        raise ValueError(
            f"kernel={k}, stride={stride}, padding={padding} maps {h}x{w} to {ho}x{wo}; upscaling must double"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")
    _check_finite(x.data, "transposed_conv2d input")

    hf, wf = ho + 2 * padding, wo + 2 * padding
    x2d = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * w, cin)
    wmat = weight.data.reshape(cin, cout * k * k)
    cols = np.ascontiguousarray(x2d @ wmat)
    full = kernels.col2im(cols, (n, cout, hf, wf), k, stride, h, w)
    out = np.ascontiguousarray(full[:, :, padding : padding + ho, padding : padding + wo])
    if bias is not None:
        out += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = kernels.im2col(np.ascontiguousarray(gp), k, stride, h, w)
        dx = dw = db = None
        if x.requires_grad:
            dx = np.ascontiguousarray((gcols @ wmat.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            dw = (x2d.T @ gcols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return (dx, dw) if bias is None else (dx, dw, db)

    return Tensor.from_op(out, parents, grad_fn)


# ----------------------------------------------------------------------------
# channel plumbing and gating


def concat_channels(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for p in parts:
        if p.data.ndim != 4 or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: cannot stack {p.shape} with {ref} (N, H, W must match)")
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def grad_fn(g):
        return tuple(
            np.ascontiguousarray(g[:, a:b]) if p.requires_grad else None
            for p, a, b in zip(parts, bounds[:-1], bounds[1:])
        )

    return Tensor.from_op(out, parts, grad_fn)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ValueError(f"channel range [{start}, {stop}) outside 0..{c}")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return Tensor.from_op(out, (x,), grad_fn)


def split_channels(x: Tensor, sizes) -> list:
    if sum(sizes) != x.shape[1]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    out, start = [], 0
    for s in sizes:
        out.append(channel_slice(x, start, start + s))
        start += s
    return out


def mul_broadcast(features: Tensor, gate: Tensor) -> Tensor:
    """Scale every channel of ``features`` by a single-channel spatial map."""
    n, c, h, w = features.shape
    if gate.shape != (n, 1, h, w):
        raise ValueError(f"gate shape {gate.shape} does not match features {features.shape}; expected {(n, 1, h, w)}")
    out = features.data * gate.data

    def grad_fn(g):
        df = g * gate.data if features.requires_grad else None
        dm = (g * features.data).sum(axis=1, keepdims=True) if gate.requires_grad else None
        return df, dm

    return Tensor.from_op(out, (features, gate), grad_fn)


# ----------------------------------------------------------------------------
# pointwise


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    # keep outputs strictly inside (0, 1) even where the dtype would round to 0 or 1
    info = np.finfo(x.dtype)
    np.clip(out, info.tiny, np.nextafter(x.dtype.type(1), x.dtype.type(0)), out=out)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return Tensor.from_op(out, (x,), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def grad_fn(g):
        return (g * mask,)

    return Tensor.from_op(out, (x,), grad_fn)


def one_minus(x: Tensor) -> Tensor:
    out = 1.0 - x.data

    def grad_fn(g):
        return (-g,)

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x,), grad_fn)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = (a.data + b).astype(a.dtype, copy=False)
        return Tensor.from_op(out, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = (a.data * b).astype(a.dtype, copy=False)
        return Tensor.from_op(out, (a,), lambda g: (g * b,))
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def grad_fn(g):
        return g * b.data, g * a.data

    return Tensor.from_op(a.data * b.data, (a, b), grad_fn)


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype).reshape(())

    def grad_fn(g):
        return (np.full_like(x.data, g),)

    return Tensor.from_op(out, (x,), grad_fn)


def mean(x: Tensor) -> Tensor:
    return mul(tsum(x), 1.0 / x.data.size)


def stack_mean(scalars) -> Tensor:
    """Arithmetic mean of a list of scalar tensors."""
    scalars = list(scalars)
    if not scalars:
        raise ValueError("stack_mean needs at least one term")
    total = scalars[0]
    for s in scalars[1:]:
        total = add(total, s)
    return mul(total, 1.0 / len(scalars))


# ----------------------------------------------------------------------------
# resampling


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Half-pixel-center bilinear resampling (no corner alignment, no antialias)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return Tensor.from_op(x.data.copy(), (x,), lambda g: (g,))
    out = kernels.resize_forward(np.ascontiguousarray(x.data), out_h, out_w)

    def grad_fn(g):
        return (kernels.resize_backward(np.ascontiguousarray(g, dtype=x.dtype), h, w),)

    return Tensor.from_op(out, (x,), grad_fn)


# ----------------------------------------------------------------------------
# serialization: u32 rank, u32 extents, little-endian float32 payload


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def tensor_from_bytes(buf, offset: int = 0):
    """Decode one tensor at ``offset``; returns (array, next_offset)."""
    try:
        (rank,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if rank > 8:
            raise ValueError(f"implausible tensor rank {rank}")
        shape = struct.unpack_from(f"<{rank}I", buf, offset)
        offset += 4 * rank
    except struct.error as exc:
        raise ValueError("truncated tensor header") from exc
    count = int(np.prod(shape, dtype=np.int64))
    end = offset + 4 * count
    if end > len(buf):
        raise ValueError(f"truncated tensor payload: need {end - offset} bytes, have {len(buf) - offset}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)
    return arr, end
