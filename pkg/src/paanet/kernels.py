"""Kernel backend selection.

The compiled Cython module is preferred; the NumPy fallback is used when the
extension was not built or when ``PAANET_BACKEND=python`` is set in the
environment before import.
"""

import os

from paanet import _pykernels

_impl = _pykernels
BACKEND = "python"

if os.environ.get("PAANET_BACKEND", "").lower() != "python":
    try:
        from paanet import _ckernels

        _impl = _ckernels
        BACKEND = "cython"
    except ImportError:
        pass

im2col = _impl.im2col
col2im = _impl.col2im
resize_forward = _impl.resize_forward
resize_backward = _impl.resize_backward
conv_direct_forward = _impl.conv_direct_forward
conv_direct_backward_input = _impl.conv_direct_backward_input
conv_direct_backward_weight = _impl.conv_direct_backward_weight


def available_backends():
    """Backend name -> kernel module, for benchmarks and equivalence tests."""
    found = {"python": _pykernels}
    try:
        from paanet import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
