"""PAANet: progressive alternating attention dense blocks for binary
segmentation, on a small NumPy autograd core with Cython kernels."""

from paanet.kernels import BACKEND
from paanet.model import ModelConfig, ModelOutputs, PAANet, forward
from paanet.tensor import Tensor, backward, no_grad

__all__ = ["BACKEND", "ModelConfig", "ModelOutputs", "PAANet", "Tensor", "backward", "forward", "no_grad"]
__version__ = "0.1.0"
