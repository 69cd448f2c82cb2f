"""AudioMamba: self-attention-free audio tagging with selective state-space scans."""

from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "no_grad", "__version__"]
