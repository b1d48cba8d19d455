"""Adversarial-training laboratory: attention feature prioritization + L2 feature regularization."""

from robustlab.tensor import Tensor, forward_op

__all__ = ["Tensor", "forward_op"]
__version__ = "0.1.0"
