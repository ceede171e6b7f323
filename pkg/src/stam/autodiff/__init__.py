from stam.autodiff.tensor import Tape, Tensor, backward, no_grad
from stam.autodiff.gradcheck import (
    finite_difference_check,
    norm_relative_error,
    numerical_gradient,
    relative_error,
)
from stam.autodiff import ops

__all__ = [
    "Tape", "Tensor", "backward", "no_grad", "ops",
    "finite_difference_check", "norm_relative_error", "numerical_gradient", "relative_error",
]
