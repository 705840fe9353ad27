"""stormbench: parameter-budget-controlled forecasting benchmark on 2D turbulence."""

from .tensor import (  # noqa: F401
    ComplexTensor,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    no_grad,
    reset_tape,
)

__version__ = "0.1.0"
