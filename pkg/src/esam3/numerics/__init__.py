"""Float64 tensor core: ops, reverse mode, gradient checking, serialization."""

from .gradcheck import grad_check
from .serialize import CorruptTensorError, load, save
from .tensor import (
    NumericalError,
    Record,
    RecordError,
    ShapeError,
    Tensor,
    backward,
    no_record,
)

__all__ = [
    "Tensor",
    "Record",
    "RecordError",
    "ShapeError",
    "NumericalError",
    "CorruptTensorError",
    "backward",
    "grad_check",
    "no_record",
    "load",
    "save",
]
