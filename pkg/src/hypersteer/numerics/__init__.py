from .autodiff import GradTape, Tensor, ops
from .rng import RngStream
from .serialize import read_named_tensors, read_tensor, write_named_tensors, write_tensor

__all__ = [
    "GradTape",
    "Tensor",
    "ops",
    "RngStream",
    "read_named_tensors",
    "read_tensor",
    "write_named_tensors",
    "write_tensor",
]
