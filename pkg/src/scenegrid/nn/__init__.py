"""Sparse tensors, kernel maps, layers, and the reverse-mode tape."""

from .tape import Node, Parameter, Tape, TapeError, backward, accumulate
from .sparse import (CoordSet, KernelMap, SparseTensor, build_kernel_map,
                     kernel_offsets, sparse_conv, sparse_conv_transposed)
from . import ops
from .layers import (BatchNorm, Linear, Module, StridedConvDown,
                     SubmanifoldConv, TransposedConvUp)

__all__ = [
    "Node", "Parameter", "Tape", "TapeError", "backward", "accumulate",
    "CoordSet", "KernelMap", "SparseTensor", "build_kernel_map",
    "kernel_offsets", "sparse_conv", "sparse_conv_transposed", "ops",
    "BatchNorm", "Linear", "Module", "StridedConvDown", "SubmanifoldConv",
    "TransposedConvUp",
]
