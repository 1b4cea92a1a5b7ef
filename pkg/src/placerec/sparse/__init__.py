"""Sparse voxel tensors, their differentiable operators, and the autodiff tape."""
from .autodiff import Parameter, Tape, Variable
from .ops import (
    BatchNorm,
    GeMParams,
    batch_norm,
    eca,
    gem_pool,
    relu,
    sparse_add,
    sparse_conv,
    sparse_transposed_conv,
)
from .tensor import KernelMap, SparseTensor3D, kernel_offsets, pack_keys

__all__ = [
    "BatchNorm", "GeMParams", "KernelMap", "Parameter", "SparseTensor3D", "Tape", "Variable",
    "batch_norm", "eca", "gem_pool", "kernel_offsets", "pack_keys", "relu", "sparse_add",
    "sparse_conv", "sparse_transposed_conv",
]
