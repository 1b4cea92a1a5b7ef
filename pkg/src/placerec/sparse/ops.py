"""Differentiable operators on :class:`SparseTensor3D`.

Every operator takes an optional ``tape``; when given, a node with the
operator's backward closure is recorded on it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ..errors import (
    ChannelMismatch,
    DegenerateBatch,
    EmptyTensor,
    ShapeMismatch,
    StrideMismatch,
    StrideViolation,
)
from .autodiff import Parameter, Tape, Variable
from .tensor import KernelMap, SparseTensor3D, conv_map, down_map, up_map


def _apply_map(x: SparseTensor3D, weight: Parameter, kmap: KernelMap, out_stride: int,
               tape: Tape | None) -> SparseTensor3D:
    w = weight.value
    taps, c_in, c_out = w.shape
    feats = x.features
    n_in, n_out = len(feats), len(kmap.out_coords)
    x_pad = np.concatenate([feats, np.zeros((1, c_in))], axis=0)
    cols = x_pad[kmap.out_nbr].reshape(n_out, taps * c_in)
    out = Variable(cols @ w.reshape(taps * c_in, c_out))

    if tape is not None:
        def backward(g):
            gw = (cols.T @ g).reshape(w.shape)
            gx = None
            if x.feats.requires_grad:
                g_pad = np.concatenate([g, np.zeros((1, c_out))], axis=0)
                gcols = g_pad[kmap.in_nbr].reshape(n_in, taps * c_out)
                gx = gcols @ w.transpose(0, 2, 1).reshape(taps * c_out, c_in)
            return gx, gw

        tape.record([x.feats, weight], out, backward, "conv")
    return SparseTensor3D(kmap.out_coords, out, out_stride, check=False)


def sparse_conv(x: SparseTensor3D, weight: Parameter, kernel_size: int, stride_factor: int = 1,
                tape: Tape | None = None) -> SparseTensor3D:
    """Sparse convolution with weight layout ``(kernel_size**3, c_in, c_out)``.

    With ``stride_factor=1`` the output lives on the input coordinates; with
    ``stride_factor=2`` (``kernel_size=2``) each output cell gathers its 2x2x2
    children, one kernel tap per child.
    """
    w = weight.value
    if w.ndim != 3 or w.shape[0] != kernel_size ** 3 or w.shape[1] != x.channels:
        raise ShapeMismatch(
            f"weight {w.shape} incompatible with kernel {kernel_size} and {x.channels} input channels")
    if stride_factor == 1:
        if kernel_size % 2 == 0:
            raise ShapeMismatch("stride-1 convolution needs an odd kernel size")
        kmap = conv_map(x, kernel_size)
    elif stride_factor == 2:
        if kernel_size != 2:
            raise ShapeMismatch("stride-2 convolution uses a 2x2x2 kernel")
        kmap = down_map(x)
    else:
        raise ValueError("stride_factor must be 1 or 2")
    if np.any(x.coords % x.stride):
        raise StrideViolation("input coordinates are off the stride lattice")
    return _apply_map(x, weight, kmap, x.stride * stride_factor, tape)


def sparse_transposed_conv(x: SparseTensor3D, weight: Parameter,
                           tape: Tape | None = None) -> SparseTensor3D:
    """Stride-2 transposed convolution: every voxel emits its 8 children."""
    if x.stride < 2:
        raise StrideViolation("transposed convolution needs input stride >= 2")
    w = weight.value
    if w.ndim != 3 or w.shape[0] != 8 or w.shape[1] != x.channels:
        raise ShapeMismatch(f"weight {w.shape} incompatible with 2x2x2 kernel and {x.channels} channels")
    kmap = up_map(x)
    c_in, c_out = w.shape[1], w.shape[2]
    feats = x.features
    n_in = len(feats)
    perm = kmap.child_perm
    # every child has exactly one parent, so compute all 8 taps per parent and permute rows
    w_cat = w.transpose(1, 0, 2).reshape(c_in, 8 * c_out)
    out = Variable((feats @ w_cat).reshape(n_in * 8, c_out)[perm])

    if tape is not None:
        def backward(g):
            g_all = np.empty((n_in * 8, c_out))
            g_all[perm] = g
            g_all = g_all.reshape(n_in, 8 * c_out)
            gw = (feats.T @ g_all).reshape(c_in, 8, c_out).transpose(1, 0, 2)
            gx = g_all @ w_cat.T if x.feats.requires_grad else None
            return gx, gw

        tape.record([x.feats, weight], out, backward, "transposed_conv")
    return SparseTensor3D(kmap.out_coords, out, x.stride // 2, check=False)


def sparse_add(a: SparseTensor3D, b: SparseTensor3D, tape: Tape | None = None) -> SparseTensor3D:
    """Union of coordinate sets; features summed where both operands are active."""
    if a.channels != b.channels:
        raise ChannelMismatch(f"{a.channels} != {b.channels}")
    if a.stride != b.stride:
        raise StrideMismatch(f"{a.stride} != {b.stride}")
    keys = np.union1d(a.keys, b.keys)
    ia = np.searchsorted(keys, a.keys)
    ib = np.searchsorted(keys, b.keys)
    coords = np.empty((len(keys), 3), dtype=np.int64)
    coords[ia] = a.coords
    coords[ib] = b.coords
    out_val = np.zeros((len(keys), a.channels))
    out_val[ia] += a.features
    out_val[ib] += b.features
    out = Variable(out_val)
    if tape is not None:
        tape.record([a.feats, b.feats], out, lambda g: (g[ia], g[ib]), "add")
    res = SparseTensor3D(coords, out, a.stride, check=False)
    res._keys = keys
    return res


def relu(x: SparseTensor3D, tape: Tape | None = None) -> SparseTensor3D:
    v = x.features
    mask = v > 0
    out = Variable(np.where(mask, v, 0.0))
    if tape is not None:
        tape.record([x.feats], out, lambda g: (g * mask,), "relu")
    res = SparseTensor3D(x.coords, out, x.stride, check=False)
    res._keys = x._keys
    return res


@dataclass(eq=False)
class BatchNorm:
    """Affine parameters and running statistics of one batch-norm layer."""

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, name: str, channels: int) -> "BatchNorm":
        return cls(Parameter(f"{name}.gamma", np.ones(channels)),
                   Parameter(f"{name}.beta", np.zeros(channels)),
                   np.zeros(channels), np.ones(channels))


def batch_norm(x: SparseTensor3D, bn: BatchNorm, mode: str = "train", update_stats: bool = True,
               tape: Tape | None = None) -> SparseTensor3D:
    """Per-channel normalization over all active voxels.

    Train mode normalizes with the batch statistics (and, if ``update_stats``,
    folds them into the running averages); eval mode uses the running averages.
    """
    v = x.features
    c = v.shape[1]
    if bn.gamma.value.shape != (c,) or bn.beta.value.shape != (c,):
        raise ShapeMismatch(f"batch norm expects {bn.gamma.value.shape[0]} channels, got {c}")
    n = len(v)
    if mode == "train":
        if n < 2:
            raise DegenerateBatch(f"batch norm needs >= 2 active voxels in train mode, got {n}")
        mean = v.mean(axis=0)
        centred = v - mean
        var = (centred * centred).mean(axis=0)
        if update_stats:
            m = bn.momentum
            bn.running_mean[:] = (1 - m) * bn.running_mean + m * mean
            bn.running_var[:] = (1 - m) * bn.running_var + m * var * n / (n - 1)
    elif mode == "eval":
        mean, var = bn.running_mean, bn.running_var
        centred = v - mean
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = centred * inv_std
    gamma = bn.gamma.value
    out = Variable(xhat * gamma + bn.beta.value)

    if tape is not None:
        def backward(g):
            dgamma = (g * xhat).sum(axis=0)
            dbeta = g.sum(axis=0)
            dxhat = g * gamma
            if mode == "train":
                dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                dx = dxhat * inv_std
            return dx, dgamma, dbeta

        tape.record([x.feats, bn.gamma, bn.beta], out, backward, "batch_norm")
    res = SparseTensor3D(x.coords, out, x.stride, check=False)
    res._keys = x._keys
    return res


def _channel_conv1d(s: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded cross-correlation along the channel axis."""
    k = len(kernel)
    r = k // 2
    padded = np.concatenate([np.zeros(r), s, np.zeros(r)])
    windows = np.lib.stride_tricks.sliding_window_view(padded, k)
    return windows @ kernel


def eca(x: SparseTensor3D, kernel: Parameter, tape: Tape | None = None) -> SparseTensor3D:
    """Efficient channel attention: gate channels by sigmoid(conv1d(channel means))."""
    kv = kernel.value
    if kv.ndim != 1 or len(kv) % 2 == 0:
        raise ShapeMismatch("ECA kernel must be a 1D filter of odd length")
    v = x.features
    n, c = v.shape
    s = v.mean(axis=0)
    a = expit(_channel_conv1d(s, kv))
    out = Variable(v * a)

    if tape is not None:
        def backward(g):
            k = len(kv)
            r = k // 2
            gz = (g * v).sum(axis=0) * a * (1 - a)
            s_pad = np.concatenate([np.zeros(r), s, np.zeros(r)])
            gk = np.lib.stride_tricks.sliding_window_view(s_pad, k).T @ gz
            # adjoint of the zero-padded correlation is a correlation with the flipped kernel
            gs = _channel_conv1d(gz, kv[::-1])
            gx = g * a + gs / n
            return gx, gk

        tape.record([x.feats, kernel], out, backward, "eca")
    res = SparseTensor3D(x.coords, out, x.stride, check=False)
    res._keys = x._keys
    return res


@dataclass(eq=False)
class GeMParams:
    p: Parameter = field(default_factory=lambda: Parameter("gem.p", np.array([3.0])))
    eps: float = 1e-6


def gem_pool(x: SparseTensor3D, params: GeMParams, tape: Tape | None = None) -> Variable:
    """Generalized-mean pooling over voxels: ``(mean max(f, eps)^p)^(1/p)`` per channel."""
    v = x.features
    if len(v) == 0:
        raise EmptyTensor("cannot pool an empty tensor")
    p = float(params.p.value[0])
    mask = v > params.eps
    xc = np.where(mask, v, params.eps)
    log_xc = np.log(xc)
    xp = np.exp(p * log_xc)
    m = xp.mean(axis=0)
    y = m ** (1.0 / p)
    out = Variable(y)

    if tape is not None:
        n = len(v)

        def backward(g):
            gx = (g * m ** (1.0 / p - 1.0) / n) * (xp / xc) * mask
            dy_dp = y * (-np.log(m) / p ** 2 + (xp * log_xc).mean(axis=0) / (p * m))
            return gx, np.array([np.dot(g, dy_dp)])

        tape.record([x.feats, params.p], out, backward, "gem")
    return out
