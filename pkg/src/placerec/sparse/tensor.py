"""Sparse 3D tensors and the coordinate maps that connect them."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import StrideViolation
from .autodiff import Variable

_OFFSET = 1 << 20
_BITS = 21
_IDX = np.int32
# two passes over a batch (stage 1, stage 3) should hit; ~12 maps per cloud
_CACHE_SIZE = 1024


def pack_keys(coords: np.ndarray) -> np.ndarray:
    """Encode integer triples as int64 keys whose order is lexicographic order."""
    c = np.asarray(coords, dtype=np.int64) + _OFFSET
    return (c[:, 0] << (2 * _BITS)) | (c[:, 1] << _BITS) | c[:, 2]


def _offset_key(delta: np.ndarray) -> np.ndarray:
    d = np.asarray(delta, dtype=np.int64)
    return (d[..., 0] << (2 * _BITS)) + (d[..., 1] << _BITS) + d[..., 2]


def sort_coords(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return c[np.argsort(pack_keys(c), kind="stable")]


class SparseTensor3D:
    """Features attached to a sorted set of unique voxel coordinates on a stride lattice."""

    __slots__ = ("coords", "feats", "stride", "_keys")

    def __init__(self, coords, feats, stride: int = 1, *, check: bool = True):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if not isinstance(feats, Variable):
            feats = Variable(np.asarray(feats, dtype=np.float64))
        if check:
            if stride < 1 or stride & (stride - 1):
                raise ValueError(f"stride must be a positive power of two, got {stride}")
            if feats.value.ndim != 2 or len(feats.value) != len(coords):
                raise ValueError("features must be a (n_voxels, channels) matrix")
            if np.any(coords % stride):
                raise StrideViolation(f"coordinates not on the stride-{stride} lattice")
            keys = pack_keys(coords)
            if len(keys) > 1 and np.any(np.diff(keys) <= 0):
                order = np.argsort(keys, kind="stable")
                keys = keys[order]
                if np.any(np.diff(keys) == 0):
                    raise ValueError("duplicate coordinates")
                coords = coords[order]
                feats = Variable(feats.value[order], feats.requires_grad)
            self._keys = keys
        else:
            self._keys = None
        coords.setflags(write=False)
        self.coords = coords
        self.feats = feats
        self.stride = int(stride)

    @property
    def keys(self) -> np.ndarray:
        if self._keys is None:
            self._keys = pack_keys(self.coords)
        return self._keys

    @property
    def features(self) -> np.ndarray:
        return self.feats.value

    @property
    def channels(self) -> int:
        return self.feats.value.shape[1]

    def __len__(self):
        return len(self.coords)

    def __repr__(self):
        return f"SparseTensor3D(n={len(self)}, channels={self.channels}, stride={self.stride})"


@dataclass(frozen=True, eq=False)
class KernelMap:
    """Per-tap pairing between input and output voxels.

    ``out_nbr[o, t]`` is the input row feeding output ``o`` through tap ``t``
    (``n_in`` when absent); ``in_nbr[i, t]`` is the output row fed by input
    ``i`` through tap ``t`` (``n_out`` when absent).  Each tap is a partial
    bijection, which makes the backward pass another gather.
    """

    out_coords: np.ndarray
    out_nbr: np.ndarray
    in_nbr: np.ndarray
    # transposed maps only: output row o is child ``child_perm[o] % 8`` of parent ``child_perm[o] // 8``
    child_perm: np.ndarray | None = None

    @property
    def n_taps(self) -> int:
        return self.out_nbr.shape[1]


def kernel_offsets(kernel_size: int) -> np.ndarray:
    """Offsets of a cubic kernel in tap order (x slowest).  Odd sizes are centred."""
    if kernel_size % 2:
        r = kernel_size // 2
        rng = np.arange(-r, r + 1)
    else:
        rng = np.arange(kernel_size)
    g = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1)
    return g.reshape(-1, 3).astype(np.int64)


def _lookup(keys: np.ndarray, query: np.ndarray, missing: int) -> np.ndarray:
    pos = np.searchsorted(keys, query)
    pos_c = np.minimum(pos, len(keys) - 1)
    return np.where(keys[pos_c] == query, pos_c, missing).astype(_IDX)


@lru_cache(maxsize=_CACHE_SIZE)
def _conv_map(coords_bytes: bytes, stride: int, kernel_size: int) -> KernelMap:
    coords = np.frombuffer(coords_bytes, dtype=np.int64).reshape(-1, 3)
    n = len(coords)
    keys = pack_keys(coords)
    offs = _offset_key(kernel_offsets(kernel_size) * stride)
    out_nbr = _lookup(keys, keys[:, None] + offs[None, :], n)
    # centred odd kernels are point-symmetric: tap t and tap T-1-t are opposite offsets
    in_nbr = out_nbr[:, ::-1]
    return KernelMap(coords, out_nbr, in_nbr)


@lru_cache(maxsize=_CACHE_SIZE)
def _down_map(coords_bytes: bytes, stride: int) -> KernelMap:
    coords = np.frombuffer(coords_bytes, dtype=np.int64).reshape(-1, 3)
    n = len(coords)
    cell = 2 * stride
    parents = np.floor_divide(coords, cell) * cell
    pkeys = pack_keys(parents)
    ukeys, first, inverse = np.unique(pkeys, return_index=True, return_inverse=True)
    out_coords = parents[first]
    delta = (coords - parents) // stride
    tap = delta[:, 0] * 4 + delta[:, 1] * 2 + delta[:, 2]
    n_out = len(ukeys)
    out_nbr = np.full((n_out, 8), n, dtype=_IDX)
    out_nbr[inverse, tap] = np.arange(n)
    in_nbr = np.full((n, 8), n_out, dtype=_IDX)
    in_nbr[np.arange(n), tap] = inverse
    return KernelMap(out_coords, out_nbr, in_nbr)


@lru_cache(maxsize=_CACHE_SIZE)
def _up_map(coords_bytes: bytes, stride: int) -> KernelMap:
    coords = np.frombuffer(coords_bytes, dtype=np.int64).reshape(-1, 3)
    n = len(coords)
    half = stride // 2
    offs = kernel_offsets(2)
    children = (coords[:, None, :] + offs[None, :, :] * half).reshape(-1, 3)
    parent = np.repeat(np.arange(n), 8)
    tap = np.tile(np.arange(8), n)
    order = np.argsort(pack_keys(children), kind="stable")
    children, parent, tap = children[order], parent[order], tap[order]
    n_out = len(children)
    out_nbr = np.full((n_out, 8), n, dtype=_IDX)
    out_nbr[np.arange(n_out), tap] = parent
    in_nbr = np.full((n, 8), n_out, dtype=_IDX)
    in_nbr[parent, tap] = np.arange(n_out)
    return KernelMap(children, out_nbr, in_nbr, order)


def conv_map(x: SparseTensor3D, kernel_size: int) -> KernelMap:
    return _conv_map(np.ascontiguousarray(x.coords).tobytes(), x.stride, kernel_size)


def down_map(x: SparseTensor3D) -> KernelMap:
    return _down_map(np.ascontiguousarray(x.coords).tobytes(), x.stride)


def up_map(x: SparseTensor3D) -> KernelMap:
    return _up_map(np.ascontiguousarray(x.coords).tobytes(), x.stride)


def clear_map_cache() -> None:
    _conv_map.cache_clear()
    _down_map.cache_clear()
    _up_map.cache_clear()
