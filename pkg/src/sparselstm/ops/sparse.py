"""Differentiable operations on sparse voxel grids."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make
from ..voxel import PatternMismatch, SparseVoxelGrid, pack_coords, unpack_keys


@dataclass
class ConvKernel:
    """Weights indexed ``[offset, in, out]``; offsets in lexicographic order."""

    weights: Tensor
    bias: Tensor
    size: tuple = (3, 3, 3)

    def __post_init__(self):
        if any(s % 2 == 0 or s < 1 for s in self.size):
            raise ValueError(f"kernel extents must be odd, got {self.size}")
        self.weights = ad.as_tensor(self.weights)
        self.bias = ad.as_tensor(self.bias)
        k = int(np.prod(self.size))
        if self.weights.ndim != 3 or self.weights.shape[0] != k:
            raise ValueError(f"weights must be ({k}, F_in, F_out), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[2],):
            raise ValueError("bias width must equal F_out")
        if not np.all(np.isfinite(self.weights.data)):
            raise ValueError("kernel weights must be finite")

    @property
    def in_width(self) -> int:
        return self.weights.shape[1]

    @property
    def out_width(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def init(cls, rng: np.random.Generator, f_in: int, f_out: int, size=(3, 3, 3),
             dtype=np.float32, name: str = "") -> "ConvKernel":
        k = int(np.prod(size))
        limit = np.sqrt(6.0 / (k * f_in + k * f_out))
        w = rng.uniform(-limit, limit, size=(k, f_in, f_out)).astype(dtype)
        return cls(ad.parameter(w, name=f"{name}.weight"),
                   ad.parameter(np.zeros(f_out, dtype=dtype), name=f"{name}.bias"), tuple(size))

    @classmethod
    def identity(cls, width: int, size=(3, 3, 3), dtype=np.float64) -> "ConvKernel":
        k = int(np.prod(size))
        w = np.zeros((k, width, width), dtype=dtype)
        w[k // 2] = np.eye(width)
        return cls(Tensor(w), Tensor(np.zeros(width, dtype=dtype)), tuple(size))

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.bias]


@dataclass
class FeatureNorm:
    """Learnable scale and shift applied after per-grid standardization."""

    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    @classmethod
    def init(cls, width: int, dtype=np.float32, name: str = "") -> "FeatureNorm":
        return cls(ad.parameter(np.ones(width, dtype=dtype), name=f"{name}.gamma"),
                   ad.parameter(np.zeros(width, dtype=dtype), name=f"{name}.beta"))

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


def feature_norm(grid: SparseVoxelGrid, norm: FeatureNorm) -> SparseVoxelGrid:
    """Standardize each channel over the grid's occupied cells."""
    return grid.with_features(ad.standardize(grid.features, norm.gamma, norm.beta, norm.eps))


def kernel_offsets(size=(3, 3, 3)) -> np.ndarray:
    ranges = [range(-(s // 2), s // 2 + 1) for s in size]
    return np.array(list(itertools.product(*ranges)), dtype=np.int32)


def neighbor_map(grid: SparseVoxelGrid, size=(3, 3, 3)) -> np.ndarray:
    """``nbr[v, o]`` = row of cell ``v + offset[o]``, or ``len(grid)`` if empty.

    Cached on the grid's shared pattern.
    """
    key = ("nbr", tuple(size))
    if key not in grid._cache:
        offs = kernel_offsets(size)
        m = len(grid)
        table = grid.keys
        nbr = np.full((m, len(offs)), m, dtype=np.int64)
        if m:
            for j, o in enumerate(offs):
                k = pack_coords(grid.coords.astype(np.int64) + o)
                pos = np.searchsorted(table, k)
                pos_c = np.minimum(pos, m - 1)
                hit = table[pos_c] == k
                nbr[hit, j] = pos_c[hit]
        grid._cache[key] = nbr
    return grid._cache[key]


def rulebook(grid: SparseVoxelGrid, size=(3, 3, 3)) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Per-offset ``(offset, in_rows, out_rows)`` pairs of occupied neighbors.

    Within one offset both row lists are duplicate-free, so scatters need
    no accumulation. Cached on the grid's shared pattern.
    """
    key = ("rules", tuple(size))
    if key not in grid._cache:
        nbr = neighbor_map(grid, size)
        m = len(grid)
        rules = []
        for j in range(nbr.shape[1]):
            out_rows = np.flatnonzero(nbr[:, j] < m)
            if len(out_rows):
                rules.append((j, nbr[out_rows, j], out_rows))
        grid._cache[key] = rules
    return grid._cache[key]


def _block_diagonal(weights: Sequence[np.ndarray]) -> np.ndarray:
    k = weights[0].shape[0]
    cin = sum(w.shape[1] for w in weights)
    cout = sum(w.shape[2] for w in weights)
    full = np.zeros((k, cin, cout), dtype=weights[0].dtype)
    i = o = 0
    for w in weights:
        full[:, i:i + w.shape[1], o:o + w.shape[2]] = w
        i, o = i + w.shape[1], o + w.shape[2]
    return full


def _conv_primitive(x: Tensor, weights: Sequence[Tensor], biases: Sequence[Tensor],
                    rules, m: int) -> Tensor:
    """Rulebook convolution: one matmul per kernel offset over its occupied pairs.

    Grouped kernels are folded into one block-diagonal weight; their
    gradients are read back off the diagonal blocks.
    """
    grouped = len(weights) > 1
    w = _block_diagonal([wt.data for wt in weights]) if grouped else weights[0].data
    b = np.concatenate([bb.data for bb in biases])
    xd = x.data
    out = np.empty((m, w.shape[2]), dtype=xd.dtype)
    out[:] = b
    for j, src, dst in rules:
        out[dst] += xd[src] @ w[j]

    def backward(g):
        need_w = any(wt.requires_grad for wt in weights)
        dw = np.zeros_like(w) if need_w else None
        dx = np.zeros_like(xd) if x.requires_grad else None
        for j, src, dst in rules:
            gd = g[dst]
            if dw is not None:
                dw[j] = xd[src].T @ gd
            if dx is not None:
                dx[src] += gd @ w[j].T
        db = g.sum(axis=0)
        dws, dbs = [], []
        i = o = 0
        for wt in weights:
            ci, co = wt.shape[1], wt.shape[2]
            dws.append(None if dw is None else dw[:, i:i + ci, o:o + co])
            dbs.append(db[o:o + co])
            i, o = i + ci, o + co
        return (dx, *dws, *dbs)

    return make(out, (x, *weights, *biases), backward)


def submanifold_conv(grid: SparseVoxelGrid, k: ConvKernel | Sequence[ConvKernel]) -> SparseVoxelGrid:
    """Convolve only at occupied cells; unoccupied neighbors contribute nothing.

    Passing a list of kernels runs a grouped convolution: the input width is
    split evenly across kernels and their outputs are concatenated.

    Raises:
        ValueError: on input width mismatch.
    """
    kernels = [k] if isinstance(k, ConvKernel) else list(k)
    total_in = sum(kk.in_width for kk in kernels)
    if grid.width != total_in or len({kk.in_width for kk in kernels}) != 1:
        raise ValueError(f"grid width {grid.width} does not match kernel input width {total_in}")
    size = kernels[0].size
    if len(grid) == 0:
        width = sum(kk.out_width for kk in kernels)
        return grid.with_features(np.zeros((0, width), dtype=grid.features.dtype))
    out = _conv_primitive(grid.features, [kk.weights for kk in kernels],
                          [kk.bias for kk in kernels], rulebook(grid, size), len(grid))
    return grid.with_features(out)


@dataclass
class PoolMapping:
    stride: tuple
    parent: np.ndarray
    argmax: np.ndarray
    fine: SparseVoxelGrid
    coarse_coords: np.ndarray


def _coarse_pattern(grid: SparseVoxelGrid, stride) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(stride, dtype=np.int64).reshape(3)
    key = ("pool", tuple(s))
    if key not in grid._cache:
        parents = np.floor_divide(grid.coords.astype(np.int64), s)
        pk = pack_coords(parents)
        ukeys, inv = np.unique(pk, return_inverse=True)
        grid._cache[key] = (ukeys, inv.reshape(-1), {"keys": ukeys})
    return grid._cache[key]


def max_pool(grid: SparseVoxelGrid, stride=(2, 2, 2)):
    """Per-channel max over each occupied stride block.

    Ties go to the lexicographically lowest fine cell, which is also where
    the gradient is routed.
    """
    stride = tuple(int(s) for s in np.broadcast_to(np.asarray(stride), (3,)))
    if any(s < 1 for s in stride):
        raise ValueError("pool stride must be >= 1")
    ukeys, parent, coarse_cache = _coarse_pattern(grid, stride)
    m, c = grid.features.shape
    x = grid.features
    mc = len(ukeys)
    coarse_coords = unpack_keys(ukeys)
    if m == 0:
        coarse = SparseVoxelGrid(grid.voxel_size * stride, grid.origin, coarse_coords,
                                 np.zeros((0, c), dtype=x.dtype), coarse_cache)
        return coarse, PoolMapping(stride, parent, np.zeros((0, c), np.int64), grid, coarse_coords)
    order = np.argsort(parent, kind="stable")
    psorted = parent[order]
    starts = np.flatnonzero(np.r_[True, psorted[1:] != psorted[:-1]])
    vals = x.data[order]
    maxv = np.maximum.reduceat(vals, starts, axis=0)
    eq = vals == maxv[psorted]
    pos = np.where(eq, np.arange(m)[:, None], m)
    first = np.minimum.reduceat(pos, starts, axis=0)
    argmax = order[first]  # (mc, c) fine row per coarse cell and channel
    cols = np.broadcast_to(np.arange(c), (mc, c))

    def backward(g):
        dx = np.zeros((m, c), dtype=g.dtype)
        dx[argmax, cols] = g
        return (dx,)

    out = make(maxv, (x,), backward)
    coarse = SparseVoxelGrid(grid.voxel_size * np.asarray(stride), grid.origin, coarse_coords,
                             out, coarse_cache)
    return coarse, PoolMapping(stride, parent, argmax, grid, coarse_coords)


def unpool(grid_coarse: SparseVoxelGrid, mapping: PoolMapping,
           target_pattern: SparseVoxelGrid) -> SparseVoxelGrid:
    """Copy each coarse feature to every fine child in ``target_pattern``."""
    if not target_pattern.same_pattern(mapping.fine):
        raise PatternMismatch("unpool target does not match the pooled grid")
    if grid_coarse.coords.shape != mapping.coarse_coords.shape or not np.all(
            grid_coarse.coords == mapping.coarse_coords):
        raise PatternMismatch("coarse grid does not match the pool mapping")
    return target_pattern.with_features(ad.gather_rows(grid_coarse.features, mapping.parent))


def concat(grid_a: SparseVoxelGrid, grid_b: SparseVoxelGrid) -> SparseVoxelGrid:
    if not grid_a.same_pattern(grid_b):
        raise PatternMismatch("concat needs identical sparsity patterns")
    return grid_a.with_features(ad.concat([grid_a.features, grid_b.features], axis=1))


def slice_features(grid: SparseVoxelGrid, start: int, stop: int) -> SparseVoxelGrid:
    return grid.with_features(ad.getitem(grid.features, (slice(None), slice(start, stop))))


_POINTWISE = {"sigmoid": ad.sigmoid, "tanh": ad.tanh, "relu": ad.relu}


def pointwise(grid: SparseVoxelGrid, fn: str) -> SparseVoxelGrid:
    try:
        f = _POINTWISE[fn]
    except KeyError:
        raise ValueError(f"unknown pointwise function {fn!r}") from None
    return grid.with_features(f(grid.features))


def densify(grid: SparseVoxelGrid, lo=None, shape=None) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(X, Y, Z, F)`` array plus occupancy mask; used by oracles and plots."""
    coords = grid.coords
    lo = coords.min(axis=0) if lo is None else np.asarray(lo)
    shape = coords.max(axis=0) - lo + 1 if shape is None else np.asarray(shape)
    dense = np.zeros(tuple(shape) + (grid.width,), dtype=grid.features.dtype)
    mask = np.zeros(tuple(shape), dtype=bool)
    idx = tuple((coords - lo).T)
    dense[idx] = grid.features.data
    mask[idx] = True
    return dense, mask
