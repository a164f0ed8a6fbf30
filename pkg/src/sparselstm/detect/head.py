"""Per-voxel box proposals and weighted KNN propagation between them."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from ..ops import autodiff as ad
from ..ops.autodiff import Tensor
from ..ops.sparse import ConvKernel, submanifold_conv, pointwise
from ..voxel import SparseVoxelGrid, VoxelMapping, devoxelize
from .boxes import Box

# attribute name -> raw output channels
ATTRIBUTES = (("offset", 3), ("size", 3), ("yaw", 2), ("objectness", 1), ("weight", 1))


@dataclass
class HeadConfig:
    hidden_width: int = 64
    knn: int = 8
    nms_iou: float = 0.3
    fps_samples: int = 512
    score_floor: float = 0.3
    size_prior: tuple = (4.5, 2.0, 1.7)


@dataclass(frozen=True)
class BoxProposal:
    box: Box
    objectness: float
    propagation_weight: float
    point_index: int


@dataclass
class Proposals:
    """Per-point proposals as parallel arrays (rows align with ``points``)."""

    centers: Tensor
    sizes: Tensor
    rot: Tensor  # (N, 2) unit (cos, sin)
    logits: Tensor  # (N,)
    weights: Tensor  # (N,) >= 0
    point_index: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.point_index is None:
            self.point_index = np.arange(len(self.centers.data))

    def __len__(self):
        return len(self.centers.data)

    @property
    def objectness(self) -> np.ndarray:
        x = self.logits.data
        return 0.5 * (1.0 + np.tanh(0.5 * x))

    @property
    def yaw(self) -> np.ndarray:
        return np.arctan2(self.rot.data[:, 1], self.rot.data[:, 0])

    def boxes(self) -> np.ndarray:
        return np.concatenate([self.centers.data, self.sizes.data, self.yaw[:, None]],
                              axis=1).astype(np.float64)

    def select(self, index) -> "Proposals":
        index = np.asarray(index, dtype=np.int64)
        return Proposals(ad.gather_rows(self.centers, index), ad.gather_rows(self.sizes, index),
                         ad.gather_rows(self.rot, index), ad.gather_rows(self.logits, index),
                         ad.gather_rows(self.weights, index), self.point_index[index])

    def to_list(self) -> list[BoxProposal]:
        boxes, obj, w = self.boxes(), self.objectness, self.weights.data
        return [BoxProposal(Box.from_array(b), float(o), float(ww), int(i))
                for b, o, ww, i in zip(boxes, obj, w, self.point_index)]

    @classmethod
    def from_boxes(cls, boxes, objectness=None, weights=None, dtype=np.float64) -> "Proposals":
        """Constant proposals from a ``(N, 7)`` array (tests, tracking)."""
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
        n = len(b)
        obj = np.full(n, 0.5) if objectness is None else np.clip(np.asarray(objectness, float), 1e-12, 1 - 1e-12)
        logits = np.log(obj) - np.log1p(-obj)
        w = np.ones(n) if weights is None else np.asarray(weights, float)
        rot = np.stack([np.cos(b[:, 6]), np.sin(b[:, 6])], axis=1)
        return cls(Tensor(b[:, :3].astype(dtype)), Tensor(b[:, 3:6].astype(dtype)),
                   Tensor(rot.astype(dtype)), Tensor(logits.astype(dtype)), Tensor(w.astype(dtype)))


class DetectionHead:
    """Three submanifold conv layers per attribute.

    The five first layers read the same input, so they are evaluated as one
    convolution with stacked outputs; layers two and three are grouped so each
    attribute keeps its own weights.
    """

    def __init__(self, in_width: int, cfg: HeadConfig, rng: np.random.Generator,
                 dtype=np.float32, prefix: str = "head"):
        self.cfg = cfg
        h = cfg.hidden_width
        n = len(ATTRIBUTES)
        self.layer1 = ConvKernel.init(rng, in_width, n * h, dtype=dtype, name=f"{prefix}.layer1")
        self.layer2 = [ConvKernel.init(rng, h, h, dtype=dtype, name=f"{prefix}.{a}.layer2")
                       for a, _ in ATTRIBUTES]
        self.layer3 = [ConvKernel.init(rng, h, w, dtype=dtype, name=f"{prefix}.{a}.layer3")
                       for a, w in ATTRIBUTES]
        self.size_prior = np.asarray(cfg.size_prior, dtype=dtype)

    def kernels(self) -> list[ConvKernel]:
        return [self.layer1, *self.layer2, *self.layer3]

    def voxel_outputs(self, grid: SparseVoxelGrid) -> SparseVoxelGrid:
        x = pointwise(submanifold_conv(grid, self.layer1), "relu")
        x = pointwise(submanifold_conv(x, self.layer2), "relu")
        return submanifold_conv(x, self.layer3)


def merge_mappings(mappings: list[VoxelMapping]) -> VoxelMapping:
    return VoxelMapping(np.concatenate([m.point_to_voxel for m in mappings]),
                        np.concatenate([m.intra_voxel_offset for m in mappings]),
                        np.concatenate([m.cell_index for m in mappings]))


def propose(h_grid: SparseVoxelGrid, head: DetectionHead, points: np.ndarray,
            mapping: VoxelMapping) -> Proposals:
    """Per-voxel attributes devoxelized to per-point proposals.

    Each point predicts the box center as its own position plus the offset
    its voxel regressed, so points sharing a voxel keep their relative
    positions within it. Sizes go through ``exp`` times the size prior and
    the yaw channel pair is normalized onto the unit circle.
    """
    dtype = h_grid.features.dtype
    if len(mapping) == 0 or len(h_grid) == 0:
        empty = lambda w: Tensor(np.zeros((0, w), dtype=dtype))
        return Proposals(empty(3), empty(3), empty(2), Tensor(np.zeros(0, dtype)),
                         Tensor(np.zeros(0, dtype)))
    raw = devoxelize(head.voxel_outputs(h_grid), mapping)
    cols = np.cumsum([0] + [w for _, w in ATTRIBUTES])
    part = {name: ad.getitem(raw, (slice(None), slice(cols[i], cols[i + 1])))
            for i, (name, _) in enumerate(ATTRIBUTES)}
    centers = part["offset"] + Tensor(np.asarray(points, dtype=dtype))
    sizes = ad.exp(part["size"]) * Tensor(head.size_prior.astype(dtype))
    yaw_raw = part["yaw"] + Tensor(np.array([1.0, 0.0], dtype=dtype))
    rot = _normalize_rows(yaw_raw)
    logits = ad.reshape(part["objectness"], (-1,))
    weights = ad.reshape(ad.softplus(part["weight"]), (-1,))
    return Proposals(centers, sizes, rot, logits, weights)


def _normalize_rows(v: Tensor, eps: float = 1e-12) -> Tensor:
    norm = ad.sqrt(ad.tsum(v * v, axis=1, keepdims=True) + eps)
    return v / norm


def knn_indices(centers: np.ndarray, k: int) -> np.ndarray:
    """``(N, k)`` nearest neighbors in center space, self always in column 0."""
    n = len(centers)
    k = min(k, n)
    if k == 1:
        return np.arange(n)[:, None]
    _, idx = cKDTree(centers).query(centers, k=k)
    idx = np.asarray(idx).reshape(n, k)
    own = np.arange(n)
    for i in np.flatnonzero(idx[:, 0] != own):
        row = [own[i]] + [j for j in idx[i] if j != own[i]]
        idx[i] = row[:k]
    return idx


def graph_propagate(proposals: Proposals, k: int = 8) -> Proposals:
    """Replace center, size and yaw with a weight-normalized neighbor average.

    Neighbors are the ``k`` nearest predicted centers (including the point
    itself); yaw is averaged as a (cos, sin) vector and renormalized. The
    neighbor search itself is treated as constant for differentiation.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(proposals)
    if n == 0 or k == 1:
        return replace(proposals)
    idx = knn_indices(proposals.centers.data.astype(np.float64), k)
    w = ad.gather_rows(proposals.weights, idx)  # (N, k)
    wsum = ad.tsum(w, axis=1, keepdims=True) + 1e-30
    w3 = ad.reshape(w, (n, idx.shape[1], 1))

    def avg(attr: Tensor) -> Tensor:
        nb = ad.gather_rows(attr, idx)  # (N, k, D)
        return ad.tsum(nb * w3, axis=1) / wsum

    rot = _normalize_rows(avg(proposals.rot))
    return Proposals(avg(proposals.centers), avg(proposals.sizes), rot, proposals.logits,
                     proposals.weights, proposals.point_index)
