"""Point clouds, sparse voxel grids and egomotion transforms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ops.autodiff import Tensor, as_tensor, concat, gather_rows, segment_mean

DEFAULT_VOXEL_SIZE = (0.2, 0.2, 0.2)

# Coordinates are packed into one int64 key (21 bits per axis) for hashing
# and neighbor lookup; the packed order is lexicographic in (x, y, z).
_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
COORD_LIMIT = _KEY_OFFSET


class PatternMismatch(ValueError):
    """Two grids (or a grid and a mapping) disagree on the occupied set."""


def pack_coords(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64)
    if c.size and (c.min() < -COORD_LIMIT or c.max() >= COORD_LIMIT):
        raise ValueError(f"voxel coordinates exceed +/-{COORD_LIMIT}")
    c = c + _KEY_OFFSET
    return (c[:, 0] << (2 * _KEY_BITS)) | (c[:, 1] << _KEY_BITS) | c[:, 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    mask = (1 << _KEY_BITS) - 1
    k = np.asarray(keys, dtype=np.int64)
    out = np.stack([(k >> (2 * _KEY_BITS)) & mask, (k >> _KEY_BITS) & mask, k & mask], axis=1)
    return (out - _KEY_OFFSET).astype(np.int32)


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray
    features: Tensor | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("point positions must be finite")
        object.__setattr__(self, "positions", pos)
        if self.features is not None:
            feats = as_tensor(self.features)
            if feats.ndim != 2 or feats.shape[0] != len(pos):
                raise ValueError(
                    f"features shape {feats.shape} does not match {len(pos)} points")
            object.__setattr__(self, "features", feats)

    def __len__(self):
        return len(self.positions)

    @property
    def num_features(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def select(self, index: np.ndarray) -> "PointCloud":
        index = np.asarray(index, dtype=np.int64)
        feats = None if self.features is None else gather_rows(self.features, index)
        return PointCloud(self.positions[index], feats)


@dataclass(frozen=True, eq=False)
class SparseVoxelGrid:
    """Occupied cells in lexicographic coordinate order with one feature row each."""

    voxel_size: np.ndarray
    origin: np.ndarray
    coords: np.ndarray
    features: Tensor
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "voxel_size", np.asarray(self.voxel_size, dtype=np.float64))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        coords = np.asarray(self.coords, dtype=np.int32).reshape(-1, 3)
        object.__setattr__(self, "coords", coords)
        feats = as_tensor(self.features)
        if feats.ndim == 1 and len(coords) == 0:
            feats = Tensor(feats.data.reshape(0, 0))
        if feats.ndim != 2 or feats.shape[0] != len(coords):
            raise ValueError(f"features shape {feats.shape} does not match {len(coords)} cells")
        object.__setattr__(self, "features", feats)

    @classmethod
    def from_cells(cls, cells: dict, voxel_size=DEFAULT_VOXEL_SIZE, origin=(0.0, 0.0, 0.0)):
        """Build from a ``{(i, j, k): feature_vector}`` mapping."""
        if not cells:
            return cls(voxel_size, origin, np.zeros((0, 3), np.int32), np.zeros((0, 0)))
        coords = np.array(list(cells.keys()), dtype=np.int32)
        feats = np.array([np.asarray(v, dtype=np.float64) for v in cells.values()])
        order = np.argsort(pack_coords(coords))
        return cls(voxel_size, origin, coords[order], feats[order])

    def __len__(self):
        return len(self.coords)

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def keys(self) -> np.ndarray:
        if "keys" not in self._cache:
            self._cache["keys"] = pack_coords(self.coords)
        return self._cache["keys"]

    def with_features(self, features) -> "SparseVoxelGrid":
        """Same sparsity pattern (and cached topology), new features."""
        return SparseVoxelGrid(self.voxel_size, self.origin, self.coords, features, self._cache)

    def same_pattern(self, other: "SparseVoxelGrid") -> bool:
        if self._cache is other._cache:
            return True
        return self.coords.shape == other.coords.shape and bool(np.all(self.coords == other.coords))

    def cell_centers(self) -> np.ndarray:
        return self.origin + (self.coords + 0.5) * self.voxel_size

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index of each coordinate, -1 where unoccupied."""
        keys = pack_coords(np.asarray(coords).reshape(-1, 3))
        table = self.keys
        pos = np.searchsorted(table, keys)
        pos_c = np.minimum(pos, max(len(table) - 1, 0))
        hit = (pos < len(table)) & (table[pos_c] == keys) if len(table) else np.zeros(len(keys), bool)
        return np.where(hit, pos_c, -1)

    def as_dict(self) -> dict:
        return {tuple(int(v) for v in c): f for c, f in zip(self.coords, self.features.data)}


@dataclass(frozen=True)
class VoxelMapping:
    point_to_voxel: np.ndarray
    intra_voxel_offset: np.ndarray
    cell_index: np.ndarray

    def __len__(self):
        return len(self.cell_index)


@dataclass(frozen=True)
class EgoPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose must be finite")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("pose rotation is not a proper rotation matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "EgoPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation) -> "EgoPose":
        c, s = np.cos(yaw), np.sin(yaw)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), translation)

    @classmethod
    def from_matrix(cls, m) -> "EgoPose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        if np.max(np.abs(m[3] - [0, 0, 0, 1])) > 1e-6:
            raise ValueError("pose matrix bottom row must be (0, 0, 0, 1)")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def _cell_coords(positions: np.ndarray, voxel_size: np.ndarray, origin: np.ndarray) -> np.ndarray:
    return np.floor((positions - origin) / voxel_size).astype(np.int64)


def _check_voxel_size(voxel_size) -> np.ndarray:
    vs = np.asarray(voxel_size, dtype=np.float64).reshape(3)
    if np.any(vs <= 0) or not np.all(np.isfinite(vs)):
        raise ValueError(f"voxel size must be positive, got {vs}")
    return vs


def _point_features(pc: PointCloud) -> Tensor:
    xyz = Tensor(pc.positions)
    if pc.features is None:
        return xyz
    feats = pc.features
    if feats.dtype != xyz.dtype:
        xyz = Tensor(pc.positions.astype(feats.dtype))
    return concat([xyz, feats], axis=1)


def voxelize(pc: PointCloud, voxel_size=DEFAULT_VOXEL_SIZE, origin=(0.0, 0.0, 0.0)):
    """Average points (xyz then per-point features) into their floor cells.

    Returns the grid and a mapping that covers every input point.
    """
    grid, mappings = joint_voxelize([pc], voxel_size, origin)
    return grid, mappings[0]


def joint_voxelize(clouds: Sequence[PointCloud], voxel_size=DEFAULT_VOXEL_SIZE,
                   origin=(0.0, 0.0, 0.0)):
    """Voxelize several clouds onto one grid covering the union of their cells.

    Each cloud contributes a block of ``3 + F_i`` columns (mean xyz, mean
    features); cells a cloud does not reach get a zero block.
    """
    if len(clouds) == 0:
        raise ValueError("joint_voxelize needs at least one cloud")
    vs = _check_voxel_size(voxel_size)
    org = np.asarray(origin, dtype=np.float64).reshape(3)
    per_cloud = [_cell_coords(pc.positions, vs, org) for pc in clouds]
    all_keys = [pack_coords(c) for c in per_cloud]
    union = np.unique(np.concatenate(all_keys)) if any(len(k) for k in all_keys) else np.zeros(0, np.int64)
    coords = unpack_keys(union)
    blocks, mappings = [], []
    dtype = np.float64
    for pc in clouds:
        if pc.features is not None:
            dtype = pc.features.dtype
    for pc, cell, keys in zip(clouds, per_cloud, all_keys):
        idx = np.searchsorted(union, keys)
        feats = _point_features(pc)
        if feats.dtype != dtype:
            feats = Tensor(feats.data.astype(dtype)) if not feats.requires_grad else feats
        blocks.append(segment_mean(feats, idx, len(union)))
        offset = pc.positions - (org + cell * vs)
        mappings.append(VoxelMapping(cell.astype(np.int32), offset, idx))
    features = blocks[0] if len(blocks) == 1 else concat(blocks, axis=1)
    return SparseVoxelGrid(vs, org, coords, features), mappings


def devoxelize(grid: SparseVoxelGrid, mapping: VoxelMapping) -> Tensor:
    """Give each mapped point the feature row of its cell.

    Raises:
        PatternMismatch: if the mapping points at a cell the grid lacks.
    """
    if len(mapping) == 0:
        return Tensor(np.zeros((0, grid.width), dtype=grid.features.dtype))
    rows = grid.lookup(mapping.point_to_voxel)
    if np.any(rows < 0):
        raise PatternMismatch("mapping references cells missing from the grid")
    return gather_rows(grid.features, rows)


def transform_points(pc: PointCloud, from_pose: EgoPose, to_pose: EgoPose) -> PointCloud:
    """Re-express points from one sensor frame in another via the shared world frame."""
    world = pc.positions @ from_pose.rotation.T + from_pose.translation
    local = (world - to_pose.translation) @ to_pose.rotation
    return PointCloud(local, pc.features)
