"""Yaw-only oriented boxes: corners, point membership and 3D IoU.

Box arrays are ``(N, 7)`` rows of ``x, y, z, length, width, height, yaw``;
length runs along the box's local +x axis.

Corner ordering: index ``4*a + 2*b + c`` holds the corner with local signs
``(sx, sy, sz) = (1-2a, 1-2b, 1-2c)``, i.e. ``(+,+,+), (+,+,-), (+,-,+), ...``,
scaled by half the size and rotated by yaw about +z.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..ops import autodiff as ad
from ..ops.autodiff import Tensor

CORNER_SIGNS = np.array(list(itertools.product([1.0, -1.0], repeat=3)))


def wrap_angle(a):
    """Wrap radians to [-pi, pi); values already in range pass through unchanged."""
    a = np.asarray(a, dtype=np.float64)
    inside = (a >= -np.pi) & (a < np.pi)
    return np.where(inside, a, (a + np.pi) % (2.0 * np.pi) - np.pi)


@dataclass(frozen=True)
class Box:
    center: tuple
    size: tuple
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("box center and size must be 3-vectors")
        if any(s < 0 for s in self.size):
            raise ValueError(f"box size must be non-negative, got {self.size}")

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw])

    @classmethod
    def from_array(cls, row) -> "Box":
        row = np.asarray(row, dtype=np.float64)
        return cls(row[:3], row[3:6], row[6])

    def rotation_matrix(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, Box):
        return boxes.as_array()[None]
    if len(boxes) and isinstance(boxes[0], Box):
        return np.stack([b.as_array() for b in boxes])
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 7)


def corners_tensor(center, size, cos, sin) -> Tensor:
    """Differentiable ``(N, 8, 3)`` corners from ``(N,3)``, ``(N,3)``, ``(N,)``, ``(N,)``."""
    center, size = ad.as_tensor(center), ad.as_tensor(size)
    cos, sin = ad.as_tensor(cos), ad.as_tensor(sin)
    dtype = center.dtype
    sx, sy, sz = (Tensor(CORNER_SIGNS[:, i].astype(dtype) * 0.5) for i in range(3))
    hx = ad.getitem(size, (slice(None), slice(0, 1))) * sx
    hy = ad.getitem(size, (slice(None), slice(1, 2))) * sy
    hz = ad.getitem(size, (slice(None), slice(2, 3))) * sz
    c = ad.reshape(cos, (-1, 1))
    s = ad.reshape(sin, (-1, 1))
    local = ad.stack([c * hx - s * hy, s * hx + c * hy, hz], axis=2)
    return local + ad.reshape(center, (-1, 1, 3))


def box_corners(box: Box | np.ndarray) -> np.ndarray:
    """``(8, 3)`` corners of one box (``(N, 8, 3)`` for a box array)."""
    arr = as_box_array(box)
    out = corners_tensor(arr[:, :3], arr[:, 3:6], np.cos(arr[:, 6]), np.sin(arr[:, 6])).data
    return out[0] if isinstance(box, Box) or np.ndim(box) == 1 else out


def points_in_boxes(points: np.ndarray, boxes) -> np.ndarray:
    """``(N, M)`` membership of points in boxes (closed intervals)."""
    b = as_box_array(boxes)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(b) == 0 or len(p) == 0:
        return np.zeros((len(p), len(b)), dtype=bool)
    d = p[:, None, :] - b[None, :, :3]
    c, s = np.cos(b[:, 6]), np.sin(b[:, 6])
    lx = d[..., 0] * c + d[..., 1] * s
    ly = -d[..., 0] * s + d[..., 1] * c
    half = b[:, 3:6] * 0.5
    return (np.abs(lx) <= half[:, 0]) & (np.abs(ly) <= half[:, 1]) & (np.abs(d[..., 2]) <= half[:, 2])


def bev_polygons(boxes: np.ndarray) -> np.ndarray:
    """Counter-clockwise ``(N, 4, 2)`` footprints."""
    b = as_box_array(boxes)
    sx = np.array([1.0, -1.0, -1.0, 1.0])
    sy = np.array([1.0, 1.0, -1.0, -1.0])
    hx = b[:, 3:4] * 0.5 * sx
    hy = b[:, 4:5] * 0.5 * sy
    c, s = np.cos(b[:, 6:7]), np.sin(b[:, 6:7])
    x = b[:, 0:1] + c * hx - s * hy
    y = b[:, 1:2] + s * hx + c * hy
    return np.stack([x, y], axis=2)


_MAX_VERTS = 8


def _cross(d, v):
    return d[..., 0] * v[..., 1] - d[..., 1] * v[..., 0]


def _clip(poly, cnt, e0, e1):
    """Clip convex polygons by the left half-plane of directed edges e0->e1."""
    p, v = poly.shape[:2]
    idx = np.arange(v)
    valid = idx[None, :] < cnt[:, None]
    nxt = np.where(valid, (idx[None, :] + 1) % np.maximum(cnt[:, None], 1), 0)
    cur = poly
    nx = np.take_along_axis(poly, nxt[..., None], axis=1)
    d = (e1 - e0)[:, None, :]
    sc = _cross(d, cur - e0[:, None, :])
    sn = _cross(d, nx - e0[:, None, :])
    inc, inn = sc >= 0, sn >= 0
    denom = sc - sn
    t = np.where(np.abs(denom) > 1e-300, sc / np.where(denom == 0, 1.0, denom), 0.0)
    inter = cur + t[..., None] * (nx - cur)
    out1 = np.where((inc & inn)[..., None], nx, inter)
    emit1 = valid & (inc | inn)
    emit2 = valid & ~inc & inn
    cand = np.stack([out1, nx], axis=2).reshape(p, 2 * v, 2)
    emit = np.stack([emit1, emit2], axis=2).reshape(p, 2 * v)
    order = np.argsort(~emit, axis=1, kind="stable")[:, :_MAX_VERTS]
    new = np.take_along_axis(cand, order[..., None], axis=1)
    return new, np.minimum(emit.sum(axis=1), _MAX_VERTS)


def _polygon_area(poly, cnt):
    v = poly.shape[1]
    idx = np.arange(v)
    valid = idx[None, :] < cnt[:, None]
    nxt = np.where(valid, (idx[None, :] + 1) % np.maximum(cnt[:, None], 1), 0)
    nx = np.take_along_axis(poly, nxt[..., None], axis=1)
    cr = poly[..., 0] * nx[..., 1] - poly[..., 1] * nx[..., 0]
    return 0.5 * np.abs(np.sum(np.where(valid, cr, 0.0), axis=1))


def bev_intersection(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Footprint intersection area of paired box rows ``a[i]``, ``b[i]``."""
    pa, pb = bev_polygons(a), bev_polygons(b)
    n = len(pa)
    poly = np.zeros((n, _MAX_VERTS, 2))
    poly[:, :4] = pa
    cnt = np.full(n, 4)
    for k in range(4):
        poly, cnt = _clip(poly, cnt, pb[:, k], pb[:, (k + 1) % 4])
    return _polygon_area(poly, cnt)


def iou_3d_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_box_array(a), as_box_array(b)
    if len(a) == 0:
        return np.zeros(0)
    inter_bev = bev_intersection(a, b)
    za0, za1 = a[:, 2] - a[:, 5] / 2, a[:, 2] + a[:, 5] / 2
    zb0, zb1 = b[:, 2] - b[:, 5] / 2, b[:, 2] + b[:, 5] / 2
    dz = np.maximum(0.0, np.minimum(za1, zb1) - np.maximum(za0, zb0))
    inter = inter_bev * dz
    va, vb = np.prod(a[:, 3:6], axis=1), np.prod(b[:, 3:6], axis=1)
    union = va + vb - inter
    ok = (va > 0) & (vb > 0) & (union > 0)
    return np.where(ok, inter / np.where(ok, union, 1.0), 0.0).clip(0.0, 1.0)


def iou_3d_matrix(a, b) -> np.ndarray:
    """``(N, M)`` IoU; pairs whose footprints cannot touch are skipped."""
    a, b = as_box_array(a), as_box_array(b)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    ra = 0.5 * np.hypot(a[:, 3], a[:, 4])
    rb = 0.5 * np.hypot(b[:, 3], b[:, 4])
    dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    za = np.abs(a[:, None, 2] - b[None, :, 2]) <= 0.5 * (a[:, None, 5] + b[None, :, 5])
    ii, jj = np.nonzero((dist <= ra[:, None] + rb[None, :]) & za)
    if len(ii):
        out[ii, jj] = iou_3d_pairs(a[ii], b[jj])
    return out


def box_iou_3d(a: Box, b: Box) -> float:
    """BEV polygon intersection times vertical overlap, over union volume."""
    return float(iou_3d_pairs(as_box_array(a), as_box_array(b))[0])
