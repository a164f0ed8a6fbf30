"""Corner loss, dynamic classification loss, total objective and momentum SGD."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .detect.boxes import Box, as_box_array, corners_tensor, iou_3d_matrix, points_in_boxes
from .detect.head import Proposals
from .ops import autodiff as ad
from .ops.autodiff import Tensor

HUBER_DELTA = 1.0


@dataclass
class LossWeights:
    corner_pre: float = 1.0
    corner_post: float = 1.0
    classification: float = 1.0


@dataclass
class LossReport:
    corner_loss_pre: float
    corner_loss_post: float
    class_loss: float
    total: float
    positives: int
    foreground: int = 0
    tensor: Tensor | None = field(default=None, repr=False)

    def log_line(self, step: int, lr: float) -> str:
        return (f"{step}, {lr:.6g}, {self.corner_loss_pre:.6f}, {self.corner_loss_post:.6f}, "
                f"{self.class_loss:.6f}, {self.total:.6f}, {self.positives}")


def _gt_corner_sets(gt: np.ndarray, dtype) -> tuple[np.ndarray, np.ndarray]:
    c, s = np.cos(gt[:, 6]), np.sin(gt[:, 6])
    a = corners_tensor(gt[:, :3], gt[:, 3:6], c, s).data.astype(dtype)
    b = corners_tensor(gt[:, :3], gt[:, 3:6], -c, -s).data.astype(dtype)
    return a, b


def corner_loss_batch(centers, sizes, rot, gt: np.ndarray, delta: float = HUBER_DELTA) -> Tensor:
    """Per-row corner loss ``(N,)`` against matched gt rows (``(N, 7)``).

    Each row is the smaller of the losses against the gt box and against the
    gt box turned by pi, so heading direction is not penalized.
    """
    centers = ad.as_tensor(centers)
    rot = ad.as_tensor(rot)
    pred = corners_tensor(centers, sizes, ad.getitem(rot, (slice(None), 0)),
                          ad.getitem(rot, (slice(None), 1)))
    gta, gtb = _gt_corner_sets(np.asarray(gt, dtype=np.float64).reshape(-1, 7), centers.dtype)
    la = ad.tsum(ad.huber_norm(pred - Tensor(gta), delta), axis=1)
    lb = ad.tsum(ad.huber_norm(pred - Tensor(gtb), delta), axis=1)
    return ad.minimum(la, lb)


def corner_loss(pred: Box, gt: Box, delta: float = HUBER_DELTA) -> float:
    """Sum over the 8 corners of Huber(corner distance), minimized over gt yaw flip."""
    p = as_box_array(pred)
    out = corner_loss_batch(p[:, :3], p[:, 3:6], np.stack([np.cos(p[:, 6]), np.sin(p[:, 6])], 1),
                            as_box_array(gt), delta)
    return float(out.data[0])


def assign_dynamic_labels(boxes, gt_boxes, iou_pos: float = 0.7) -> tuple[np.ndarray, np.ndarray]:
    """Positive iff the best IoU over gt exceeds ``iou_pos``.

    Returns ``(labels, matched_gt)``; ``matched_gt`` is the argmax gt index
    (-1 when there is no gt).
    """
    b = boxes.boxes() if isinstance(boxes, Proposals) else as_box_array(boxes)
    g = as_box_array(gt_boxes)
    if len(g) == 0 or len(b) == 0:
        return np.zeros(len(b), dtype=bool), np.full(len(b), -1)
    iou = iou_3d_matrix(b, g)
    best = iou.argmax(axis=1)
    return iou[np.arange(len(b)), best] > iou_pos, best


def classification_loss(logits, labels) -> Tensor:
    """Mean binary cross-entropy on objectness logits (0 for no proposals)."""
    logits = ad.as_tensor(logits)
    if logits.data.size == 0:
        return Tensor(np.zeros((), dtype=logits.dtype if logits.dtype.kind == "f" else np.float64))
    return ad.mean(ad.bce_with_logits(logits, labels))


def foreground_assignment(points: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """Index of the gt box containing each point, -1 for background."""
    inside = points_in_boxes(points, gt_boxes)
    if inside.shape[1] == 0:
        return np.full(len(points), -1)
    return np.where(inside.any(axis=1), inside.argmax(axis=1), -1)


def total_loss(pre: Proposals, post: Proposals, points: np.ndarray, gt_boxes,
               weights: LossWeights | None = None, iou_pos: float = 0.7) -> LossReport:
    """Weighted sum of pre/post-propagation corner losses and the class loss.

    Corner terms average over proposals whose point lies inside a gt box
    (each regressing that box) and vanish when there are none.
    Classification labels are recomputed from the post-propagation boxes.
    """
    weights = weights or LossWeights()
    gt = as_box_array(gt_boxes)
    dtype = pre.centers.dtype
    zero = Tensor(np.zeros((), dtype=dtype))
    fg = foreground_assignment(points, gt)
    fg_idx = np.flatnonzero(fg >= 0)
    corner_terms = []
    for props in (pre, post):
        if len(fg_idx) == 0:
            corner_terms.append(zero)
            continue
        sel = props.select(fg_idx)
        per = corner_loss_batch(sel.centers, sel.sizes, sel.rot, gt[fg[fg_idx]])
        corner_terms.append(ad.mean(per))
    labels, _ = assign_dynamic_labels(post, gt, iou_pos)
    cls = classification_loss(post.logits, labels)
    total = (corner_terms[0] * weights.corner_pre + corner_terms[1] * weights.corner_post
             + cls * weights.classification)
    return LossReport(float(corner_terms[0].data), float(corner_terms[1].data), float(cls.data),
                      float(total.data), int(labels.sum()), len(fg_idx), total)


def combine_reports(reports: Sequence[LossReport]) -> LossReport:
    """Sum of per-frame objectives (losses apply in every frame)."""
    total = reports[0].tensor
    for r in reports[1:]:
        total = total + r.tensor
    return LossReport(sum(r.corner_loss_pre for r in reports), sum(r.corner_loss_post for r in reports),
                      sum(r.class_loss for r in reports), float(total.data),
                      sum(r.positives for r in reports), sum(r.foreground for r in reports), total)


# -------------------------------------------------------------- optimizer

@dataclass
class StepSchedule:
    """Piecewise-constant learning rate: ``lr0`` until the first boundary, then ``lr0 * factor[k]``."""

    lr0: float = 0.1
    boundaries: tuple = (25000, 32000, 39000, 46000, 53000)
    factors: tuple = (0.3, 0.1, 0.01, 0.001, 0.0001)

    def __post_init__(self):
        if len(self.boundaries) != len(self.factors):
            raise ValueError("need one factor per boundary")
        if self.lr0 <= 0:
            raise ValueError("learning rate must be positive")

    def __call__(self, step: int) -> float:
        k = int(np.searchsorted(np.asarray(self.boundaries), step, side="right"))
        return self.lr0 if k == 0 else self.lr0 * self.factors[k - 1]

    @classmethod
    def scaled(cls, total_steps: int, lr0: float = 0.1, factors=(0.3, 0.1, 0.01, 0.001, 0.0001),
               start_fraction: float = 25 / 60, interval_fraction: float = 7 / 60) -> "StepSchedule":
        """Decay start and interval as fractions of the run length."""
        start = max(1, int(round(total_steps * start_fraction)))
        every = max(1, int(round(total_steps * interval_fraction)))
        return cls(lr0, tuple(start + i * every for i in range(len(factors))), tuple(factors))


@dataclass
class OptimizerState:
    step: int = 0
    learning_rate: float = 0.1
    momentum: float = 0.9
    buffers: dict = field(default_factory=dict)


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], opt: OptimizerState,
             schedule: StepSchedule | None = None, clip_norm: float | None = None) -> OptimizerState:
    """Momentum SGD in place: ``v = mu * v + g``, ``p -= lr * v``.

    With ``clip_norm`` the gradients are first rescaled so their global
    L2 norm does not exceed it.
    """
    lr = schedule(opt.step) if schedule is not None else opt.learning_rate
    scale = 1.0
    if clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        if norm > clip_norm:
            scale = clip_norm / norm
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
        v = opt.buffers.get(name)
        v = g * scale if v is None else opt.momentum * v + g * scale
        opt.buffers[name] = v.astype(p.data.dtype, copy=False)
        p.data -= (lr * opt.buffers[name]).astype(p.data.dtype)
    opt.learning_rate = lr
    opt.step += 1
    return opt
