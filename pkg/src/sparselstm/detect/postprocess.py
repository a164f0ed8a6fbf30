"""Farthest point sampling and greedy NMS over proposals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import Box, as_box_array, iou_3d_matrix
from .head import Proposals


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    frame_index: int = 0


def farthest_point_sample(proposals: Proposals, m: int, score_floor: float = 0.0) -> np.ndarray:
    """Indices of ``m`` spread-out proposals among those scoring ``>= score_floor``.

    Starts from the highest-scoring survivor and then repeatedly takes the
    center farthest from everything picked so far (ties: lower index).
    """
    if m < 0:
        raise ValueError("m must be >= 0")
    scores = proposals.objectness
    keep = np.flatnonzero(scores >= score_floor)
    if m >= len(keep):
        return keep
    if m == 0:
        return keep[:0]
    centers = proposals.centers.data[keep].astype(np.float64)
    first = int(np.argmax(scores[keep]))
    picked = [first]
    mind = np.sum((centers - centers[first]) ** 2, axis=1)
    for _ in range(m - 1):
        nxt = int(np.argmax(mind))
        picked.append(nxt)
        mind = np.minimum(mind, np.sum((centers - centers[nxt]) ** 2, axis=1))
    return keep[np.array(picked)]


def nms(proposals: Proposals | np.ndarray, iou_threshold: float = 0.3, scores=None,
        frame_index: int = 0) -> list[Detection]:
    """Greedy suppression in descending score order (ties: lower index first).

    A box survives iff its IoU with every already-kept box is below the
    threshold.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in (0, 1]")
    if isinstance(proposals, Proposals):
        boxes, scores = proposals.boxes(), proposals.objectness
    else:
        boxes = as_box_array(proposals)
        scores = np.asarray(scores, dtype=np.float64)
    keep = nms_indices(boxes, scores, iou_threshold)
    return [Detection(Box.from_array(boxes[i]), float(scores[i]), frame_index) for i in keep]


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    order = np.argsort(-np.asarray(scores), kind="stable")
    if len(order) == 0:
        return []
    iou = iou_3d_matrix(boxes[order], boxes[order])
    suppressed = np.zeros(len(order), dtype=bool)
    kept = []
    for r in range(len(order)):
        if suppressed[r]:
            continue
        kept.append(int(order[r]))
        suppressed |= iou[r] >= iou_threshold
    return kept
