"""Training loop shared by the three input modes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import FrameSequence
from .evaltrack import EvalConfig, evaluate
from .loss import LossWeights, OptimizerState, StepSchedule, combine_reports, sgd_step, total_loss
from .net import DetectorModel, detect, run_sequence
from .ops.autodiff import backward


@dataclass
class TrainConfig:
    steps: int = 2000
    lr0: float = 0.1
    momentum: float = 0.9
    clip_norm: float | None = 5.0
    iou_positive: float = 0.7
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")

    def schedule(self) -> StepSchedule:
        return StepSchedule.scaled(max(self.steps, 1), self.lr0)


@dataclass
class TrainResult:
    log: list
    optimizer: OptimizerState


def sequence_loss(model: DetectorModel, seq: FrameSequence, cfg: TrainConfig):
    """Summed per-frame objective over a clip, frames driven by the model's mode."""
    out = run_sequence(seq.frames, model)
    reports = [total_loss(f.pre, f.post, f.points, seq[i].gt_boxes, cfg.weights, cfg.iou_positive)
               for i, f in enumerate(out.frames)]
    return combine_reports(reports)


def train(model: DetectorModel, sequences: Sequence[FrameSequence], cfg: TrainConfig,
          on_line: Callable[[str], None] | None = None) -> TrainResult:
    """Momentum SGD, one clip per step drawn with a seeded generator.

    Each step yields one ``step, lr, corner_pre, corner_post, class, total,
    positives`` log line, passed to ``on_line`` as it is produced.
    """
    if not sequences:
        raise ValueError("no training sequences")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    schedule = cfg.schedule()
    opt = OptimizerState(learning_rate=cfg.lr0, momentum=cfg.momentum)
    log = []
    for step in range(cfg.steps):
        seq = sequences[int(rng.integers(len(sequences)))]
        report = sequence_loss(model, seq, cfg)
        if not np.isfinite(report.total):
            raise FloatingPointError(f"non-finite loss at step {step}")
        backward(report.tensor)
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        lr = schedule(opt.step)
        sgd_step(params, grads, opt, schedule, cfg.clip_norm)
        for p in params.values():
            p.grad = None
        line = report.log_line(step, lr)
        log.append(line)
        if on_line is not None:
            on_line(line)
    return TrainResult(log, opt)


def infer_sequences(model: DetectorModel, sequences: Sequence[FrameSequence]) -> list[list]:
    """Per-sequence, per-frame detections."""
    return [run_sequence(seq.frames, model, infer=True).detections() for seq in sequences]


def last_frame_detections(model: DetectorModel, sequences: Sequence[FrameSequence]):
    """Detections, gt boxes and gt point counts for the final frame of each clip."""
    dets, gts, counts = [], [], []
    for seq in sequences:
        last = run_sequence(seq.frames, model).frames[-1]
        dets.append(detect(last.post, model.cfg.head, last.frame_index))
        gts.append(seq[-1].gt_boxes)
        counts.append(seq[-1].gt_counts)
    return dets, gts, counts


def evaluate_last_frames(model: DetectorModel, sequences: Sequence[FrameSequence],
                         cfg: EvalConfig | None = None):
    """mAP over the final frame of each clip (the frame with the most history)."""
    dets, gts, counts = last_frame_detections(model, sequences)
    return evaluate(dets, gts, cfg, counts)
