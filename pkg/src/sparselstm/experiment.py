"""Equal-budget comparison of the input modes on one synthetic dataset."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable

from .data import SceneConfig, generate_dataset
from .evaltrack import APResult, EvalConfig, evaluate
from .net import BackboneConfig, DetectorModel, ModelConfig
from .train import TrainConfig, last_frame_detections, train

# label -> (mode, frames seen by the model)
VARIANTS = {"single": ("single", 1), "concat-4": ("concat", 4), "lstm-4": ("lstm", 4),
            "lstm-1": ("lstm", 1)}


def protocol_model() -> ModelConfig:
    """Toy widths on a 0.4 m grid with five resolution levels.

    No objectness floor before sampling: the AP sweep ranks every proposal
    itself, and a briefly trained classifier rarely clears the default floor.
    """
    base = ModelConfig.toy(voxel_size=(0.4, 0.4, 0.4))
    return dataclasses.replace(base, backbone=BackboneConfig((8, 12, 16, 20, 24), feature_dim=8),
                               head=dataclasses.replace(base.head, score_floor=0.0))


@dataclass
class ProtocolConfig:
    sequences: int = 200
    held_out: int = 50
    scene: SceneConfig = field(default_factory=lambda: SceneConfig(points_per_frame=1024, frames=4,
                                                                   seed=1000))
    model: ModelConfig = field(default_factory=protocol_model)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=1100, lr0=0.01, seed=0))
    model_seed: int = 0
    iou_thresholds: tuple = (0.7, 0.5, 0.3)


@dataclass
class VariantResult:
    label: str
    ap: dict[float, APResult]
    final_loss: float
    train_seconds: float
    eval_seconds: float


def run_protocol(cfg: ProtocolConfig, on_line: Callable[[str], None] | None = None,
                 variants=tuple(VARIANTS)) -> dict[str, VariantResult]:
    """Train every variant with the same clips, steps and seeds; score held-out last frames.

    ``on_line`` receives one summary line per finished variant.
    """
    seqs = generate_dataset(cfg.scene, cfg.sequences)
    cut = cfg.sequences - cfg.held_out
    train_set, held = seqs[:cut], seqs[cut:]
    out = {}
    for label in variants:
        mode, frames = VARIANTS[label]
        model = DetectorModel(dataclasses.replace(cfg.model, mode=mode, frames=frames),
                              seed=cfg.model_seed)
        t0 = time.perf_counter()
        log = train(model, train_set, cfg.train).log
        t1 = time.perf_counter()
        dets, gts, counts = last_frame_detections(model, held)
        aps = {iou: evaluate(dets, gts, EvalConfig(iou_threshold=iou), counts)
               for iou in cfg.iou_thresholds}
        t2 = time.perf_counter()
        tail = log[-50:]
        final = sum(float(line.split(",")[5]) for line in tail) / max(len(tail), 1)
        out[label] = VariantResult(label, aps, final, t1 - t0, t2 - t1)
        if on_line is not None:
            cols = ", ".join(f"ap@{k:g}={v.ap:.4f}" for k, v in aps.items())
            on_line(f"{label}, {cols}, loss={final:.3f}, train_s={t1 - t0:.0f}, eval_s={t2 - t1:.0f}")
    return out
