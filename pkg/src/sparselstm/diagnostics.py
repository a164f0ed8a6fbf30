"""Gradient checks over every primitive and a tiny model, plus the cell-count benchmark."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .data import SceneConfig, generate_sequence
from .detect.boxes import corners_tensor
from .loss import corner_loss_batch
from .net import DetectorModel, ModelConfig, encode_input, run_sequence
from .ops import autodiff as ad
from .ops.gradcheck import GradCheckReport, OpGraph, finite_diff_check
from .ops.sparse import (ConvKernel, FeatureNorm, feature_norm, max_pool, pointwise,
                         submanifold_conv, unpool)
from .voxel import PointCloud, devoxelize, joint_voxelize, transform_points, voxelize

PRIMITIVE_TOLERANCE = 1e-4
PIPELINE_TOLERANCE = 1e-3
# thousands of relu and max switches sit in the pipeline; probes that straddle
# one are redrawn (see finite_diff_check)
PIPELINE_EPS = 1e-6
PIPELINE_KINK_RETRIES = 3


def _p(rng, *shape, lo=-1.0, hi=1.0, name="x"):
    return ad.parameter(rng.uniform(lo, hi, size=shape), name=name)


def _away_from_zero(rng, *shape, name="x"):
    v = rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return ad.parameter(v, name=name)


def _readout(t: ad.Tensor, seed: int) -> ad.Tensor:
    """Fixed random linear functional so every output entry matters."""
    w = np.random.default_rng(seed).normal(size=t.shape)
    return ad.tsum(ad.mul(t, ad.Tensor(w)))


def primitive_graphs(seed: int = 0) -> dict[str, OpGraph]:
    """One small float64 graph per differentiable primitive."""
    rng = np.random.default_rng(seed)
    g = {}

    def unary(name, fn, make=_p, **kw):
        x = make(rng, 4, 3, name="x", **kw)
        r = int(rng.integers(1 << 31))
        g[name] = OpGraph(lambda: _readout(fn(x), r), {"x": x})

    def binary(name, fn, lo=-1.0, hi=1.0, shape_b=(4, 3)):
        a, b = _p(rng, 4, 3, name="a"), _p(rng, *shape_b, lo=lo, hi=hi, name="b")
        r = int(rng.integers(1 << 31))
        g[name] = OpGraph(lambda: _readout(fn(a, b), r), {"a": a, "b": b})

    binary("add", ad.add, shape_b=(3,))
    binary("sub", ad.sub, shape_b=(4, 1))
    binary("mul", ad.mul)
    binary("div", ad.div, lo=0.5, hi=2.0)
    binary("minimum", ad.minimum)
    unary("neg", ad.neg)
    unary("exp", ad.exp)
    unary("log", ad.log, lo=0.5, hi=2.0)
    unary("sqrt", ad.sqrt, lo=0.5, hi=2.0)
    unary("sigmoid", ad.sigmoid, lo=-4.0, hi=4.0)
    unary("tanh", ad.tanh, lo=-3.0, hi=3.0)
    unary("relu", ad.relu, make=_away_from_zero)
    unary("softplus", ad.softplus, lo=-4.0, hi=4.0)
    unary("sum", lambda x: ad.tsum(x, axis=0))
    unary("mean", lambda x: ad.mean(x, axis=1, keepdims=True))
    unary("reshape", lambda x: ad.reshape(x, (3, 4)))
    unary("getitem", lambda x: ad.getitem(x, (slice(1, 3), np.array([0, 2, 2]))))
    unary("where", lambda x: ad.where(np.arange(12).reshape(4, 3) % 2 == 0, x, ad.exp(x)))
    unary("gather_rows", lambda x: ad.gather_rows(x, np.array([0, 3, 3, 1, 0])))
    unary("segment_mean", lambda x: ad.segment_mean(x, np.array([1, 0, 1, 1]), 3))
    unary("huber_norm", lambda x: ad.huber_norm(x * 2.0, 1.0))
    unary("bce_with_logits", lambda x: ad.bce_with_logits(x * 3.0, (np.arange(12).reshape(4, 3) % 3 == 0)))

    a, b = _p(rng, 4, 3, name="a"), _p(rng, 3, 5, name="b")
    r = 1
    g["matmul"] = OpGraph(lambda: _readout(ad.matmul(a, b), r), {"a": a, "b": b})
    c1, c2 = _p(rng, 4, 2, name="a"), _p(rng, 4, 3, name="b")
    g["concat"] = OpGraph(lambda: _readout(ad.concat([c1, c2], axis=1), r), {"a": c1, "b": c2})
    s1, s2 = _p(rng, 4, 3, name="a"), _p(rng, 4, 3, name="b")
    g["stack"] = OpGraph(lambda: _readout(ad.stack([s1, s2], axis=1), r), {"a": s1, "b": s2})
    x = _p(rng, 6, 3, name="x")
    gam, bet = _p(rng, 3, lo=0.5, hi=1.5, name="gamma"), _p(rng, 3, name="beta")
    g["standardize"] = OpGraph(lambda: _readout(ad.standardize(x, gam, bet), r),
                               {"x": x, "gamma": gam, "beta": bet})

    # sparse-grid operations over a small random occupancy
    pts = rng.uniform(0.0, 1.2, size=(40, 3))
    pf = _p(rng, 40, 2, name="point_features")
    k1 = ConvKernel.init(rng, 5, 4, dtype=np.float64, name="conv")
    k1.bias.data[:] = rng.normal(size=4)
    groups = [ConvKernel.init(rng, 2, w, dtype=np.float64, name=f"group{i}") for i, w in enumerate((3, 1))]
    norm = FeatureNorm(ad.parameter(rng.uniform(0.5, 1.5, 4), "norm.gamma"),
                       ad.parameter(rng.normal(size=4), "norm.beta"))

    def grid():
        gr, _ = voxelize(PointCloud(pts, pf), (0.3, 0.3, 0.3))
        return gr

    params = {"point_features": pf, "conv.weight": k1.weights, "conv.bias": k1.bias}
    g["voxelize+conv"] = OpGraph(lambda: _readout(submanifold_conv(grid(), k1).features, r), params)
    gparams = {"point_features": pf, **{t.name: t for k in groups for t in k.parameters()}}
    g["grouped_conv"] = OpGraph(
        lambda: _readout(submanifold_conv(grid().with_features(
            ad.getitem(grid().features, (slice(None), slice(1, 5)))), groups).features, r), gparams)
    g["feature_norm"] = OpGraph(
        lambda: _readout(feature_norm(submanifold_conv(grid(), k1), norm).features, r),
        # the conv bias is left out: standardization cancels it exactly
        {"point_features": pf, "conv.weight": k1.weights, "norm.gamma": norm.gamma,
         "norm.beta": norm.beta})

    def pool_unpool():
        fine = grid()
        coarse, pm = max_pool(fine, 2)
        up = unpool(pointwise(coarse, "tanh"), pm, fine)
        return _readout(ad.add(up.features, fine.features), r)

    g["max_pool+unpool"] = OpGraph(pool_unpool, {"point_features": pf})

    def devox():
        gr, mp = voxelize(PointCloud(pts, pf), (0.3, 0.3, 0.3))
        return _readout(devoxelize(gr, mp), r)

    g["devoxelize"] = OpGraph(devox, {"point_features": pf})

    center, size = _p(rng, 3, 3, name="center"), _p(rng, 3, 3, lo=1.0, hi=3.0, name="size")
    ang = rng.uniform(-np.pi, np.pi, 3)
    rot = ad.parameter(np.stack([np.cos(ang), np.sin(ang)], 1) * 1.3, "rot")
    g["corners"] = OpGraph(lambda: _readout(corners_tensor(center, size, ad.getitem(rot, (slice(None), 0)),
                                                           ad.getitem(rot, (slice(None), 1))), r),
                           {"center": center, "size": size, "rot": rot})
    gt = np.column_stack([rng.normal(size=(3, 3)), rng.uniform(1, 3, (3, 3)), rng.uniform(-3, 3, 3)])
    g["corner_loss"] = OpGraph(lambda: ad.tsum(corner_loss_batch(center, size, rot, gt)),
                               {"center": center, "size": size, "rot": rot})
    return g


def pipeline_model(seed: int = 0) -> tuple[DetectorModel, object]:
    """Tiny float64 LSTM detector and a 2-frame scene for the end-to-end check.

    Biases get small random values so no relu sits exactly at its kink
    (zero-initialized biases put empty cells at pre-activation 0).
    """
    scene = SceneConfig(seed=seed + 3, frames=2, points_per_frame=300, max_vehicles=2,
                        clutter_objects=1)
    seq = generate_sequence(scene)
    cfg = ModelConfig.toy(mode="lstm", frames=2, budget=64)
    model = DetectorModel(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 5)
    for name, p in model.parameters().items():
        if name.endswith("bias"):
            p.data[:] = rng.normal(0.0, 0.05, p.data.shape)
    return model, seq


def pipeline_graph(seed: int = 0) -> OpGraph:
    from .train import TrainConfig, sequence_loss

    model, seq = pipeline_model(seed)
    cfg = TrainConfig()
    return OpGraph(lambda: sequence_loss(model, seq, cfg).tensor, model.parameters())


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport

    @property
    def line(self) -> str:
        r = self.report
        return f"{self.name}, {r.max_error:.3e}, {r.tolerance:g}, {'PASS' if r.passed else 'FAIL'}"


def run_gradchecks(seed: int = 0, pipeline: bool = True, pipeline_entries: int = 2,
                   corrupt: Callable[[str, np.ndarray], np.ndarray] | None = None) -> list[CheckResult]:
    out = []
    for name, graph in primitive_graphs(seed).items():
        rep = finite_diff_check(graph, PRIMITIVE_TOLERANCE, eps=1e-6, max_entries=None, seed=seed,
                                corrupt=corrupt)
        out.append(CheckResult(name, rep))
    if pipeline:
        rep = finite_diff_check(pipeline_graph(seed), PIPELINE_TOLERANCE, eps=PIPELINE_EPS,
                                max_entries=pipeline_entries, seed=seed, corrupt=corrupt,
                                kink_retries=PIPELINE_KINK_RETRIES)
        out.append(CheckResult("pipeline", rep))
    return out


def corrupt_gradients(name: str, grad: np.ndarray) -> np.ndarray:
    """Test hook: a wrong analytic gradient that every check must reject."""
    return grad * 1.5 + 0.1


# --------------------------------------------------------------- benchmark

def bench_rows(scene: SceneConfig, model_cfg: ModelConfig, count: int, frames: int = 8,
               concat_frames: int = 4, budget_fraction: float = 0.25, seed: int = 0) -> list[dict]:
    """Occupied cells per frame for single-frame, LSTM (frame + state) and concatenation input.

    Only frames with a full concatenation history are reported. The LSTM
    state budget is ``budget_fraction`` of the frame's points and the state
    is never reset within a scene.
    """
    budget = int(round(budget_fraction * scene.points_per_frame))
    lstm_cfg = replace(model_cfg, mode="lstm", frames=frames,
                       lstm=replace(model_cfg.lstm, state_budget=budget))
    model = DetectorModel(lstm_cfg, seed=seed)
    rows = []
    for i in range(count):
        seq = generate_sequence(replace(scene, frames=frames, seed=scene.seed + i))
        out = run_sequence(seq.frames, model)
        for t in range(concat_frames - 1, frames):
            cur = seq[t]
            clouds = [PointCloud(seq[t - j].points) if j == 0 else
                      transform_points(PointCloud(seq[t - j].points), seq[t - j].pose, cur.pose)
                      for j in range(concat_frames)]
            single, _ = joint_voxelize(clouds[:1], model_cfg.voxel_size, model_cfg.origin)
            concat, _ = encode_input(clouds, model_cfg.voxel_size, model_cfg.origin)
            f = out.frames[t]
            rows.append({"scene": i, "frame": t, "points": len(cur.points),
                         "state_points": f.state_points, "single_cells": len(single),
                         "lstm_cells": f.cells, "concat_cells": len(concat)})
    return rows


def bench_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    return "\n".join([",".join(keys)] + [",".join(str(r[k]) for k in keys) for r in rows]) + "\n"
