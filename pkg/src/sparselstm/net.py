"""Sparse U-Net backbone, sparse conv LSTM cell and the per-sequence driver."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detect.head import DetectionHead, HeadConfig, Proposals, graph_propagate, merge_mappings, propose
from .detect.postprocess import Detection, farthest_point_sample, nms
from .ops import autodiff as ad
from .ops.autodiff import Tensor
from .ops.sparse import (ConvKernel, FeatureNorm, concat, feature_norm, max_pool, pointwise,
                         slice_features, submanifold_conv, unpool)
from .voxel import (DEFAULT_VOXEL_SIZE, EgoPose, PointCloud, SparseVoxelGrid, VoxelMapping,
                    devoxelize, joint_voxelize, transform_points)

MODES = ("single", "concat", "lstm")
POOL_STRIDE = (2, 2, 2)
# per-frame input block: intra-voxel offset (3), sensor-frame x, y (2), height (1), occupancy (1)
INPUT_BLOCK = 7
HEIGHT_SCALE = 2.0
PLANAR_SCALE = 10.0


@dataclass
class BackboneConfig:
    encoder_widths: tuple = (64, 96, 128, 160, 192, 224, 256)
    convs_per_block: int = 2
    feature_dim: int = 64

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if len(self.encoder_widths) < 1 or min(self.encoder_widths) <= 0:
            raise ValueError("encoder widths must be positive")
        if self.convs_per_block < 1 or self.feature_dim < 1:
            raise ValueError("convs_per_block and feature_dim must be >= 1")


@dataclass
class LstmConfig:
    state_width: int = 64
    encoder_width: int = 128
    bottleneck_width: int = 128
    decoder_width: int = 256
    state_budget: int = 30000

    def __post_init__(self):
        if self.decoder_width != 4 * self.state_width:
            raise ValueError("decoder width must be 4 * state width (i, f, o, candidate)")
        if self.state_budget < 0:
            raise ValueError("state budget must be >= 0")


@dataclass
class ModelConfig:
    mode: str = "lstm"
    frames: int = 4
    voxel_size: tuple = DEFAULT_VOXEL_SIZE
    origin: tuple = (0.0, 0.0, 0.0)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    lstm: LstmConfig = field(default_factory=LstmConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def toy(cls, divisor: int = 8, budget: int = 512, **kw) -> "ModelConfig":
        """Every width divided by ``divisor``; state budget reduced."""
        b = BackboneConfig(tuple(w // divisor for w in BackboneConfig().encoder_widths),
                           feature_dim=64 // divisor)
        f = 64 // divisor
        lstm = LstmConfig(f, 128 // divisor, 128 // divisor, 4 * f, budget)
        head = HeadConfig(hidden_width=64 // divisor)
        return cls(backbone=b, lstm=lstm, head=head, **kw)


@dataclass
class LstmState:
    h: PointCloud
    c: PointCloud
    scores: np.ndarray | None = None

    def __post_init__(self):
        if len(self.h) != len(self.c) or not np.array_equal(self.h.positions, self.c.positions):
            raise ValueError("hidden and memory clouds must share positions")

    def __len__(self):
        return len(self.h)

    @classmethod
    def empty(cls, width: int, dtype=np.float32) -> "LstmState":
        pts = np.zeros((0, 3))
        z = Tensor(np.zeros((0, width), dtype=dtype))
        return cls(PointCloud(pts, z), PointCloud(pts, z), np.zeros(0))

    def transformed(self, from_pose: EgoPose, to_pose: EgoPose) -> "LstmState":
        return LstmState(transform_points(self.h, from_pose, to_pose),
                         transform_points(self.c, from_pose, to_pose), self.scores)


# ------------------------------------------------------------------ modules

def _named(tensors: Sequence[Tensor]) -> dict[str, Tensor]:
    return {t.name: t for t in tensors}


class ConvUnit:
    """Submanifold conv, per-grid channel standardization, relu.

    The conv bias is fixed at zero: standardization would cancel it.
    """

    def __init__(self, rng: np.random.Generator, f_in: int, f_out: int, dtype, name: str):
        self.conv = ConvKernel.init(rng, f_in, f_out, dtype=dtype, name=name)
        self.conv.bias = Tensor(np.zeros(f_out, dtype=dtype))
        self.norm = FeatureNorm.init(f_out, dtype=dtype, name=f"{name}.norm")

    def parameters(self) -> list[Tensor]:
        return [self.conv.weights] + self.norm.parameters()

    def __call__(self, x: SparseVoxelGrid) -> SparseVoxelGrid:
        return pointwise(feature_norm(submanifold_conv(x, self.conv), self.norm), "relu")


class Backbone:
    """Stem conv, encoder blocks each closed by a stride-2 max pool, mirrored decoder.

    The first configured width is the stem; every later width is one encoder
    block. Decoder block ``k`` unpools to the level of encoder block ``k``,
    concatenates that block's output as a skip, and convolves back down to
    the previous width. A plain linear conv produces the output features.
    """

    def __init__(self, in_width: int, cfg: BackboneConfig, rng: np.random.Generator,
                 dtype=np.float32, prefix: str = "backbone"):
        w = cfg.encoder_widths
        n = cfg.convs_per_block
        self.cfg = cfg
        self.stem = ConvUnit(rng, in_width, w[0], dtype, f"{prefix}.stem")
        self.encoder = []
        for k in range(1, len(w)):
            block = [ConvUnit(rng, w[k - 1] if j == 0 else w[k], w[k], dtype, f"{prefix}.enc{k}.conv{j}")
                     for j in range(n)]
            self.encoder.append(block)
        self.decoder = []
        for k in range(len(w) - 1, 0, -1):
            block = [ConvUnit(rng, 2 * w[k] if j == 0 else w[k - 1], w[k - 1], dtype,
                              f"{prefix}.dec{k}.conv{j}") for j in range(n)]
            self.decoder.append(block)
        self.out = ConvKernel.init(rng, w[0], cfg.feature_dim, dtype=dtype, name=f"{prefix}.out")

    def parameters(self) -> list[Tensor]:
        ps = self.stem.parameters()
        for block in self.encoder + self.decoder:
            for unit in block:
                ps += unit.parameters()
        return ps + self.out.parameters()

    def forward_grid(self, grid: SparseVoxelGrid) -> SparseVoxelGrid:
        x = self.stem(grid)
        skips, pools = [], []
        for block in self.encoder:
            for unit in block:
                x = unit(x)
            skips.append(x)
            x, pm = max_pool(x, POOL_STRIDE)
            pools.append(pm)
        for block, skip, pm in zip(self.decoder, reversed(skips), reversed(pools)):
            x = concat(unpool(x, pm, skip), skip)
            for unit in block:
                x = unit(x)
        return submanifold_conv(x, self.out)


class SparseConvLSTM:
    """LSTM whose gate transform is a light sparse U-Net over the joint grid.

    One encoder block, a max pool, a bottleneck block, an unpool and one
    decoder block whose last conv emits ``[i, f, o, candidate]`` stacked.
    """

    def __init__(self, in_width: int, cfg: LstmConfig, rng: np.random.Generator,
                 dtype=np.float32, prefix: str = "lstm"):
        self.cfg = cfg
        self.in_width = in_width
        fp, e, b, d = cfg.state_width, cfg.encoder_width, cfg.bottleneck_width, cfg.decoder_width
        unit = lambda i, o, name: ConvUnit(rng, i, o, dtype, f"{prefix}.{name}")
        self.enc = [unit(in_width + fp, e, "enc.conv0"), unit(e, e, "enc.conv1")]
        self.mid = [unit(e, b, "mid.conv0"), unit(b, b, "mid.conv1")]
        self.dec = [unit(b + e, d, "dec.conv0")]
        self.out = ConvKernel.init(rng, d, d, dtype=dtype, name=f"{prefix}.dec.conv1")

    def parameters(self) -> list[Tensor]:
        ps = []
        for u in self.enc + self.mid + self.dec:
            ps += u.parameters()
        return ps + self.out.parameters()

    def gates(self, inp: SparseVoxelGrid) -> SparseVoxelGrid:
        e = self.enc[1](self.enc[0](inp))
        p, pm = max_pool(e, POOL_STRIDE)
        m = self.mid[1](self.mid[0](p))
        u = concat(unpool(m, pm, e), e)
        return submanifold_conv(self.dec[0](u), self.out)


@dataclass
class LstmStepResult:
    state: LstmState
    h_grid: SparseVoxelGrid
    c_grid: SparseVoxelGrid
    mapping: VoxelMapping
    gates: dict


def lstm_step(x_t: PointCloud, state_prev: LstmState, cell: SparseConvLSTM,
              voxel_size=DEFAULT_VOXEL_SIZE, origin=(0.0, 0.0, 0.0)) -> LstmStepResult:
    """One recurrence on the jointly voxelized ``x_t``, ``h_{t-1}``, ``c_{t-1}``.

    ``h_t`` and ``c_t`` are devoxelized onto the union of the input points
    (current points first, then previous state points).
    """
    f = x_t.num_features
    fp = cell.cfg.state_width
    if f != cell.in_width:
        raise ValueError(f"x_t width {f} does not match LSTM input width {cell.in_width}")
    if state_prev.h.num_features != fp or state_prev.c.num_features != fp:
        raise ValueError(f"state width must be {fp}")
    grid, maps = joint_voxelize([x_t, state_prev.h, state_prev.c], voxel_size, origin)
    x_blk = slice_features(grid, 3, 3 + f)
    h_lo = 3 + f + 3
    h_blk = slice_features(grid, h_lo, h_lo + fp)
    c_lo = h_lo + fp + 3
    c_blk = slice_features(grid, c_lo, c_lo + fp)
    raw = cell.gates(concat(x_blk, h_blk))
    i = pointwise(slice_features(raw, 0, fp), "sigmoid")
    fg = pointwise(slice_features(raw, fp, 2 * fp), "sigmoid")
    o = pointwise(slice_features(raw, 2 * fp, 3 * fp), "sigmoid")
    cand = pointwise(slice_features(raw, 3 * fp, 4 * fp), "tanh")
    c_t = fg.features * c_blk.features + i.features * cand.features
    h_t = o.features * ad.tanh(c_t)
    h_grid, c_grid = grid.with_features(h_t), grid.with_features(c_t)
    mapping = merge_mappings([maps[0], maps[1]])
    positions = np.concatenate([x_t.positions, state_prev.h.positions])
    new_state = LstmState(PointCloud(positions, devoxelize(h_grid, mapping)),
                          PointCloud(positions, devoxelize(c_grid, mapping)))
    gates = {"input": i.features.data, "forget": fg.features.data, "output": o.features.data,
             "candidate": cand.features.data}
    return LstmStepResult(new_state, h_grid, c_grid, mapping, gates)


def subsample_state(state: LstmState, budget: int, scores=None) -> LstmState:
    """Keep the ``budget`` highest-scoring points (ties: lower index), in index order."""
    if budget < 0:
        raise ValueError("budget must be >= 0")
    scores = state.scores if scores is None else np.asarray(scores)
    n = len(state)
    if budget >= n:
        return LstmState(state.h, state.c, scores)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")[:budget]
    keep = np.sort(order)
    return LstmState(state.h.select(keep), state.c.select(keep), np.asarray(scores)[keep])


# ------------------------------------------------------------------- model

def encode_input(clouds: Sequence[PointCloud], voxel_size, origin, dtype=np.float32):
    """Joint grid of per-frame blocks ``[offset/voxel, xy/scale, z/scale, occupancy]``.

    Isolated fine cells see no neighbors, so submanifold convs alone cannot
    tell where a cell sits inside the coarser cells it pools into; the
    planar coordinates supply that position.
    """
    ones = [PointCloud(pc.positions, np.ones((len(pc), 1))) for pc in clouds]
    grid, maps = joint_voxelize(ones, voxel_size, origin)
    raw = grid.features.data
    centers = grid.cell_centers()
    vs = np.asarray(voxel_size, dtype=np.float64)
    blocks = []
    for j in range(len(clouds)):
        mean_xyz = raw[:, 4 * j:4 * j + 3]
        occ = raw[:, 4 * j + 3:4 * j + 4]
        offset = (mean_xyz - centers) / vs * occ
        planar = mean_xyz[:, :2] / PLANAR_SCALE
        height = mean_xyz[:, 2:3] / HEIGHT_SCALE
        blocks.append(np.concatenate([offset, planar, height, occ], axis=1))
    feats = np.concatenate(blocks, axis=1).astype(dtype) if blocks else np.zeros((len(grid), 0), dtype)
    return grid.with_features(feats), maps


class DetectorModel:
    """Backbone, optional LSTM cell and detection head for one of the three modes."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        in_width = INPUT_BLOCK * (cfg.frames if cfg.mode == "concat" else 1)
        self.backbone = Backbone(in_width, cfg.backbone, rng, dtype)
        self.cell = None
        head_in = cfg.backbone.feature_dim
        if cfg.mode == "lstm":
            self.cell = SparseConvLSTM(cfg.backbone.feature_dim, cfg.lstm, rng, dtype)
            head_in = cfg.lstm.state_width
        self.head = DetectionHead(head_in, cfg.head, rng, dtype)

    def parameters(self) -> dict[str, Tensor]:
        ps = self.backbone.parameters()
        if self.cell is not None:
            ps += self.cell.parameters()
        for k in self.head.kernels():
            ps += k.parameters()
        return _named(ps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
        for name, p in params.items():
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != {p.data.shape}")
            p.data[...] = arrays[name].astype(self.dtype)

    def initial_state(self) -> LstmState:
        return LstmState.empty(self.cfg.lstm.state_width, self.dtype)


def backbone_forward(pc: PointCloud, backbone: Backbone, voxel_size=DEFAULT_VOXEL_SIZE,
                     origin=(0.0, 0.0, 0.0), dtype=np.float32) -> PointCloud:
    """Per-point backbone features (same positions as the input)."""
    if len(pc) == 0:
        return PointCloud(pc.positions, np.zeros((0, backbone.cfg.feature_dim), dtype=dtype))
    grid, maps = encode_input([pc], voxel_size, origin, dtype)
    out = backbone.forward_grid(grid)
    return PointCloud(pc.positions, devoxelize(out, maps[0]))


@dataclass
class FrameOutput:
    frame_index: int
    points: np.ndarray
    pre: Proposals
    post: Proposals
    cells: int
    state_points: int = 0
    detections: list = field(default_factory=list)
    gates: dict | None = None


@dataclass
class SequenceOutput:
    frames: list
    state: LstmState | None

    def detections(self) -> list[list[Detection]]:
        return [f.detections for f in self.frames]


def detect(post: Proposals, head: HeadConfig, frame_index: int = 0) -> list[Detection]:
    idx = farthest_point_sample(post, head.fps_samples, head.score_floor)
    if len(idx) == 0:
        return []
    return nms(post.select(idx), head.nms_iou, frame_index=frame_index)


def run_sequence(frames: Sequence, model: DetectorModel, cfg: ModelConfig | None = None,
                 infer: bool = False, state: LstmState | None = None) -> SequenceOutput:
    """Drive the model over time-ordered frames.

    ``frames`` items need ``points`` (sensor-frame ``(N, 3)``) and ``pose``
    (:class:`EgoPose`). With ``infer`` set, each frame also gets
    FPS + NMS detections. In LSTM mode the state restarts every
    ``cfg.frames`` frames, so each frame sees at most ``frames - 1`` frames
    of history, as in concatenation mode.
    """
    cfg = model.cfg if cfg is None else cfg
    vs, org = cfg.voxel_size, cfg.origin
    outputs = []
    if cfg.mode == "lstm" and state is None:
        state = model.initial_state()
    prev_pose = None
    for t, frame in enumerate(frames):
        pts = np.asarray(frame.points, dtype=np.float64).reshape(-1, 3)
        state_n = 0
        gates = None
        if cfg.mode == "lstm":
            if t and t % cfg.frames == 0:
                state, prev_pose = model.initial_state(), None
            if prev_pose is not None:
                state = state.transformed(prev_pose, frame.pose)
            state_n = len(state)
            x = backbone_forward(PointCloud(pts), model.backbone, vs, org, model.dtype)
            step = lstm_step(x, state, model.cell, vs, org)
            points_all = step.state.h.positions
            pre = propose(step.h_grid, model.head, points_all, step.mapping)
            cells = len(step.h_grid)
            gates = step.gates
            state = subsample_state(step.state, cfg.lstm.state_budget, pre.objectness)
        else:
            if cfg.mode == "concat":
                clouds = []
                for j in range(cfg.frames):
                    src = t - j
                    if src < 0:
                        clouds.append(PointCloud(np.zeros((0, 3))))
                        continue
                    pc = PointCloud(frames[src].points)
                    clouds.append(pc if j == 0 else transform_points(pc, frames[src].pose, frame.pose))
            else:
                clouds = [PointCloud(pts)]
            grid, maps = encode_input(clouds, vs, org, model.dtype)
            feats = model.backbone.forward_grid(grid)
            mapping = merge_mappings(maps)
            points_all = np.concatenate([c.positions for c in clouds])
            pre = propose(feats, model.head, points_all, mapping)
            cells = len(grid)
        post = graph_propagate(pre, cfg.head.knn)
        out = FrameOutput(t, points_all, pre, post, cells, state_n, gates=gates)
        if infer:
            out.detections = detect(post, cfg.head, t)
        outputs.append(out)
        prev_pose = frame.pose
    return SequenceOutput(outputs, state)
