"""Synthetic LiDAR sequences and the line-delimited sequence file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .detect.boxes import Box, as_box_array, points_in_boxes, wrap_angle
from .detect.postprocess import Detection
from .voxel import EgoPose

FORMAT_NAME = "sparselstm-sequence"
FORMAT_VERSION = 1
SENSOR_HEIGHT = 1.8


@dataclass
class SceneConfig:
    arena_size: float = 50.0
    min_vehicles: int = 1
    max_vehicles: int = 6
    min_speed: float = 0.0
    max_speed: float = 10.0
    ego_speed: float = 5.0
    points_per_frame: int = 2048
    vehicle_points: int = 160
    noise_sigma: float = 0.02
    frames: int = 4
    frame_interval: float = 0.1
    occlusion_prob: float = 0.3
    occluded_keep: tuple = (0.1, 0.35)
    clutter_objects: int = 6
    clutter_points: int = 40
    seed: int = 0

    def __post_init__(self):
        counts = (self.min_vehicles, self.max_vehicles, self.points_per_frame, self.vehicle_points,
                  self.frames, self.clutter_objects, self.clutter_points)
        if min(counts) < 0:
            raise ValueError("scene counts must be >= 0")
        if self.max_vehicles < self.min_vehicles:
            raise ValueError("max_vehicles < min_vehicles")
        if self.frame_interval <= 0:
            raise ValueError("frame interval must be > 0")
        if self.arena_size <= 0 or self.noise_sigma < 0:
            raise ValueError("arena size must be > 0 and noise sigma >= 0")


@dataclass
class Frame:
    timestamp: float
    pose: EgoPose
    points: np.ndarray
    gt_boxes: np.ndarray
    gt_ids: np.ndarray
    gt_counts: np.ndarray
    detections: list | None = None

    def gt_box_list(self) -> list[Box]:
        return [Box.from_array(b) for b in self.gt_boxes]


@dataclass
class FrameSequence:
    frames: list = field(default_factory=list)
    name: str = ""

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]


# ------------------------------------------------------------- generation

def _faces(size: np.ndarray):
    """Box faces as (normal, center offset, two in-plane half-extent axes), local frame."""
    l, w, h = size / 2
    return [
        (np.array([1.0, 0, 0]), np.array([l, 0, 0]), np.array([0, w, 0]), np.array([0, 0, h])),
        (np.array([-1.0, 0, 0]), np.array([-l, 0, 0]), np.array([0, w, 0]), np.array([0, 0, h])),
        (np.array([0, 1.0, 0]), np.array([0, w, 0]), np.array([l, 0, 0]), np.array([0, 0, h])),
        (np.array([0, -1.0, 0]), np.array([0, -w, 0]), np.array([l, 0, 0]), np.array([0, 0, h])),
        (np.array([0, 0, 1.0]), np.array([0, 0, h]), np.array([l, 0, 0]), np.array([0, w, 0])),
    ]


def sample_box_surface(rng: np.random.Generator, box: np.ndarray, sensor: np.ndarray,
                       n: int) -> np.ndarray:
    """``n`` points on the sensor-facing faces of a box (world frame)."""
    if n <= 0:
        return np.zeros((0, 3))
    center, size, yaw = box[:3], box[3:6], box[6]
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    local_sensor = rot.T @ (sensor - center)
    faces, weights = [], []
    for normal, off, a1, a2 in _faces(size):
        facing = float(normal @ (local_sensor - off))
        if facing > 0:
            area = 4 * np.linalg.norm(a1) * np.linalg.norm(a2)
            faces.append((off, a1, a2))
            weights.append(area * facing / np.linalg.norm(local_sensor - off))
    if not faces:
        return np.zeros((0, 3))
    weights = np.asarray(weights) / np.sum(weights)
    which = rng.choice(len(faces), size=n, p=weights)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    offs = np.stack([faces[k][0] for k in which])
    a1 = np.stack([faces[k][1] for k in which])
    a2 = np.stack([faces[k][2] for k in which])
    local = offs + uv[:, :1] * a1 + uv[:, 1:] * a2
    return local @ rot.T + center


def _place(rng, n, radius_lo, radius_hi, min_sep, existing):
    out = []
    for _ in range(n):
        for _attempt in range(100):
            r = np.sqrt(rng.uniform(radius_lo ** 2, radius_hi ** 2))
            a = rng.uniform(-np.pi, np.pi)
            p = np.array([r * np.cos(a), r * np.sin(a)])
            if all(np.hypot(*(p - q)) >= min_sep for q in existing + out):
                out.append(p)
                break
    return out


def generate_sequence(cfg: SceneConfig) -> FrameSequence:
    """Constant-velocity vehicles, static clutter, a moving ego and partial occlusion.

    Surface sampling restarts the same random stream every frame, so a
    static scene yields identical frames; occlusion events draw from a
    separate per-frame stream. All values are rounded to float32 so a
    generated sequence equals its round-tripped file form.
    """
    rng = np.random.default_rng(cfg.seed)
    half = cfg.arena_size / 2
    reach = min(half, 25.0)
    ego_yaw = rng.uniform(-np.pi, np.pi)
    ego_dir = np.array([np.cos(ego_yaw), np.sin(ego_yaw)])
    n_veh = int(rng.integers(cfg.min_vehicles, cfg.max_vehicles + 1))
    spots = _place(rng, n_veh, 5.0, max(reach - 5.0, 6.0), 7.0, [])
    vehicles = []
    for p in spots:
        size = np.array([rng.uniform(4.2, 4.8), rng.uniform(1.8, 2.1), rng.uniform(1.5, 1.8)])
        yaw = rng.uniform(-np.pi, np.pi)
        speed = rng.uniform(cfg.min_speed, cfg.max_speed)
        vehicles.append((np.array([p[0], p[1], size[2] / 2]), size, yaw,
                         speed * np.array([np.cos(yaw), np.sin(yaw), 0.0])))
    clutter = []
    for p in _place(rng, cfg.clutter_objects, 4.0, reach, 3.0, spots):
        if rng.uniform() < 0.5:
            size = np.array([0.3, 0.3, rng.uniform(2.0, 4.0)])
        else:
            size = np.array([rng.uniform(3.0, 10.0), 0.3, rng.uniform(1.0, 3.0)])
        clutter.append(np.array([p[0], p[1], size[2] / 2, *size, rng.uniform(-np.pi, np.pi)]))

    frames = []
    for t in range(cfg.frames):
        rng = np.random.default_rng([cfg.seed, 1])
        occ_rng = np.random.default_rng([cfg.seed, 2, t])
        time = t * cfg.frame_interval
        ego_xy = ego_dir * cfg.ego_speed * time
        pose = EgoPose.from_yaw(ego_yaw, [ego_xy[0], ego_xy[1], 0.0])
        rot32 = pose.rotation.astype(np.float32).astype(np.float64)
        pose = EgoPose(rot32, pose.translation.astype(np.float32).astype(np.float64))
        sensor = pose.translation + np.array([0.0, 0.0, SENSOR_HEIGHT])
        chunks = []
        world_boxes = []
        for center, size, yaw, vel in vehicles:
            box = np.array([*(center + vel * time), *size, yaw])
            world_boxes.append(box)
            d = np.hypot(*(box[:2] - sensor[:2]))
            n = int(round(cfg.vehicle_points * min(1.0, 12.0 / max(d, 1e-6)) * rng.uniform(0.8, 1.2)))
            pts = sample_box_surface(rng, box, sensor, n)
            if len(pts) and occ_rng.uniform() < cfg.occlusion_prob:
                keep = occ_rng.uniform(*cfg.occluded_keep)
                c, s = np.cos(yaw), np.sin(yaw)
                along = (pts[:, 0] - box[0]) * c + (pts[:, 1] - box[1]) * s
                if occ_rng.uniform() < 0.5:
                    along = -along
                cut = np.quantile(along, 1.0 - keep)
                pts = pts[along >= cut]
            chunks.append(pts)
        for box in clutter:
            chunks.append(sample_box_surface(rng, box, sensor, cfg.clutter_points))
        obj = np.concatenate(chunks) if chunks else np.zeros((0, 3))
        if len(obj) > cfg.points_per_frame:
            obj = obj[np.sort(rng.choice(len(obj), cfg.points_per_frame, replace=False))]
        n_ground = cfg.points_per_frame - len(obj)
        r = reach * np.sqrt(rng.uniform(0.0, 1.0, n_ground))
        a = rng.uniform(-np.pi, np.pi, n_ground)
        ground = np.stack([sensor[0] + r * np.cos(a), sensor[1] + r * np.sin(a), np.zeros(n_ground)], 1)
        world = np.concatenate([obj, ground])
        world = world + rng.normal(0.0, cfg.noise_sigma, world.shape) if cfg.noise_sigma > 0 else world
        world = world[rng.permutation(len(world))]
        local = ((world - pose.translation) @ pose.rotation).astype(np.float32)
        gt = np.zeros((len(world_boxes), 7))
        for i, b in enumerate(world_boxes):
            gt[i, :3] = (b[:3] - pose.translation) @ pose.rotation
            gt[i, 3:6] = b[3:6]
            gt[i, 6] = wrap_angle(b[6] - ego_yaw)
        gt = gt.astype(np.float32)
        counts = points_in_boxes(local.astype(np.float64), gt.astype(np.float64)).sum(axis=0)
        frames.append(Frame(float(np.float32(time)), pose, local, gt,
                            np.arange(len(gt), dtype=np.int64), counts.astype(np.int64)))
    return FrameSequence(frames, name=f"seed{cfg.seed}")


# -------------------------------------------------------------------- I/O

class SequenceFormatError(ValueError):
    pass


def _num(v) -> str:
    return str(np.float32(v))


def _nums(arr) -> str:
    return "[" + ",".join(str(x) for x in np.asarray(arr, dtype=np.float32).reshape(-1)) + "]"


def _box_json(row, extra: str) -> str:
    return (f'{{"center":{_nums(row[:3])},"size":{_nums(row[3:6])},"yaw":{_num(row[6])},{extra}}}')


def frame_to_line(frame: Frame) -> str:
    boxes = ",".join(_box_json(b, f'"track_id":{int(i)},"points":{int(c)}')
                     for b, i, c in zip(frame.gt_boxes, frame.gt_ids, frame.gt_counts))
    parts = [f'"timestamp":{_num(frame.timestamp)}', f'"pose":{_nums(frame.pose.matrix())}',
             f'"points":{_nums(frame.points)}', f'"boxes":[{boxes}]']
    if frame.detections is not None:
        dets = ",".join(_box_json(d.box.as_array(), f'"score":{_num(d.score)}') for d in frame.detections)
        parts.append(f'"detections":[{dets}]')
    return "{" + ",".join(parts) + "}"


def write_sequence(seq: FrameSequence, path) -> None:
    header = json.dumps({"format": FORMAT_NAME, "version": FORMAT_VERSION,
                         "frames": len(seq), "name": seq.name})
    lines = [header] + [frame_to_line(f) for f in seq.frames]
    Path(path).write_text("\n".join(lines) + "\n")


def _field(rec: dict, name: str, lineno: int):
    if name not in rec:
        raise SequenceFormatError(f"line {lineno}: missing field '{name}'")
    return rec[name]


def _floats(value, name: str, lineno: int, length: int | None = None, multiple: int | None = None):
    try:
        arr = np.asarray(value, dtype=np.float32)
    except (TypeError, ValueError):
        raise SequenceFormatError(f"line {lineno}: field '{name}' must be a list of numbers") from None
    if arr.ndim > 1 or (length is not None and arr.size != length):
        raise SequenceFormatError(f"line {lineno}: field '{name}' must have {length} numbers")
    if multiple is not None and arr.size % multiple:
        raise SequenceFormatError(f"line {lineno}: field '{name}' length not divisible by {multiple}")
    if not np.all(np.isfinite(arr)):
        raise SequenceFormatError(f"line {lineno}: field '{name}' has non-finite values")
    return arr


def _parse_box(rec, name, lineno):
    if not isinstance(rec, dict):
        raise SequenceFormatError(f"line {lineno}: field '{name}' entries must be objects")
    center = _floats(_field(rec, "center", lineno), f"{name}.center", lineno, 3)
    size = _floats(_field(rec, "size", lineno), f"{name}.size", lineno, 3)
    yaw = _floats([_field(rec, "yaw", lineno)], f"{name}.yaw", lineno, 1)
    return np.concatenate([center, size, yaw])


def line_to_frame(line: str, lineno: int) -> Frame:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SequenceFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise SequenceFormatError(f"line {lineno}: frame record must be an object")
    ts = float(_floats([_field(rec, "timestamp", lineno)], "timestamp", lineno, 1)[0])
    pose_arr = _floats(_field(rec, "pose", lineno), "pose", lineno, 16)
    try:
        pose = EgoPose.from_matrix(pose_arr.astype(np.float64))
    except ValueError as exc:
        raise SequenceFormatError(f"line {lineno}: field 'pose': {exc}") from None
    points = _floats(_field(rec, "points", lineno), "points", lineno, multiple=3).reshape(-1, 3)
    boxes_raw = _field(rec, "boxes", lineno)
    if not isinstance(boxes_raw, list):
        raise SequenceFormatError(f"line {lineno}: field 'boxes' must be a list")
    boxes = np.zeros((len(boxes_raw), 7), np.float32)
    ids = np.zeros(len(boxes_raw), np.int64)
    counts = np.zeros(len(boxes_raw), np.int64)
    for i, b in enumerate(boxes_raw):
        boxes[i] = _parse_box(b, "boxes", lineno)
        for key, target in (("track_id", ids), ("points", counts)):
            v = _field(b, key, lineno)
            if not isinstance(v, int):
                raise SequenceFormatError(f"line {lineno}: field 'boxes.{key}' must be an integer")
            target[i] = v
    dets = None
    if "detections" in rec:
        if not isinstance(rec["detections"], list):
            raise SequenceFormatError(f"line {lineno}: field 'detections' must be a list")
        dets = []
        for d in rec["detections"]:
            row = _parse_box(d, "detections", lineno)
            score = float(_floats([_field(d, "score", lineno)], "detections.score", lineno, 1)[0])
            dets.append(Detection(Box.from_array(row.astype(np.float64)), score, lineno - 2))
    return Frame(ts, pose, points, boxes, ids, counts, dets)


def read_sequence(path) -> FrameSequence:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise SequenceFormatError("line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        raise SequenceFormatError("line 1: header is not valid JSON") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise SequenceFormatError("line 1: field 'format' is not a sequence file")
    if header.get("version") != FORMAT_VERSION:
        raise SequenceFormatError(f"line 1: field 'version' unsupported ({header.get('version')})")
    frames = [line_to_frame(line, n) for n, line in enumerate(lines[1:], start=2) if line.strip()]
    if "frames" in header and header["frames"] != len(frames):
        raise SequenceFormatError(f"line 1: field 'frames' says {header['frames']}, found {len(frames)}")
    return FrameSequence(frames, name=str(header.get("name", "")))


def sequences_equal(a: FrameSequence, b: FrameSequence) -> list[str]:
    """Field-by-field differences (empty when equal)."""
    diffs = []
    if len(a) != len(b):
        return [f"frame count {len(a)} != {len(b)}"]
    for t, (fa, fb) in enumerate(zip(a, b)):
        if fa.timestamp != fb.timestamp:
            diffs.append(f"frame {t}: timestamp")
        if not np.array_equal(fa.pose.matrix(), fb.pose.matrix()):
            diffs.append(f"frame {t}: pose")
        for name in ("points", "gt_boxes", "gt_ids", "gt_counts"):
            x, y = getattr(fa, name), getattr(fb, name)
            if x.shape != y.shape or not np.array_equal(x, y):
                diffs.append(f"frame {t}: {name}")
        da, db = fa.detections, fb.detections
        if (da is None) != (db is None) or (da is not None and (
                len(da) != len(db) or any(p.box != q.box or p.score != q.score for p, q in zip(da, db)))):
            diffs.append(f"frame {t}: detections")
    return diffs


def dataset_paths(root) -> list[Path]:
    return sorted(Path(root).glob("seq_*.jsonl"))


def write_dataset(root, seqs: Iterable[FrameSequence]) -> list[Path]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(seqs):
        p = root / f"seq_{i:05d}.jsonl"
        write_sequence(s, p)
        paths.append(p)
    return paths


def generate_dataset(cfg: SceneConfig, count: int) -> list[FrameSequence]:
    """``count`` sequences seeded ``cfg.seed, cfg.seed + 1, ...``."""
    out = []
    for i in range(count):
        c = SceneConfig(**{**cfg.__dict__, "seed": cfg.seed + i})
        out.append(generate_sequence(c))
    return out
