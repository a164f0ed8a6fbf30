import json

import numpy as np
import pytest

from sparselstm.data import (FrameSequence, SceneConfig, SequenceFormatError, generate_dataset,
                             generate_sequence, read_sequence, sequences_equal, write_dataset,
                             write_sequence)
from sparselstm.detect.boxes import Box
from sparselstm.detect.postprocess import Detection


def recount(points, box):
    """Points inside one box by explicit rotation into its frame."""
    c, s = np.cos(box[6]), np.sin(box[6])
    n = 0
    for p in points.astype(np.float64):
        dx, dy = p[0] - box[0], p[1] - box[1]
        lx, ly, lz = dx * c + dy * s, -dx * s + dy * c, p[2] - box[2]
        n += abs(lx) <= box[3] / 2 and abs(ly) <= box[4] / 2 and abs(lz) <= box[5] / 2
    return n


def test_zero_vehicles_and_clutter_gives_ground_only():
    seq = generate_sequence(SceneConfig(min_vehicles=0, max_vehicles=0, clutter_objects=0,
                                        points_per_frame=100, noise_sigma=0.0, frames=2))
    for f in seq:
        assert f.gt_boxes.shape == (0, 7) and f.points.shape == (100, 3)
        np.testing.assert_array_equal(f.points[:, 2], 0.0)


def test_static_scene_repeats_frames():
    cfg = SceneConfig(min_vehicles=1, max_vehicles=1, max_speed=0.0, ego_speed=0.0, noise_sigma=0.0,
                      occlusion_prob=0.0, frames=4, points_per_frame=300, seed=5)
    seq = generate_sequence(cfg)
    for f in seq.frames[1:]:
        np.testing.assert_array_equal(f.points, seq[0].points)
        np.testing.assert_array_equal(f.gt_boxes, seq[0].gt_boxes)


@pytest.mark.parametrize("seed", [0, 7, 21])
def test_gt_counts_match_recount(seed):
    seq = generate_sequence(SceneConfig(seed=seed, frames=2, points_per_frame=800))
    for f in seq:
        assert len(f.gt_boxes) >= 1
        for box, count in zip(f.gt_boxes, f.gt_counts):
            assert count == recount(f.points, box)


def test_moving_scene_statistics():
    seq = generate_sequence(SceneConfig(seed=3, frames=3))
    assert seq[1].timestamp == pytest.approx(0.1)
    assert not np.array_equal(seq[0].pose.translation, seq[2].pose.translation)
    assert seq[0].points.dtype == np.float32
    assert np.all(seq[0].gt_counts > 0)


def test_generation_is_deterministic():
    cfg = SceneConfig(seed=11, frames=3, points_per_frame=400)
    assert sequences_equal(generate_sequence(cfg), generate_sequence(cfg)) == []
    other = generate_sequence(SceneConfig(seed=12, frames=3, points_per_frame=400))
    assert sequences_equal(generate_sequence(cfg), other)


def test_round_trip_is_bit_exact(tmp_path):
    seq = generate_sequence(SceneConfig(seed=2, frames=5, points_per_frame=500))
    seq.frames[1].detections = [Detection(Box.from_array(np.float32([1, 2, 0.5, 4, 2, 1.5, 0.3])), 0.75, 1)]
    write_sequence(seq, tmp_path / "s.jsonl")
    back = read_sequence(tmp_path / "s.jsonl")
    assert sequences_equal(seq, back) == []
    for a, b in zip(seq, back):
        assert a.points.tobytes() == b.points.tobytes()
    assert back[0].detections is None and len(back[1].detections) == 1


def test_empty_sequence_writes_header_only(tmp_path):
    write_sequence(FrameSequence([], name="empty"), tmp_path / "e.jsonl")
    lines = (tmp_path / "e.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["frames"] == 0
    assert len(read_sequence(tmp_path / "e.jsonl")) == 0


def test_dataset_helpers(tmp_path):
    seqs = generate_dataset(SceneConfig(seed=40, frames=1, points_per_frame=100), 3)
    paths = write_dataset(tmp_path, seqs)
    assert [p.name for p in paths] == ["seq_00000.jsonl", "seq_00001.jsonl", "seq_00002.jsonl"]
    assert sequences_equal(read_sequence(paths[2]),
                           generate_sequence(SceneConfig(seed=42, frames=1, points_per_frame=100))) == []


def good_file(tmp_path):
    seq = generate_sequence(SceneConfig(seed=1, frames=2, points_per_frame=30))
    write_sequence(seq, tmp_path / "s.jsonl")
    return (tmp_path / "s.jsonl").read_text().splitlines()


def broken(tmp_path, lines):
    p = tmp_path / "bad.jsonl"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(SequenceFormatError) as exc:
        read_sequence(p)
    return str(exc.value)


def edit(line, **changes):
    rec = json.loads(line)
    for k, v in changes.items():
        if v is None:
            rec.pop(k)
        else:
            rec[k] = v
    return json.dumps(rec)


def test_malformed_inputs_name_line_and_field(tmp_path):
    lines = good_file(tmp_path)
    assert broken(tmp_path, [lines[0], lines[1], "{nope"]).startswith("line 3: invalid JSON")
    msg = broken(tmp_path, [lines[0], edit(lines[1], points=None), lines[2]])
    assert msg == "line 2: missing field 'points'"
    msg = broken(tmp_path, [lines[0], lines[1], edit(lines[2], pose=[1, 2, 3])])
    assert "line 3" in msg and "'pose'" in msg
    msg = broken(tmp_path, [lines[0], edit(lines[1], points=[1.0, 2.0]), lines[2]])
    assert "line 2" in msg and "'points'" in msg
    bad_box = json.loads(lines[1])
    bad_box["boxes"][0]["track_id"] = "a"
    assert "boxes.track_id" in broken(tmp_path, [lines[0], json.dumps(bad_box), lines[2]])
    assert "'frames'" in broken(tmp_path, lines[:2])
    assert "'format'" in broken(tmp_path, [json.dumps({"format": "x"})] + lines[1:])
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(SequenceFormatError, match="line 1: missing header"):
        read_sequence(tmp_path / "empty.jsonl")


def test_bad_scene_config():
    with pytest.raises(ValueError):
        SceneConfig(min_vehicles=3, max_vehicles=2)
    with pytest.raises(ValueError):
        SceneConfig(frame_interval=0.0)
