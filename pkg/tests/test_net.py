import dataclasses

import numpy as np
import pytest

from sparselstm.data import Frame, SceneConfig, generate_sequence
from sparselstm.detect.head import HeadConfig
from sparselstm.net import (Backbone, BackboneConfig, DetectorModel, LstmConfig, LstmState, ModelConfig,
                            SparseConvLSTM, backbone_forward, encode_input, lstm_step, run_sequence,
                            subsample_state)
from sparselstm.ops import autodiff as ad
from sparselstm.ops.sparse import (ConvKernel, concat, feature_norm, max_pool, pointwise,
                                   submanifold_conv, unpool)
from sparselstm.voxel import EgoPose, PointCloud, devoxelize, voxelize

VS = (0.5, 0.5, 0.5)


def tiny_model(mode="lstm", frames=2, budget=10_000, seed=0, dtype=np.float64):
    cfg = ModelConfig(mode=mode, frames=frames, voxel_size=VS,
                      backbone=BackboneConfig((4, 6), feature_dim=4),
                      lstm=LstmConfig(2, 4, 4, 8, budget), head=HeadConfig(hidden_width=3, fps_samples=32))
    return DetectorModel(cfg, seed=seed, dtype=dtype)


def state_of(positions, h, c):
    return LstmState(PointCloud(positions, np.asarray(h, float)), PointCloud(positions, np.asarray(c, float)))


def sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


# ---------------------------------------------------------------- backbone

def test_backbone_rows_match_points_and_share_voxels(rng):
    bb = Backbone(7, BackboneConfig((4, 6), feature_dim=5), rng, np.float64)
    pts = rng.uniform(0, 3, (50, 3))
    pts[1] = pts[0] + 0.01
    pc = PointCloud(pts)
    out = backbone_forward(pc, bb, VS, dtype=np.float64)
    assert out.features.shape == (50, 5)
    if np.all(np.floor(pts[0] / 0.5) == np.floor(pts[1] / 0.5)):
        np.testing.assert_array_equal(out.features.data[0], out.features.data[1])


def test_backbone_equals_hand_composition(rng):
    cfg = BackboneConfig((8, 16), convs_per_block=2, feature_dim=4)
    bb = Backbone(7, cfg, rng, np.float64)
    for p in bb.parameters():
        if p.name.endswith(("beta", "bias")):
            p.data[:] = rng.normal(0, 0.1, p.data.shape)
    pts = np.array([[0.1, 0.1, 0.1], [0.6, 0.1, 0.1], [1.3, 0.7, 0.2]])
    grid, _ = encode_input([PointCloud(pts)], VS, (0, 0, 0), np.float64)

    def unit(x, u):
        return pointwise(feature_norm(submanifold_conv(x, u.conv), u.norm), "relu")

    x = unit(grid, bb.stem)
    for u in bb.encoder[0]:
        x = unit(x, u)
    skip = x
    coarse, pm = max_pool(skip, 2)
    y = concat(unpool(coarse, pm, skip), skip)
    for u in bb.decoder[0]:
        y = unit(y, u)
    want = submanifold_conv(y, bb.out).features.data
    got = bb.forward_grid(grid).features.data
    np.testing.assert_allclose(got, want, atol=0, rtol=0)
    assert len(grid) == 3


# ------------------------------------------------------------------- cell

def test_zero_weights_give_half_gates_and_zero_state(rng):
    cell = SparseConvLSTM(3, LstmConfig(2, 4, 4, 8, 100), rng, np.float64)
    for p in cell.parameters():
        p.data[:] = 0
    x = PointCloud(rng.uniform(0, 2, (20, 3)), rng.normal(size=(20, 3)))
    res = lstm_step(x, LstmState.empty(2, np.float64), cell, VS)
    for name in ("input", "forget", "output"):
        np.testing.assert_array_equal(res.gates[name], 0.5)
    np.testing.assert_array_equal(res.gates["candidate"], 0.0)
    np.testing.assert_array_equal(res.c_grid.features.data, 0.0)
    np.testing.assert_array_equal(res.h_grid.features.data, 0.0)


def forced_gate_cell(rng, f_in, fp, forget, inp):
    cell = SparseConvLSTM(f_in, LstmConfig(fp, 4, 4, 4 * fp, 100), rng, np.float64)
    cell.out.weights.data[:] = 0
    b = np.zeros(4 * fp)
    b[:fp] = inp
    b[fp:2 * fp] = forget
    cell.out.bias.data[:] = b
    return cell


def test_forget_one_input_zero_keeps_memory(rng):
    cell = forced_gate_cell(rng, 3, 2, forget=1e3, inp=-1e3)
    prev_pos = np.array([[0.1, 0.1, 0.1], [1.1, 0.1, 0.1], [3.1, 3.1, 0.1]])
    c_prev = rng.normal(size=(3, 2))
    state = state_of(prev_pos, rng.normal(size=(3, 2)), c_prev)
    x = PointCloud(np.array([[0.2, 0.2, 0.2], [1.2, 0.3, 0.1]]), rng.normal(size=(2, 3)))
    res = lstm_step(x, state, cell, VS)
    assert np.all(res.gates["forget"] == 1.0) and np.all(res.gates["input"] == 0.0)
    # previous state points follow the current points in the output
    np.testing.assert_array_equal(res.state.c.features.data[2:], c_prev)


def test_scalar_cell_oracle(rng, monkeypatch):
    """One occupied cell, gate transform reduced to a center-tap linear map."""
    cell = SparseConvLSTM(1, LstmConfig(1, 4, 4, 4, 100), rng, np.float64)
    k = ConvKernel(rng.normal(size=(27, 2, 4)), rng.normal(size=4))
    monkeypatch.setattr(cell, "gates", lambda inp: submanifold_conv(inp, k))
    x_val, h_prev, c_prev = 0.7, -0.4, 1.3
    pos = np.array([[0.2, 0.2, 0.2]])
    res = lstm_step(PointCloud(pos, [[x_val]]), state_of(pos + 0.01, [[h_prev]], [[c_prev]]), cell, VS)
    a = k.bias.data + np.array([x_val, h_prev]) @ k.weights.data[13]
    i, f, o, cand = sigmoid(a[0]), sigmoid(a[1]), sigmoid(a[2]), np.tanh(a[3])
    c = f * c_prev + i * cand
    h = o * np.tanh(c)
    assert float(res.c_grid.features.data[0, 0]) == pytest.approx(c, abs=1e-12)
    assert float(res.h_grid.features.data[0, 0]) == pytest.approx(h, abs=1e-12)
    assert res.gates["forget"][0, 0] == pytest.approx(f, abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_gates_stay_in_open_interval(seed):
    r = np.random.default_rng(seed)
    cell = SparseConvLSTM(3, LstmConfig(2, 4, 4, 8, 100), r, np.float64)
    x = PointCloud(r.uniform(0, 4, (60, 3)), r.normal(0, 3, (60, 3)))
    state = state_of(r.uniform(0, 4, (30, 3)), r.normal(0, 3, (30, 2)), r.normal(0, 3, (30, 2)))
    res = lstm_step(x, state, cell, VS)
    for name in ("input", "forget", "output"):
        g = res.gates[name]
        assert np.all((g > 0) & (g < 1))
    assert np.all(np.abs(res.gates["candidate"]) < 1)
    assert len(res.state) <= len(x) + len(state)
    assert len(subsample_state(res.state, 25, r.uniform(size=len(res.state)))) <= 25


def test_step_rejects_wrong_widths(rng):
    cell = SparseConvLSTM(3, LstmConfig(2, 4, 4, 8, 100), rng, np.float64)
    with pytest.raises(ValueError):
        lstm_step(PointCloud(np.zeros((1, 3)), np.zeros((1, 2))), LstmState.empty(2, np.float64), cell)


# -------------------------------------------------------------- subsample

def test_subsample_identity_and_empty(rng):
    s = state_of(rng.normal(size=(5, 3)), rng.normal(size=(5, 2)), rng.normal(size=(5, 2)))
    scores = rng.uniform(size=5)
    same = subsample_state(s, 5, scores)
    np.testing.assert_array_equal(same.h.positions, s.h.positions)
    assert len(subsample_state(s, 0, scores)) == 0
    with pytest.raises(ValueError):
        subsample_state(s, -1, scores)


def test_subsample_keeps_top_k(rng):
    n = 200
    s = state_of(rng.normal(size=(n, 3)), rng.normal(size=(n, 2)), rng.normal(size=(n, 2)))
    scores = rng.uniform(size=n)
    kept = subsample_state(s, 37, scores)
    oracle = sorted(range(n), key=lambda i: -scores[i])[:37]
    np.testing.assert_array_equal(kept.h.positions, s.h.positions[sorted(oracle)])
    np.testing.assert_array_equal(kept.c.features.data, s.c.features.data[sorted(oracle)])


# ----------------------------------------------------------- run_sequence

def frames_from(points_list, poses):
    return [Frame(0.1 * t, pose, pts.astype(np.float32), np.zeros((0, 7)), np.zeros(0, int), np.zeros(0, int))
            for t, (pts, pose) in enumerate(zip(points_list, poses))]


def test_one_frame_lstm_ignores_earlier_frames():
    seq = generate_sequence(SceneConfig(seed=2, frames=3, points_per_frame=200, max_vehicles=2))
    model = tiny_model(frames=1)
    full = run_sequence(seq.frames, model)
    alone = run_sequence(seq.frames[2:], model)
    np.testing.assert_array_equal(full.frames[2].pre.centers.data, alone.frames[0].pre.centers.data)
    assert full.frames[2].state_points == 0


def test_history_window_matches_frames():
    seq = generate_sequence(SceneConfig(seed=2, frames=3, points_per_frame=200, max_vehicles=2))
    model = tiny_model(frames=2)
    out = run_sequence(seq.frames, model)
    assert [f.state_points for f in out.frames][0] == 0
    assert out.frames[1].state_points > 0 and out.frames[2].state_points == 0


def test_static_scene_state_positions_repeat(rng):
    pts = rng.uniform(0, 3, (40, 3))
    frames = frames_from([pts] * 3, [EgoPose.identity()] * 3)
    model = tiny_model(frames=3)
    seen = []
    state = model.initial_state()
    for t in range(3):
        out = run_sequence(frames[t:t + 1], model, state=state)
        state = out.state
        seen.append({tuple(p) for p in np.round(state.h.positions, 9)})
    assert seen[0] == seen[1] == seen[2]


def test_ego_motion_shifts_state_by_inverse_displacement(rng):
    world = rng.uniform(2, 6, (40, 3))
    p0, p1 = EgoPose.identity(), EgoPose.from_yaw(0.0, [1.0, 0.0, 0.0])
    local1 = world - np.array([1.0, 0.0, 0.0])
    frames = frames_from([world, local1], [p0, p1])
    model = tiny_model(frames=2)
    first = run_sequence(frames[:1], model)
    both = run_sequence(frames, model)
    carried = both.state.h.positions[len(local1):]
    np.testing.assert_allclose(carried, first.state.h.positions.astype(np.float32) - [1.0, 0.0, 0.0],
                               atol=1e-5)


def test_lstm_cells_bounded_by_frame_plus_state():
    seq = generate_sequence(SceneConfig(seed=4, frames=4, points_per_frame=300))
    model = tiny_model(frames=4, budget=75)
    out = run_sequence(seq.frames, model)
    for t, f in enumerate(out.frames):
        g_x, _ = voxelize(PointCloud(seq[t].points), VS)
        assert f.cells <= len(g_x) + f.state_points


def test_modes_and_checkpoint_arrays(tmp_path):
    from sparselstm.ops.checkpoint import load_arrays, save_arrays
    seq = generate_sequence(SceneConfig(seed=1, frames=2, points_per_frame=150))
    for mode in ("single", "concat", "lstm"):
        m = tiny_model(mode=mode, dtype=np.float32)
        out = run_sequence(seq.frames, m, infer=True)
        assert len(out.frames) == 2
        save_arrays(tmp_path / f"{mode}.ckpt", m.state_arrays())
        m2 = tiny_model(mode=mode, seed=9, dtype=np.float32)
        m2.load_arrays(load_arrays(tmp_path / f"{mode}.ckpt"))
        again = run_sequence(seq.frames, m2, infer=True)
        np.testing.assert_array_equal(out.frames[1].post.centers.data, again.frames[1].post.centers.data)
    with pytest.raises(KeyError):
        tiny_model(mode="lstm").load_arrays(load_arrays(tmp_path / "single.ckpt"))


def test_bad_model_config_rejected():
    with pytest.raises(ValueError):
        ModelConfig(mode="stacked")
    with pytest.raises(ValueError):
        LstmConfig(state_width=4, decoder_width=15)
