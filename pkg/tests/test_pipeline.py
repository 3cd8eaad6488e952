"""Tracking loop, sample construction, and training mechanics."""

import dataclasses

import numpy as np
import pytest

from gridtrack.config import config_from_dict
from gridtrack.geometry import Box3D, PointCloud, TrackedSequence, apply_offset
from gridtrack.pipeline import (TrackerState, ZeroRegressor,
                                make_train_samples, regressor_from_config,
                                track_sequence, track_step, train)
from gridtrack.synthetic import generate_synthetic

TINY = {
    "voxel": {"size": [0.4, 0.4, 0.4],
              "extent": [[-1.6, 1.6], [-1.6, 1.6], [-1.6, 1.6]]},
    "backbone": {"num_stages": 2, "base_channels": 2},
    "head": {"hidden": [8]},
    "synthetic": {"points_per_frame": 24, "num_frames": 5},
}


@pytest.fixture(scope="module")
def tiny_cfg():
    return config_from_dict(TINY)


@pytest.fixture(scope="module")
def tiny_model(tiny_cfg):
    return regressor_from_config(tiny_cfg)


def straight_line_sequence(num_frames=6, step=0.25, n_points=40, seed=0):
    rng = np.random.default_rng(seed)
    frames, boxes = [], []
    for t in range(num_frames):
        center = np.array([step * t, 0.0, 0.0])
        boxes.append(Box3D(center, (1.0, 1.0, 1.5), 0.0))
        pts = center + rng.uniform(-0.5, 0.5, size=(n_points, 3))
        frames.append(PointCloud(pts))
    return TrackedSequence(frames, boxes, category="Test")


class TestTrackStep:
    def test_zero_model_carries_box_exactly(self, tiny_cfg):
        model = ZeroRegressor()
        model.crop_margin = tiny_cfg.crop_margin
        seq = straight_line_sequence()
        state = TrackerState(seq.gt_boxes[0])
        out = track_step(state, seq.frames[0], seq.frames[1], model)
        assert np.array_equal(out.current_box.center, seq.gt_boxes[0].center)
        assert out.current_box.yaw == seq.gt_boxes[0].yaw
        assert out.fallback_count == 0
        assert out.frame_index == 1

    def test_zero_weight_head_equals_zero_model(self, tiny_cfg):
        model = regressor_from_config(tiny_cfg)
        last = len(model.head_hidden)
        model.params[f"head.mlp.{last}.w"].data[:] = 0.0
        model.params[f"head.mlp.{last}.b"].data[:] = 0.0
        seq = straight_line_sequence()
        state = track_step(TrackerState(seq.gt_boxes[0]),
                           seq.frames[0], seq.frames[1], model)
        assert np.array_equal(state.current_box.center, seq.gt_boxes[0].center)

    def test_empty_crops_trigger_fallback(self, tiny_model):
        box = Box3D((0, 0, 0), (1, 1, 1), 0.0)
        empty = PointCloud.empty()
        state = track_step(TrackerState(box), empty, empty, tiny_model)
        assert state.fallback_count == 1
        assert state.fallback_frames == [1]
        assert np.array_equal(state.current_box.center, box.center)

    def test_history_grows_per_step(self, tiny_model):
        seq = straight_line_sequence()
        state = TrackerState(seq.gt_boxes[0])
        for t in range(1, 4):
            state = track_step(state, seq.frames[t - 1], seq.frames[t],
                               tiny_model)
        assert state.frame_index == 3
        assert len(state.history) == 3


class TestTrackSequence:
    def test_output_length_is_frames_minus_one(self, tiny_model):
        seq = straight_line_sequence(num_frames=7)
        state = track_sequence(seq, tiny_model)
        assert len(state.history) == 6

    def test_two_frame_zero_model_returns_first_box(self, tiny_cfg):
        model = ZeroRegressor()
        model.crop_margin = tiny_cfg.crop_margin
        seq = straight_line_sequence(num_frames=2)
        state = track_sequence(seq, model)
        assert len(state.history) == 1
        assert np.array_equal(state.history[0].center, seq.gt_boxes[0].center)

    def test_deterministic_replay(self, tiny_model):
        seq = straight_line_sequence()
        one = track_sequence(seq, tiny_model)
        two = track_sequence(seq, tiny_model)
        for a, b in zip(one.history, two.history):
            assert np.array_equal(a.center, b.center)
            assert a.yaw == b.yaw

    def test_causality_never_reads_future_frames(self, tiny_model):
        seq = straight_line_sequence(num_frames=5)

        class ExplodingCloud(PointCloud):
            def __getattribute__(self, name):
                if name in ("xyz", "intensity"):
                    raise AssertionError("future frame accessed")
                return super().__getattribute__(name)

        # replace the final frame: tracking frames 1..3 must never touch it
        frames = list(seq.frames)
        poisoned = ExplodingCloud.__new__(ExplodingCloud)
        object.__setattr__(poisoned, "xyz", seq.frames[-1].xyz)
        object.__setattr__(poisoned, "intensity", None)
        frames[-1] = poisoned
        state = TrackerState(seq.gt_boxes[0])
        for t in range(1, 4):
            state = track_step(state, frames[t - 1], frames[t], tiny_model)
        assert len(state.history) == 3


class TestMakeTrainSamples:
    def test_zero_jitter_label_is_raw_offset(self):
        from gridtrack.geometry import offset_label
        seq = straight_line_sequence()
        rng = np.random.default_rng(0)
        samples = make_train_samples(seq, rng, crop_margin=1.0,
                                     jitter_translation=0.0, jitter_yaw=0.0)
        assert len(samples) == len(seq) - 1
        for t, s in enumerate(samples, start=1):
            want = offset_label(seq.gt_boxes[t - 1], seq.gt_boxes[t])
            assert np.allclose(s.label.as_array(), want.as_array())

    def test_label_consistent_with_jittered_box(self):
        # reimplement the jitter stream to audit label construction
        from gridtrack.geometry import offset_label
        seq = straight_line_sequence(seed=3)
        samples = make_train_samples(seq, np.random.default_rng(7),
                                     crop_margin=1.0)
        rng = np.random.default_rng(7)
        for t, s in enumerate(samples, start=1):
            shift = rng.uniform(-0.3, 0.3, size=3)
            dyaw = rng.uniform(-0.1, 0.1)
            prev = seq.gt_boxes[t - 1]
            jittered = Box3D(prev.center + shift, prev.size.copy(),
                             prev.yaw + dyaw)
            want = offset_label(jittered, seq.gt_boxes[t])
            assert np.allclose(s.label.as_array(), want.as_array(), atol=1e-12)
            # composition must land exactly on the current ground truth
            rebuilt = apply_offset(jittered, s.label)
            assert np.abs(rebuilt.center - seq.gt_boxes[t].center).max() < 1e-9

    def test_fixed_seed_reproduces_stream(self):
        seq = straight_line_sequence(seed=5)
        a = make_train_samples(seq, np.random.default_rng(11), crop_margin=1.0)
        b = make_train_samples(seq, np.random.default_rng(11), crop_margin=1.0)
        for s1, s2 in zip(a, b):
            assert np.array_equal(s1.prev_cloud.xyz, s2.prev_cloud.xyz)
            assert np.array_equal(s1.label.as_array(), s2.label.as_array())

    def test_empty_pairs_skipped(self, tiny_cfg):
        frames = [PointCloud.empty() for _ in range(3)]
        boxes = [Box3D((0, 0, 0), (1, 1, 1), 0.0)] * 3
        seq = TrackedSequence(frames, boxes)
        samples = make_train_samples(seq, np.random.default_rng(0),
                                     crop_margin=1.0)
        assert samples == []


class TestTrain:
    def _dataset(self, cfg, n=2):
        return [generate_synthetic(dataclasses.replace(cfg.synthetic, seed=s), 5)
                for s in range(n)]

    def test_lr_zero_keeps_parameters_byte_identical(self, tiny_cfg):
        model = regressor_from_config(tiny_cfg)
        before = {n: model.params[n].data.copy()
                  for n in model.params.names()}
        train(self._dataset(tiny_cfg), model, epochs=1, lr=0.0,
              lr_schedule="constant", seed=0)
        for name, old in before.items():
            assert np.array_equal(model.params[name].data, old)

    def test_seeded_runs_replay_identically(self, tiny_cfg):
        m1 = regressor_from_config(tiny_cfg)
        m2 = regressor_from_config(tiny_cfg)
        rep1 = train(self._dataset(tiny_cfg), m1, epochs=2, lr=0.01, seed=3)
        rep2 = train(self._dataset(tiny_cfg), m2, epochs=2, lr=0.01, seed=3)
        assert rep1.epoch_losses == rep2.epoch_losses
        for name in m1.params.names():
            assert np.array_equal(m1.params[name].data, m2.params[name].data)

    def test_nan_loss_aborts_with_diagnostics(self, tiny_cfg):
        from gridtrack.pipeline import TrainingDiverged
        model = regressor_from_config(tiny_cfg)
        # poison the output layer so the loss itself goes non-finite
        last = len(model.head_hidden)
        model.params[f"head.mlp.{last}.w"].data[0, 0] = np.nan
        with pytest.raises(TrainingDiverged) as info:
            train(self._dataset(tiny_cfg), model, epochs=1, lr=0.01, seed=0)
        assert "sample_index" in info.value.diagnostics
        assert "label" in info.value.diagnostics

    def test_overfit_loss_is_non_increasing_after_smoothing(self, tiny_cfg):
        # one sample repeated 8x per epoch; window-10 smoothing of the
        # per-epoch means. Tolerance covers Adam's floor oscillation once
        # the loss has converged (upticks < 5e-4 on a descent of ~1.5).
        cfg = dataclasses.replace(tiny_cfg, loss_kind="l1")
        seq = generate_synthetic(
            dataclasses.replace(cfg.synthetic, seed=2), 2)
        model = regressor_from_config(cfg)
        report = train([seq] * 8, model, epochs=100, lr=0.01, grad_accum=1,
                       jitter_translation=0.0, jitter_yaw=0.0, seed=0)
        losses = np.array(report.epoch_losses)
        smoothed = np.convolve(losses, np.ones(10) / 10, mode="valid")
        assert (np.diff(smoothed) <= 1e-3).all()
        assert losses[-1] < 1e-3 * losses[0]

    def test_writes_checkpoint_and_log(self, tiny_cfg, tmp_path):
        model = regressor_from_config(tiny_cfg)
        report = train(self._dataset(tiny_cfg), model, epochs=1, lr=0.01,
                       seed=0, checkpoint_path=tmp_path / "m.ckpt",
                       log_path=tmp_path / "train.log")
        assert (tmp_path / "m.ckpt").exists()
        lines = (tmp_path / "train.log").read_text().splitlines()
        assert len(lines) == 1
        import json
        rec = json.loads(lines[0])
        assert rec["epoch"] == 0
        assert rec["mean_loss"] == report.epoch_losses[0]


def test_regressor_from_config_checkpoint_round_trip(tiny_cfg, tmp_path):
    from gridtrack.autodiff import save_checkpoint
    m1 = regressor_from_config(tiny_cfg)
    save_checkpoint(tmp_path / "m.ckpt", m1.params)
    m2 = regressor_from_config(tiny_cfg, checkpoint=tmp_path / "m.ckpt")
    for name in m1.params.names():
        assert np.array_equal(m1.params[name].data, m2.params[name].data)


def test_checkpoint_config_mismatch_rejected(tiny_cfg, tmp_path):
    from gridtrack.autodiff import save_checkpoint
    from gridtrack.geometry import GridTrackError
    other = config_from_dict({**TINY, "backbone": {"num_stages": 1,
                                                   "base_channels": 2}})
    m1 = regressor_from_config(other)
    save_checkpoint(tmp_path / "m.ckpt", m1.params)
    with pytest.raises(GridTrackError):
        regressor_from_config(tiny_cfg, checkpoint=tmp_path / "m.ckpt")
