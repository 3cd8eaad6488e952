"""End-to-end tracking: per-frame inference over a sequence and training.

The regressor crops both frames around the previous box, expresses them in
that box's local frame, voxelizes at two scales, and regresses the pose
increment in one shot. Training minimizes a likelihood loss on the
scale-standardized residuals of consecutive-frame samples whose previous box
is jittered ground truth.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, backward, save_checkpoint, step_adam
from .backbone import BackboneConfig, backbone_forward, init_backbone_params
from .geometry import (Box3D, BoxOffset, GridTrackError, PointCloud,
                       TrackedSequence, apply_offset, canonicalize,
                       crop_region, offset_label)
from .head import (OffsetPrediction, bev_width, head_forward, init_head_params,
                   rle_loss, to_bev)
from .voxelize import VoxelGrid, VoxelizerConfig, dual_voxelize


class TrainingDiverged(GridTrackError):
    """Raised when the loss goes non-finite; carries the offending sample."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrackerState:
    """Current box plus the per-frame prediction history."""

    current_box: Box3D
    frame_index: int = 0
    history: list[Box3D] = field(default_factory=list)
    fallback_frames: list[int] = field(default_factory=list)

    @property
    def fallback_count(self) -> int:
        return len(self.fallback_frames)


@dataclass
class TrainSample:
    """One cropped, canonicalized frame pair with its regression target."""

    prev_cloud: PointCloud
    cur_cloud: PointCloud
    label: BoxOffset
    category: str = "Car"
    prev_points: int = 0
    cur_points: int = 0


class OffsetRegressor:
    """The trainable crop -> voxelize -> encode -> regress model."""

    def __init__(self, voxel_cfg: VoxelizerConfig, backbone_cfg: BackboneConfig,
                 head_hidden: tuple[int, ...], params: ParamStore,
                 crop_margin: float = 2.0, loss_kind: str = "rle"):
        self.voxel_cfg = voxel_cfg
        self.backbone_cfg = backbone_cfg
        self.head_hidden = tuple(head_hidden)
        self.params = params
        self.crop_margin = float(crop_margin)
        self.loss_kind = loss_kind

    def forward_grids(self, large: VoxelGrid, small: VoxelGrid) -> OffsetPrediction:
        fused = backbone_forward(large, small, self.params, self.backbone_cfg)
        return head_forward(to_bev(fused), self.params, self.head_hidden)

    def predict(self, prev_canonical: PointCloud,
                cur_canonical: PointCloud) -> OffsetPrediction:
        large, small = dual_voxelize(prev_canonical, cur_canonical, self.voxel_cfg)
        return self.forward_grids(large, small)


class ZeroRegressor:
    """Constant-position baseline: always predicts a zero offset."""

    crop_margin = 0.0

    def predict(self, prev_canonical, cur_canonical) -> OffsetPrediction:
        return OffsetPrediction(ad.DiffTensor(np.zeros(4)),
                                ad.DiffTensor(np.zeros(4)))


def build_regressor(voxel_cfg: VoxelizerConfig, backbone_cfg: BackboneConfig,
                    head_hidden: tuple[int, ...], seed: int,
                    crop_margin: float = 2.0,
                    loss_kind: str = "rle") -> OffsetRegressor:
    """Fresh model with seeded fan-in-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_backbone_params(store, backbone_cfg, rng)
    out_dims = backbone_cfg.out_dims(voxel_cfg.dims(voxel_cfg.scale_ratio))
    width = bev_width(out_dims, backbone_cfg.out_channels)
    init_head_params(store, width, tuple(head_hidden), rng)
    return OffsetRegressor(voxel_cfg, backbone_cfg, tuple(head_hidden), store,
                           crop_margin=crop_margin, loss_kind=loss_kind)


def regressor_from_config(run_cfg, seed: int | None = None,
                          checkpoint=None) -> OffsetRegressor:
    """Build a model from a RunConfig, optionally loading a checkpoint."""
    model = build_regressor(run_cfg.voxel, run_cfg.backbone, run_cfg.head_hidden,
                            run_cfg.seed if seed is None else seed,
                            crop_margin=run_cfg.crop_margin,
                            loss_kind=run_cfg.loss_kind)
    if checkpoint is not None:
        loaded = ad.load_checkpoint(checkpoint)
        expected = model.params.names()
        if loaded.names() != expected:
            raise GridTrackError(
                f"checkpoint {checkpoint} does not match the configured model "
                f"({len(loaded.names())} tensors vs {len(expected)} expected)")
        for name in expected:
            if loaded[name].data.shape != model.params[name].data.shape:
                raise GridTrackError(
                    f"checkpoint tensor {name} has shape "
                    f"{loaded[name].data.shape}, config wants "
                    f"{model.params[name].data.shape}")
        model.params = loaded
    return model


def track_step(state: TrackerState, prev_cloud: PointCloud,
               cur_cloud: PointCloud, model) -> TrackerState:
    """Advance the tracker by one frame.

    If both crops come back empty (or the prediction is non-finite) the box
    is carried over unchanged and the frame is flagged.
    """
    ref = state.current_box
    margin = getattr(model, "crop_margin", 0.0)
    prev_c = canonicalize(crop_region(prev_cloud, ref, margin), ref)
    cur_c = canonicalize(crop_region(cur_cloud, ref, margin), ref)
    fallback = False
    if len(prev_c) == 0 and len(cur_c) == 0:
        new_box = Box3D(ref.center.copy(), ref.size.copy(), ref.yaw)
        fallback = True
    else:
        mu = model.predict(prev_c, cur_c).mu_array()
        if not np.isfinite(mu).all():
            new_box = Box3D(ref.center.copy(), ref.size.copy(), ref.yaw)
            fallback = True
        else:
            new_box = apply_offset(ref, BoxOffset(*mu))
    idx = state.frame_index + 1
    fb = state.fallback_frames + [idx] if fallback else state.fallback_frames
    return TrackerState(new_box, idx, state.history + [new_box], fb)


def track_sequence(seq: TrackedSequence, model) -> TrackerState:
    """One-pass tracking from the ground-truth first box.

    The returned state's ``history`` holds one predicted box per frame from
    the second onward (length ``len(seq) - 1``).
    """
    state = TrackerState(seq.gt_boxes[0])
    for t in range(1, len(seq)):
        state = track_step(state, seq.frames[t - 1], seq.frames[t], model)
    return state


def make_train_samples(seq: TrackedSequence, rng: np.random.Generator,
                       crop_margin: float = 2.0,
                       jitter_translation: float = 0.3,
                       jitter_yaw: float = 0.1) -> list[TrainSample]:
    """Consecutive-frame samples with drift-simulating box jitter.

    The cropping box is the previous ground truth perturbed by bounded
    uniform jitter; the label is recomputed against the jittered box so that
    label composition stays exact. Pairs whose crops are both empty are
    skipped.
    """
    samples = []
    for t in range(1, len(seq)):
        shift = rng.uniform(-jitter_translation, jitter_translation, size=3)
        dyaw = rng.uniform(-jitter_yaw, jitter_yaw)
        prev_gt = seq.gt_boxes[t - 1]
        jittered = Box3D(prev_gt.center + shift, prev_gt.size.copy(),
                         prev_gt.yaw + dyaw)
        prev_c = canonicalize(crop_region(seq.frames[t - 1], jittered, crop_margin),
                              jittered)
        cur_c = canonicalize(crop_region(seq.frames[t], jittered, crop_margin),
                             jittered)
        if len(prev_c) == 0 and len(cur_c) == 0:
            continue
        label = offset_label(jittered, seq.gt_boxes[t])
        samples.append(TrainSample(prev_c, cur_c, label, seq.category,
                                   prev_points=len(prev_c), cur_points=len(cur_c)))
    return samples


@dataclass
class TrainReport:
    epoch_losses: list[float]
    checkpoint_path: str | None
    samples_per_epoch: int
    skipped_pairs: int = 0


def train(dataset: list[TrackedSequence], model: OffsetRegressor, *,
          epochs: int = 2, lr: float = 2e-3, lr_schedule: str = "linear",
          betas=(0.9, 0.999), eps: float = 1e-8, grad_accum: int = 4,
          jitter_translation: float = 0.3, jitter_yaw: float = 0.1,
          seed: int = 0, checkpoint_path=None, log_path=None) -> TrainReport:
    """Minimize the regression loss over jittered frame-pair samples.

    Deterministic for a fixed seed: sample jitter, epoch shuffles, and the
    optimizer all draw from one seeded generator. A non-finite loss aborts
    with a diagnostic dump of the offending sample.
    """
    if lr_schedule not in ("linear", "constant"):
        raise GridTrackError(f"unknown lr schedule {lr_schedule!r}")
    rng = np.random.default_rng(seed)
    samples: list[TrainSample] = []
    skipped = 0
    for seq in dataset:
        got = make_train_samples(seq, rng, crop_margin=model.crop_margin,
                                 jitter_translation=jitter_translation,
                                 jitter_yaw=jitter_yaw)
        skipped += (len(seq) - 1) - len(got)
        samples.extend(got)
    if not samples:
        raise GridTrackError("no usable training samples")

    grids = [dual_voxelize(s.prev_cloud, s.cur_cloud, model.voxel_cfg)
             for s in samples]
    total_steps = epochs * len(samples)
    log_records = []
    epoch_losses = []
    step = 0
    pending = 0
    model.params.zero_grads()
    for epoch in range(epochs):
        t0 = time.monotonic()
        order = rng.permutation(len(samples))
        loss_sum = 0.0
        for i in order:
            sample = samples[i]
            pred = model.forward_grids(*grids[i])
            loss = rle_loss(pred, sample.label, kind=model.loss_kind)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} sample {i}",
                    diagnostics={"epoch": epoch, "sample_index": int(i),
                                 "label": sample.label.as_array().tolist(),
                                 "prev_points": sample.prev_points,
                                 "cur_points": sample.cur_points,
                                 "mu": pred.mu.data.tolist()})
            loss_sum += value
            backward(ad.mul(loss, 1.0 / grad_accum))
            pending += 1
            step += 1
            if pending == grad_accum or step == total_steps:
                frac = step / total_steps
                cur_lr = lr * (1.0 - frac) if lr_schedule == "linear" else lr
                cur_lr = max(cur_lr, lr * 1e-3)
                step_adam(model.params, cur_lr, betas=betas, eps=eps)
                model.params.zero_grads()
                pending = 0
        mean_loss = loss_sum / len(samples)
        epoch_losses.append(mean_loss)
        log_records.append({"epoch": epoch, "mean_loss": mean_loss,
                            "samples": len(samples),
                            "wall_time_s": round(time.monotonic() - t0, 3)})
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model.params)
    if log_path is not None:
        with open(log_path, "w") as fh:
            for rec in log_records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return TrainReport(epoch_losses,
                       str(checkpoint_path) if checkpoint_path else None,
                       len(samples), skipped)
