"""Procedural LiDAR sequences: a box-surface target moving through clutter.

Target points are sampled on the moving box's faces (a scanner sees
surfaces), jittered by truncated Gaussian noise, and mixed with optional
distractor clusters and uniform clutter. Ground-truth boxes follow the
motion model exactly and everything is deterministic per seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (Box3D, GridTrackError, PointCloud, TrackedSequence,
                       rotation_z, wrap_angle)

POINT_JITTER_SIGMA = 0.02  # meters; truncated at 3 sigma


@dataclass
class SyntheticSceneConfig:
    target_size: tuple[float, float, float] = (1.8, 1.5, 4.2)  # w, h, l
    max_speed: float = 0.35          # meters per frame
    min_speed: float = 0.15
    max_yaw_rate: float = 0.03       # radians per frame
    points_per_frame: int = 64       # Poisson mean for the target
    clutter_density: float = 0.05    # clutter points as a fraction of target mean
    dropout: float = 0.0             # probability a target point is discarded
    distractor_count: int = 0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.dropout <= 1.0):
            raise GridTrackError(f"dropout must be in [0, 1], got {self.dropout}")
        if not (0.0 <= self.clutter_density <= 1.0):
            raise GridTrackError(
                f"clutter_density must be in [0, 1], got {self.clutter_density}")
        if any(s <= 0 for s in self.target_size):
            raise GridTrackError("target_size must be positive")
        if self.distractor_count < 0:
            raise GridTrackError("distractor_count must be >= 0")


def _sample_box_surface(rng: np.random.Generator, n: int, size) -> np.ndarray:
    """Uniform samples on the surface of a centered box, in its local frame."""
    w, h, l = size
    half = np.array([l / 2, w / 2, h / 2])  # local x, y, z half-extents
    # face areas: +-x: w*h, +-y: l*h, +-z: l*w
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, size=(n, 3))
    pts = u * half
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _box_points(rng, n, box: Box3D) -> np.ndarray:
    local = _sample_box_surface(rng, n, box.size)
    jitter = rng.normal(scale=POINT_JITTER_SIGMA, size=(n, 3))
    np.clip(jitter, -3 * POINT_JITTER_SIGMA, 3 * POINT_JITTER_SIGMA, out=jitter)
    return (local + jitter) @ rotation_z(box.yaw).T + box.center


@dataclass
class _Mover:
    box: Box3D
    velocity: np.ndarray
    yaw_rate: float

    def pose_at(self, t: int) -> Box3D:
        return Box3D(self.box.center + self.velocity * t, self.box.size.copy(),
                     wrap_angle(self.box.yaw + self.yaw_rate * t))


def generate_synthetic(cfg: SyntheticSceneConfig, num_frames: int) -> TrackedSequence:
    """One deterministic sequence with exact ground-truth boxes."""
    if num_frames < 2:
        raise GridTrackError("a sequence needs at least 2 frames")
    rng = np.random.default_rng(cfg.seed)

    speed = rng.uniform(cfg.min_speed, cfg.max_speed)
    heading = rng.uniform(-np.pi, np.pi)
    velocity = speed * np.array([np.cos(heading), np.sin(heading), 0.0])
    target = _Mover(Box3D(np.array([0.0, 0.0, 0.0]), np.array(cfg.target_size),
                          heading),
                    velocity, rng.uniform(-cfg.max_yaw_rate, cfg.max_yaw_rate))

    distractors = []
    for _ in range(cfg.distractor_count):
        angle = rng.uniform(-np.pi, np.pi)
        radius = rng.uniform(2.5, 5.0)
        start = target.box.center + radius * np.array(
            [np.cos(angle), np.sin(angle), 0.0])
        d_speed = rng.uniform(cfg.min_speed, cfg.max_speed)
        d_heading = rng.uniform(-np.pi, np.pi)
        d_vel = d_speed * np.array([np.cos(d_heading), np.sin(d_heading), 0.0])
        d_size = np.array(cfg.target_size) * rng.uniform(0.8, 1.2, size=3)
        distractors.append(_Mover(Box3D(start, d_size, d_heading), d_vel,
                                  rng.uniform(-cfg.max_yaw_rate, cfg.max_yaw_rate)))

    frames = []
    gt_boxes = []
    first_frame_points = 0
    for t in range(num_frames):
        box_t = target.pose_at(t)
        gt_boxes.append(box_t)
        n = max(1, int(rng.poisson(cfg.points_per_frame)))
        keep = rng.random(n) >= cfg.dropout
        pts = _box_points(rng, n, box_t)[keep]
        if t == 0:
            first_frame_points = int(pts.shape[0])
        parts = [pts]
        for mover in distractors:
            m = max(1, int(rng.poisson(cfg.points_per_frame // 2)))
            parts.append(_box_points(rng, m, mover.pose_at(t)))
        n_clutter = int(rng.poisson(cfg.clutter_density * cfg.points_per_frame))
        if n_clutter:
            lo = box_t.center - np.array([8.0, 8.0, 1.5])
            hi = box_t.center + np.array([8.0, 8.0, 2.5])
            parts.append(rng.uniform(lo, hi, size=(n_clutter, 3)))
        all_pts = np.concatenate(parts, axis=0)
        frames.append(PointCloud(all_pts[rng.permutation(all_pts.shape[0])]))

    return TrackedSequence(
        frames, gt_boxes, category="Synthetic",
        metadata={"first_frame_points": first_frame_points,
                  "distractors": cfg.distractor_count,
                  "seed": cfg.seed})


# --- disk format -----------------------------------------------------------
#
# A sequence directory holds one little-endian float32 x/y/z/intensity record
# file per frame plus a sidecar ground-truth file with one line per frame:
# "index x y z w h l yaw". Dataset directories hold seq_* subdirectories and
# a manifest.

def save_sequence(directory, seq: TrackedSequence) -> None:
    from .kitti import write_velodyne

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for t, (frame, box) in enumerate(zip(seq.frames, seq.gt_boxes)):
        write_velodyne(directory / f"frame_{t:04d}.bin", frame)
        vals = " ".join(f"{v:.17g}" for v in
                        (*box.center, *box.size, box.yaw))
        lines.append(f"{t} {vals}")
    (directory / "gt.txt").write_text("\n".join(lines) + "\n")
    meta = {"category": seq.category, "num_frames": len(seq), **seq.metadata}
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_sequence(directory) -> TrackedSequence:
    from .kitti import read_velodyne

    directory = Path(directory)
    gt_path = directory / "gt.txt"
    if not gt_path.exists():
        raise GridTrackError(f"{directory}: missing gt.txt")
    frames = []
    boxes = []
    for line in gt_path.read_text().splitlines():
        parts = line.split()
        t = int(parts[0])
        vals = [float(v) for v in parts[1:]]
        frames.append(read_velodyne(directory / f"frame_{t:04d}.bin"))
        boxes.append(Box3D(vals[0:3], vals[3:6], vals[6]))
    meta = {}
    meta_path = directory / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    category = meta.pop("category", "Synthetic")
    meta.pop("num_frames", None)
    return TrackedSequence(frames, boxes, category=category, metadata=meta)


def save_dataset(directory, sequences: list[TrackedSequence]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, seq in enumerate(sequences):
        save_sequence(directory / f"seq_{i:04d}", seq)
    manifest = {"num_sequences": len(sequences)}
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True) + "\n")


def load_dataset(directory) -> list[TrackedSequence]:
    directory = Path(directory)
    subdirs = sorted(p for p in directory.iterdir()
                     if p.is_dir() and p.name.startswith("seq_"))
    if not subdirs:
        raise GridTrackError(f"{directory}: no seq_* subdirectories")
    sequences = []
    for p in subdirs:
        seq = load_sequence(p)
        seq.metadata.setdefault("name", p.name)
        sequences.append(seq)
    return sequences
