"""KITTI tracking-format ingestion.

Velodyne scans are consecutive 16-byte records of four little-endian float32
values (x, y, z, intensity). Labels follow the tracking benchmark's text
format (camera-rect frame, y down, box pose at the bottom center); poses are
converted once at ingestion so everything downstream is LiDAR-frame z-up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (Box3D, GridTrackError, PointCloud, TrackedSequence,
                       points_in_box, wrap_angle)


class FormatError(GridTrackError):
    pass


RECORD_BYTES = 16


def read_velodyne(path) -> PointCloud:
    """Parse a velodyne .bin file into a cloud with intensities."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise GridTrackError(f"cannot read {path}: {exc}") from exc
    if len(raw) % RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of {RECORD_BYTES}")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(data[:, :3].astype(np.float64),
                      data[:, 3].astype(np.float64))


def write_velodyne(path, cloud: PointCloud) -> None:
    """Write a cloud in the same record layout (float32 storage)."""
    n = len(cloud)
    data = np.zeros((n, 4), dtype="<f4")
    data[:, :3] = cloud.xyz
    if cloud.intensity is not None:
        data[:, 3] = cloud.intensity
    Path(path).write_bytes(data.tobytes())


@dataclass
class KittiCalib:
    """Rigid camera-rect <-> LiDAR transform from a calib file."""

    cam_from_velo: np.ndarray  # 4x4

    def __post_init__(self):
        rot = self.cam_from_velo[:3, :3]
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > 1e-6:
            raise FormatError(f"calibration rotation not orthonormal (err {err:.2e})")

    @property
    def velo_from_cam(self) -> np.ndarray:
        rot = self.cam_from_velo[:3, :3]
        t = self.cam_from_velo[:3, 3]
        inv = np.eye(4)
        inv[:3, :3] = rot.T
        inv[:3, 3] = -rot.T @ t
        return inv

    def cam_to_velo(self, xyz_cam: np.ndarray) -> np.ndarray:
        xyz_cam = np.atleast_2d(xyz_cam)
        homo = np.column_stack([xyz_cam, np.ones(len(xyz_cam))])
        return (homo @ self.velo_from_cam.T)[:, :3]

    def velo_to_cam(self, xyz_velo: np.ndarray) -> np.ndarray:
        xyz_velo = np.atleast_2d(xyz_velo)
        homo = np.column_stack([xyz_velo, np.ones(len(xyz_velo))])
        return (homo @ self.cam_from_velo.T)[:, :3]


def _parse_matrix_line(values: list[str]) -> np.ndarray:
    nums = [float(v) for v in values]
    if len(nums) == 12:
        return np.array(nums).reshape(3, 4)
    if len(nums) == 9:
        return np.array(nums).reshape(3, 3)
    raise FormatError(f"unexpected calibration entry of {len(nums)} values")


def parse_calib(path) -> KittiCalib:
    """Read a KITTI calib file; accepts the object and tracking key spellings."""
    path = Path(path)
    if not path.exists():
        raise GridTrackError(f"missing calibration file {path}")
    entries = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, rest = line.partition(":")
        parts = rest.split() if rest else line.split()[1:]
        key = key.split()[0]
        entries[key] = _parse_matrix_line(parts)
    tr = None
    for key in ("Tr_velo_to_cam", "Tr_velo_cam"):
        if key in entries:
            tr = entries[key]
            break
    if tr is None:
        raise FormatError(f"{path}: no velodyne-to-camera transform found")
    rect = np.eye(4)
    for key in ("R0_rect", "R_rect"):
        if key in entries:
            block = entries[key]
            rect[:3, :3] = block[:3, :3]
            break
    velo_to_cam = np.eye(4)
    velo_to_cam[:3, :] = tr
    return KittiCalib(rect @ velo_to_cam)


@dataclass
class KittiLabel:
    frame: int
    track_id: int
    object_type: str
    h: float
    w: float
    l: float
    location: np.ndarray  # camera-rect frame, bottom center
    rotation_y: float


def parse_tracking_labels(path) -> list[KittiLabel]:
    """Parse a label_02-style file (one whitespace-separated record per line)."""
    path = Path(path)
    labels = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 17:
            raise FormatError(f"{path}:{lineno}: expected >= 17 fields, "
                              f"got {len(parts)}")
        if parts[2] == "DontCare":
            continue
        labels.append(KittiLabel(
            frame=int(parts[0]), track_id=int(parts[1]), object_type=parts[2],
            h=float(parts[10]), w=float(parts[11]), l=float(parts[12]),
            location=np.array([float(parts[13]), float(parts[14]),
                               float(parts[15])]),
            rotation_y=float(parts[16])))
    return labels


def label_to_box(label: KittiLabel, calib: KittiCalib) -> Box3D:
    """Camera-rect label pose -> LiDAR-frame box (z-up, center at volume center)."""
    center = calib.cam_to_velo(label.location)[0]
    center[2] += label.h / 2.0  # KITTI poses sit at the box bottom
    yaw = wrap_angle(-label.rotation_y - math.pi / 2.0)
    return Box3D(center, np.array([label.w, label.h, label.l]), yaw)


def _find_one(directory: Path, candidates: list[str], what: str) -> Path:
    for name in candidates:
        p = directory / name
        if p.exists():
            return p
    raise GridTrackError(f"{directory}: no {what} found (tried {candidates})")


def kitti_to_tracklets(sequence_dir, category: str) -> list[TrackedSequence]:
    """Build per-track sequences from one KITTI tracking sequence directory.

    Expects ``velodyne/<frame>.bin`` scans plus a label_02-style annotation
    file and a calib file in the directory. Tracks are grouped by identity
    and category; annotation gaps split a track into separate tracklets;
    tracklets shorter than 2 frames are dropped.
    """
    sequence_dir = Path(sequence_dir)
    velo_dir = sequence_dir / "velodyne"
    if not velo_dir.is_dir():
        raise GridTrackError(f"{sequence_dir}: missing velodyne/ directory")
    label_path = _find_one(sequence_dir,
                           ["label_02.txt", "labels.txt", "label.txt"],
                           "label file")
    calib = parse_calib(_find_one(sequence_dir, ["calib.txt"], "calib file"))

    labels = [lb for lb in parse_tracking_labels(label_path)
              if lb.object_type.lower() == category.lower()]
    by_track: dict[int, list[KittiLabel]] = {}
    for lb in labels:
        by_track.setdefault(lb.track_id, []).append(lb)

    cloud_cache: dict[int, PointCloud] = {}

    def frame_cloud(frame: int) -> PointCloud:
        if frame not in cloud_cache:
            cloud_cache[frame] = read_velodyne(velo_dir / f"{frame:06d}.bin")
        return cloud_cache[frame]

    tracklets = []
    for track_id in sorted(by_track):
        records = sorted(by_track[track_id], key=lambda lb: lb.frame)
        runs: list[list[KittiLabel]] = [[records[0]]]
        for lb in records[1:]:
            if lb.frame == runs[-1][-1].frame + 1:
                runs[-1].append(lb)
            else:
                runs.append([lb])
        for run in runs:
            if len(run) < 2:
                continue
            frames = [frame_cloud(lb.frame) for lb in run]
            boxes = [label_to_box(lb, calib) for lb in run]
            first_points = int(points_in_box(frames[0], boxes[0]).sum())
            tracklets.append(TrackedSequence(
                frames, boxes, category=category,
                metadata={"track_id": track_id,
                          "first_frame": run[0].frame,
                          "first_frame_points": first_points}))
    return tracklets
