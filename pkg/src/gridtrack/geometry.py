"""Point clouds, oriented boxes, and the transforms that connect them.

Conventions used across the package:
  * coordinates are right-handed, z-up, in meters;
  * a box's local frame has x along the heading (length), y lateral (width),
    z up (height), so ``size = (w, h, l)`` maps to extents
    ``(|y| <= w/2, |z| <= h/2, |x| <= l/2)``;
  * yaw is the rotation about z, stored normalized to (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


class GridTrackError(Exception):
    """Base class for package errors."""


class ValidationError(GridTrackError):
    """Raised when a domain value violates its invariants."""


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]. Idempotent."""
    w = math.fmod(theta, TWO_PI)
    if w <= -math.pi:
        w += TWO_PI
    elif w > math.pi:
        w -= TWO_PI
    return w


def angle_difference(a: float, b: float) -> float:
    """Shortest signed angular difference a - b, in (-pi, pi]."""
    return wrap_angle(a - b)


def rotation_z(yaw: float) -> np.ndarray:
    """3x3 rotation matrix about the z axis."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class PointCloud:
    """An ordered set of 3D points with optional per-point reflectance.

    Attributes:
        xyz: (N, 3) float64 array of coordinates in meters.
        intensity: optional (N,) float64 array aligned with ``xyz``.
    """

    xyz: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.xyz).all():
            raise ValidationError("point cloud contains non-finite coordinates")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).ravel()
            if self.intensity.shape[0] != self.xyz.shape[0]:
                raise ValidationError(
                    f"intensity length {self.intensity.shape[0]} != "
                    f"point count {self.xyz.shape[0]}"
                )

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud(np.zeros((0, 3)))


@dataclass
class Box3D:
    """A 7-DoF oriented box: center, size (w, h, l), yaw about z.

    Width spans the local y axis, height z, length x (the heading axis).
    """

    center: np.ndarray
    size: np.ndarray
    yaw: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not (np.isfinite(self.center).all() and np.isfinite(self.size).all()
                and math.isfinite(self.yaw)):
            raise ValidationError("box has non-finite fields")
        if (self.size <= 0).any():
            raise ValidationError(f"box size must be strictly positive, got {self.size}")
        self.yaw = wrap_angle(float(self.yaw))

    @property
    def width(self) -> float:
        return float(self.size[0])

    @property
    def height(self) -> float:
        return float(self.size[1])

    @property
    def length(self) -> float:
        return float(self.size[2])

    def volume(self) -> float:
        return float(self.size[0] * self.size[1] * self.size[2])

    def footprint(self) -> np.ndarray:
        """(4, 2) xy corners of the box base, counterclockwise."""
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def corners(self) -> np.ndarray:
        """(8, 3) world-frame corners."""
        foot = self.footprint()
        zlo = self.center[2] - 0.5 * self.height
        zhi = self.center[2] + 0.5 * self.height
        bottom = np.column_stack([foot, np.full(4, zlo)])
        top = np.column_stack([foot, np.full(4, zhi)])
        return np.vstack([bottom, top])

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned hull as (mins, maxs)."""
        c = self.corners()
        return c.min(axis=0), c.max(axis=0)


@dataclass
class BoxOffset:
    """Frame-to-frame pose increment in the previous box's local frame."""

    dx: float
    dy: float
    dz: float
    dtheta: float

    def __post_init__(self):
        vals = (self.dx, self.dy, self.dz, self.dtheta)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError("offset has non-finite components")
        self.dtheta = wrap_angle(float(self.dtheta))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.dtheta])

    @staticmethod
    def zero() -> "BoxOffset":
        return BoxOffset(0.0, 0.0, 0.0, 0.0)


@dataclass
class TrackedSequence:
    """A point-cloud sequence with one ground-truth box per frame."""

    frames: list[PointCloud]
    gt_boxes: list[Box3D]
    category: str = "Car"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) != len(self.gt_boxes):
            raise ValidationError(
                f"{len(self.frames)} frames but {len(self.gt_boxes)} boxes"
            )
        if len(self.frames) < 2:
            raise ValidationError("a tracked sequence needs at least 2 frames")

    def __len__(self) -> int:
        return len(self.frames)


def crop_region(cloud: PointCloud, box: Box3D, margin: float) -> PointCloud:
    """Keep the points inside the box's axis-aligned hull grown by ``margin``.

    The region is closed: points exactly on a face are retained. Point order
    is preserved; the result may be empty.
    """
    if margin < 0:
        raise ValidationError(f"margin must be >= 0, got {margin}")
    lo, hi = box.aabb()
    lo = lo - margin
    hi = hi + margin
    mask = np.logical_and(cloud.xyz >= lo, cloud.xyz <= hi).all(axis=1)
    intensity = cloud.intensity[mask] if cloud.intensity is not None else None
    return PointCloud(cloud.xyz[mask], intensity)


def canonicalize(cloud: PointCloud, ref_box: Box3D) -> PointCloud:
    """Express a cloud in ``ref_box``'s local frame (translate, then un-yaw)."""
    rot = rotation_z(-ref_box.yaw)
    xyz = (cloud.xyz - ref_box.center) @ rot.T
    return PointCloud(xyz, cloud.intensity)


def uncanonicalize(cloud: PointCloud, ref_box: Box3D) -> PointCloud:
    """Inverse of :func:`canonicalize`."""
    rot = rotation_z(ref_box.yaw)
    xyz = cloud.xyz @ rot.T + ref_box.center
    return PointCloud(xyz, cloud.intensity)


def offset_label(prev_box: Box3D, cur_box: Box3D) -> BoxOffset:
    """The offset that moves ``prev_box`` onto ``cur_box``.

    Translation is expressed in ``prev_box``'s local frame so that
    ``apply_offset(prev_box, offset_label(prev_box, cur_box))`` reproduces
    ``cur_box``'s pose exactly.
    """
    delta_world = cur_box.center - prev_box.center
    delta_local = rotation_z(-prev_box.yaw) @ delta_world
    dtheta = angle_difference(cur_box.yaw, prev_box.yaw)
    return BoxOffset(delta_local[0], delta_local[1], delta_local[2], dtheta)


def apply_offset(box: Box3D, off: BoxOffset) -> Box3D:
    """Compose a pose increment onto a box; size is carried over unchanged."""
    delta_world = rotation_z(box.yaw) @ np.array([off.dx, off.dy, off.dz])
    return Box3D(box.center + delta_world, box.size.copy(),
                 wrap_angle(box.yaw + off.dtheta))


def points_in_box(cloud: PointCloud, box: Box3D, tolerance: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside the oriented box (closed, +tolerance)."""
    local = (cloud.xyz - box.center) @ rotation_z(-box.yaw).T
    half = np.array([0.5 * box.length, 0.5 * box.width, 0.5 * box.height])
    return (np.abs(local) <= half + tolerance).all(axis=1)


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a polygon given as an (N, 2) vertex array."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by convex CCW polygon ``clip``."""
    output = subject
    n = len(clip)
    for i in range(n):
        if len(output) == 0:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        # signed side of each vertex relative to the directed edge a->b
        side = (output[:, 0] - a[0]) * edge[1] - (output[:, 1] - a[1]) * edge[0]
        inside = side <= 0.0
        new_pts = []
        m = len(output)
        for j in range(m):
            k = (j + 1) % m
            p, q = output[j], output[k]
            if inside[j]:
                new_pts.append(p)
            if inside[j] != inside[k]:
                t = side[j] / (side[j] - side[k])
                new_pts.append(p + t * (q - p))
        output = np.array(new_pts) if new_pts else np.zeros((0, 2))
    return output


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU of two z-axis-oriented boxes.

    Planar overlap of the rotated footprints (convex polygon clipping) times
    the vertical overlap, over the union volume. Symmetric; disjoint boxes
    give 0.
    """
    if np.array_equal(a.center, b.center) and np.array_equal(a.size, b.size):
        dyaw = abs(angle_difference(a.yaw, b.yaw))
        # a rectangle footprint is symmetric under a half turn
        if dyaw < 1e-12 or abs(dyaw - math.pi) < 1e-12:
            return 1.0
    z_lo = max(a.center[2] - 0.5 * a.height, b.center[2] - 0.5 * b.height)
    z_hi = min(a.center[2] + 0.5 * a.height, b.center[2] + 0.5 * b.height)
    dz = max(0.0, z_hi - z_lo)
    if dz == 0.0:
        return 0.0
    inter_poly = _clip_polygon(a.footprint(), b.footprint())
    inter_area = _polygon_area(inter_poly)
    if inter_area == 0.0:
        return 0.0
    inter = inter_area * dz
    union = a.volume() + b.volume() - inter
    return float(inter / union)


def center_distance(a: Box3D, b: Box3D) -> float:
    """Euclidean distance between box centers, in meters."""
    return float(np.linalg.norm(a.center - b.center))
