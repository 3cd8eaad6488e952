"""Coordinate-indexed sparse 3D feature volumes and their kernels.

Tensors store sorted unique integer coordinates plus a (rows, channels)
differentiable feature matrix. Every kernel is written as a composition of
gather / matmul / scatter primitives, so it is extensionally equal to the
corresponding dense operation on the zero-filled volume and differentiable
end to end.

Convolution convention: odd cubic kernels with implicit zero padding of
``kernel // 2`` on every side. Output site ``o`` at stride ``s`` gathers
input sites ``o*s + d - kernel//2`` for each kernel offset ``d``; output
dims are ``ceil(dims / s)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .geometry import GridTrackError
from .voxelize import VoxelGrid


class ShapeError(GridTrackError):
    pass


def _flatten(coords: np.ndarray, dims) -> np.ndarray:
    w, l, h = dims
    return (coords[:, 0] * l + coords[:, 1]) * h + coords[:, 2]


def _unflatten(flat: np.ndarray, dims) -> np.ndarray:
    w, l, h = dims
    return np.column_stack([flat // (l * h), (flat // h) % l, flat % h])


def _lookup(sorted_flat: np.ndarray, queries: np.ndarray,
            missing: int) -> np.ndarray:
    """Row indices of ``queries`` in ``sorted_flat``; ``missing`` if absent."""
    pos = np.searchsorted(sorted_flat, queries)
    pos_clipped = np.minimum(pos, max(len(sorted_flat) - 1, 0))
    if len(sorted_flat) == 0:
        return np.full(queries.shape, missing, dtype=np.int64)
    found = sorted_flat[pos_clipped] == queries
    return np.where(found, pos_clipped, missing)


@dataclass
class SparseTensor3D:
    """Sparse feature volume over a (W, L, H) grid.

    ``coords`` is (N, 3) int64, unique, sorted by flat index; ``feats`` is the
    (N, C) differentiable feature matrix aligned with it.
    """

    dims: tuple[int, int, int]
    coords: np.ndarray
    feats: DiffTensor

    @staticmethod
    def build(dims, coords, feats) -> "SparseTensor3D":
        """Validating constructor; sorts rows into canonical order."""
        dims = tuple(int(d) for d in dims)
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        feats = feats if isinstance(feats, DiffTensor) else DiffTensor(feats)
        if feats.data.ndim != 2 or feats.data.shape[0] != coords.shape[0]:
            raise ShapeError(
                f"feature rows {feats.data.shape} do not match {coords.shape[0]} coords"
            )
        if coords.shape[0]:
            if coords.min() < 0 or (coords >= np.array(dims)).any():
                raise ShapeError("coordinates outside grid dims")
            flat = _flatten(coords, dims)
            if np.unique(flat).shape[0] != flat.shape[0]:
                raise ShapeError("duplicate coordinates")
            if not _is_sorted(flat):
                order = np.argsort(flat, kind="stable")
                coords = coords[order]
                feats = ad.gather_rows(feats, order)
        if not np.isfinite(feats.data).all():
            raise ShapeError("non-finite features")
        return SparseTensor3D(dims, coords, feats)

    @staticmethod
    def from_grid(grid: VoxelGrid) -> "SparseTensor3D":
        return SparseTensor3D(tuple(grid.dims), grid.coords,
                              DiffTensor(grid.features))

    @staticmethod
    def empty(dims, channels: int) -> "SparseTensor3D":
        return SparseTensor3D(tuple(dims), np.zeros((0, 3), dtype=np.int64),
                              DiffTensor(np.zeros((0, channels))))

    @property
    def num_sites(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.feats.data.shape[1]

    def flat(self) -> np.ndarray:
        return _flatten(self.coords, self.dims)

    def occupancy(self) -> set[tuple[int, int, int]]:
        return {tuple(c) for c in self.coords}


def _is_sorted(flat: np.ndarray) -> bool:
    return bool(np.all(flat[1:] > flat[:-1])) if flat.shape[0] > 1 else True


@dataclass
class ConvSpec:
    """Shape contract of one sparse convolution."""

    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    mode: str = "submanifold"

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeError(f"kernel must be odd and positive, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.mode not in ("submanifold", "strided"):
            raise ShapeError(f"unknown conv mode {self.mode!r}")
        if self.mode == "submanifold" and self.stride != 1:
            raise ShapeError("submanifold convolution requires stride 1")

    @property
    def kernel_volume(self) -> int:
        return self.kernel ** 3

    def out_dims(self, dims) -> tuple[int, int, int]:
        s = self.stride
        return tuple(-(-d // s) for d in dims)


_OFFSET_CACHE: dict[int, np.ndarray] = {}


def _kernel_offsets(kernel: int) -> np.ndarray:
    """(k^3, 3) offsets in fixed row-major order."""
    if kernel not in _OFFSET_CACHE:
        r = np.arange(kernel)
        grid = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1)
        _OFFSET_CACHE[kernel] = grid.reshape(-1, 3)
    return _OFFSET_CACHE[kernel]


def _strided_out_coords(coords: np.ndarray, dims, spec: ConvSpec) -> np.ndarray:
    """All output sites receiving at least one contribution."""
    out_dims = np.array(spec.out_dims(dims))
    half = spec.kernel // 2
    offsets = _kernel_offsets(spec.kernel)
    s = spec.stride
    # (k^3, N, 3) candidate origins, filtered down to valid strided sites
    q = coords[None, :, :] + (half - offsets)[:, None, :]
    q = q.reshape(-1, 3)
    ok = (q % s == 0).all(axis=1)
    o = q[ok] // s
    o = o[np.logical_and(o >= 0, o < out_dims).all(axis=1)]
    if o.shape[0] == 0:
        return np.zeros((0, 3), dtype=np.int64)
    flat = np.unique(_flatten(o, tuple(out_dims)))
    return _unflatten(flat, tuple(out_dims))


def sparse_conv(x: SparseTensor3D, spec: ConvSpec, weights: DiffTensor,
                bias: DiffTensor) -> SparseTensor3D:
    """Sparse 3D convolution, submanifold or strided.

    ``weights`` is (kernel^3, in_channels, out_channels); ``bias`` is
    (out_channels,), applied at every active output site.
    """
    if x.channels != spec.in_channels:
        raise ShapeError(f"input has {x.channels} channels, spec wants {spec.in_channels}")
    kv = spec.kernel_volume
    if tuple(weights.data.shape) != (kv, spec.in_channels, spec.out_channels):
        raise ShapeError(
            f"weights shape {weights.data.shape} != "
            f"{(kv, spec.in_channels, spec.out_channels)}"
        )
    out_dims = spec.out_dims(x.dims)

    if spec.mode == "submanifold":
        out_coords = x.coords
    else:
        out_coords = _strided_out_coords(x.coords, x.dims, spec)
    n_out = out_coords.shape[0]
    if n_out == 0:
        return SparseTensor3D(out_dims, out_coords,
                              DiffTensor(np.zeros((0, spec.out_channels))))

    if spec.kernel == 1 and spec.stride == 1:
        w2 = ad.reshape(weights, (spec.in_channels, spec.out_channels))
        out = ad.add(ad.matmul(x.feats, w2), bias)
        return SparseTensor3D(out_dims, out_coords, out)

    half = spec.kernel // 2
    offsets = _kernel_offsets(spec.kernel)
    in_flat = x.flat()
    n_in = x.num_sites
    # im2col row indices: (n_out, k^3), missing neighbors -> zero sentinel row
    base = out_coords * spec.stride - half
    p = base[:, None, :] + offsets[None, :, :]          # (n_out, k^3, 3)
    p = p.reshape(-1, 3)
    inside = np.logical_and(p >= 0, p < np.array(x.dims)).all(axis=1)
    q = np.where(inside[:, None], p, 0)
    rows = _lookup(in_flat, _flatten(q, x.dims), n_in)
    idx = np.where(inside, rows, n_in).reshape(n_out, kv)

    out = ad.im2col_affine(x.feats, idx, weights, bias)
    return SparseTensor3D(out_dims, out_coords, out)


def _pool_prepare(x: SparseTensor3D, factor: int):
    """Sort rows by coarse block; returns (out_coords, gather order, starts, counts)."""
    if factor < 1:
        raise ShapeError(f"pool factor must be >= 1, got {factor}")
    out_dims = tuple(-(-d // factor) for d in x.dims)
    coarse = x.coords // factor
    coarse_flat = _flatten(coarse, out_dims)
    order = np.lexsort((x.flat(), coarse_flat))
    sorted_flat = coarse_flat[order]
    starts = np.flatnonzero(np.r_[True, sorted_flat[1:] != sorted_flat[:-1]])
    counts = np.diff(np.r_[starts, sorted_flat.shape[0]])
    out_coords = _unflatten(sorted_flat[starts], out_dims)
    return out_dims, out_coords, order, starts, counts


def avg_pool(x: SparseTensor3D, factor: int) -> SparseTensor3D:
    """Blockwise mean over occupied entries (divides by occupied count)."""
    if x.num_sites == 0:
        return SparseTensor3D.empty(tuple(-(-d // factor) for d in x.dims), x.channels)
    out_dims, out_coords, order, starts, counts = _pool_prepare(x, factor)
    seg_ids = np.repeat(np.arange(starts.shape[0]), counts)
    gathered = ad.gather_rows(x.feats, order)
    sums = ad.scatter_add_rows(gathered, seg_ids, starts.shape[0])
    means = ad.mul(sums, 1.0 / counts[:, None])
    return SparseTensor3D(out_dims, out_coords, means)


def max_pool(x: SparseTensor3D, factor: int) -> SparseTensor3D:
    """Blockwise channelwise max over occupied entries."""
    if x.num_sites == 0:
        return SparseTensor3D.empty(tuple(-(-d // factor) for d in x.dims), x.channels)
    out_dims, out_coords, order, starts, _ = _pool_prepare(x, factor)
    gathered = ad.gather_rows(x.feats, order)
    maxima = ad.segment_max(gathered, starts)
    return SparseTensor3D(out_dims, out_coords, maxima)


def upsample_lerp(x: SparseTensor3D, factor: int,
                  target_occupancy: np.ndarray,
                  target_dims: tuple[int, int, int] | None = None) -> SparseTensor3D:
    """Trilinear upsampling evaluated at the requested fine sites.

    The coarse tensor is treated as a zero-filled dense volume with
    voxel-center alignment: fine site ``i`` samples coarse position
    ``(i + 0.5) / factor - 0.5``. ``target_dims`` defaults to
    ``dims * factor`` but may be overridden (e.g. ceil-derived stage dims).
    """
    if target_dims is None:
        target_dims = tuple(d * factor for d in x.dims)
    target = np.asarray(target_occupancy, dtype=np.int64).reshape(-1, 3)
    if target.shape[0]:
        if target.min() < 0 or (target >= np.array(target_dims)).any():
            raise ShapeError("target occupancy outside target dims")
        tflat = _flatten(target, target_dims)
        order = np.argsort(tflat, kind="stable")
        target = target[order]
    n_t = target.shape[0]
    if n_t == 0:
        return SparseTensor3D.empty(target_dims, x.channels)
    if x.num_sites == 0:
        return SparseTensor3D(target_dims, target,
                              DiffTensor(np.zeros((n_t, x.channels))))

    u = (target + 0.5) / float(factor) - 0.5
    base = np.floor(u).astype(np.int64)
    frac = u - base
    in_flat = x.flat()
    n_in = x.num_sites
    corner_rows = np.empty((n_t, 8), dtype=np.int64)
    corner_w = np.empty((n_t, 8))
    for c in range(8):
        bits = np.array([(c >> 2) & 1, (c >> 1) & 1, c & 1])
        corner = base + bits
        weight = np.prod(np.where(bits == 1, frac, 1.0 - frac), axis=1)
        inside = np.logical_and(corner >= 0, corner < np.array(x.dims)).all(axis=1)
        q = np.where(inside[:, None], corner, 0)
        rows = _lookup(in_flat, _flatten(q, x.dims), n_in)
        corner_rows[:, c] = np.where(inside, rows, n_in)
        corner_w[:, c] = weight

    padded = ad.pad_rows(x.feats, 1)
    gathered = ad.gather_rows(padded, corner_rows.reshape(-1))
    gathered = ad.reshape(gathered, (n_t, 8, x.channels))
    weighted = ad.mul(gathered, corner_w[:, :, None])
    out = ad.tsum(weighted, axis=1)
    return SparseTensor3D(target_dims, target, out)


def concat_channels(a: SparseTensor3D, b: SparseTensor3D) -> SparseTensor3D:
    """Channel concatenation over the occupancy union, zero-filling gaps."""
    if tuple(a.dims) != tuple(b.dims):
        raise ShapeError(f"dims differ: {a.dims} vs {b.dims}")
    union = np.union1d(a.flat(), b.flat())
    n = union.shape[0]
    coords = _unflatten(union, a.dims)
    if n == 0:
        return SparseTensor3D.empty(a.dims, a.channels + b.channels)
    pos_a = np.searchsorted(union, a.flat())
    pos_b = np.searchsorted(union, b.flat())
    left = ad.scatter_add_rows(a.feats, pos_a, n) if a.num_sites else \
        DiffTensor(np.zeros((n, a.channels)))
    right = ad.scatter_add_rows(b.feats, pos_b, n) if b.num_sites else \
        DiffTensor(np.zeros((n, b.channels)))
    return SparseTensor3D(a.dims, coords, ad.concat([left, right], axis=1))


def densify(x: SparseTensor3D) -> DiffTensor:
    """Dense (W, L, H, C) array with zeros at unoccupied sites."""
    w, l, h = x.dims
    total = w * l * h
    if x.num_sites == 0:
        return DiffTensor(np.zeros((w, l, h, x.channels)))
    flat = ad.scatter_add_rows(x.feats, x.flat(), total)
    return ad.reshape(flat, (w, l, h, x.channels))


def from_dense(dense: np.ndarray) -> SparseTensor3D:
    """Sparsify the rows of a dense (W, L, H, C) volume that are not all-zero."""
    dense = np.asarray(dense, dtype=np.float64)
    w, l, h, c = dense.shape
    flat = dense.reshape(-1, c)
    nz = np.flatnonzero(np.any(flat != 0.0, axis=1))
    return SparseTensor3D((w, l, h), _unflatten(nz, (w, l, h)),
                          DiffTensor(flat[nz]))
