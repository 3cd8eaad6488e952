"""BEV conversion, global-max regression head, and the training loss.

The loss treats the per-dimension residual, standardized by a learned scale,
as a Laplace likelihood: ``sum_d |r_d| / sigma_d + log sigma_d + log 2``.
A plain L1 variant (scales frozen at 1) is available behind ``kind="l1"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor, ParamStore
from .geometry import BoxOffset
from .sparse import SparseTensor3D, densify
from .voxelize import ConfigError

TWO_PI = 2.0 * math.pi

# -log density of a unit Laplace at zero residual, per dimension
LAPLACE_LOG_NORMALIZER = math.log(2.0)

LOG_SIGMA_LIMIT = 4.0


@dataclass
class OffsetPrediction:
    """Regressed pose increment with a per-dimension log scale."""

    mu: DiffTensor         # (4,) dx, dy, dz, dtheta
    log_sigma: DiffTensor  # (4,)

    def mu_array(self) -> np.ndarray:
        return self.mu.data.copy()

    def sigma_array(self) -> np.ndarray:
        return np.exp(self.log_sigma.data)

    def as_offset(self) -> BoxOffset:
        m = self.mu.data
        return BoxOffset(float(m[0]), float(m[1]), float(m[2]), float(m[3]))


def bev_width(out_dims, channels: int) -> int:
    """Feature width after folding the height axis into channels."""
    return int(out_dims[2]) * int(channels)


def to_bev(x: SparseTensor3D) -> DiffTensor:
    """Fold the height axis into channels: (W, L, H, C) -> (W, L, H*C).

    Lossless: every stored feature value appears exactly once.
    """
    w, l, h = x.dims
    dense = densify(x)
    return ad.reshape(dense, (w, l, h * x.channels))


def init_head_params(store: ParamStore, in_width: int, hidden: tuple[int, ...],
                     rng: np.random.Generator) -> None:
    sizes = [in_width, *hidden, 8]
    ad.init_mlp(store, "head.mlp", sizes, rng)


def head_num_layers(hidden: tuple[int, ...]) -> int:
    return len(hidden) + 1


def head_forward(bev: DiffTensor, store: ParamStore,
                 hidden: tuple[int, ...]) -> OffsetPrediction:
    """Global max over BEV sites, then an MLP to (mu, log_sigma)."""
    w, l, c = bev.data.shape
    flat = ad.reshape(bev, (w * l, c))
    pooled = ad.segment_max(flat, np.array([0]))
    out = ad.mlp_forward(pooled, store, "head.mlp", head_num_layers(hidden))
    if out.data.shape != (1, 8):
        raise ad.AutodiffError(f"head must emit 8 values, got {out.data.shape}")
    mu = ad.reshape(ad.narrow(out, 0, 4, axis=1), (4,))
    log_sigma = ad.clip(ad.reshape(ad.narrow(out, 4, 8, axis=1), (4,)),
                        -LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT)
    return OffsetPrediction(mu, log_sigma)


def rle_loss(pred: OffsetPrediction, label: BoxOffset,
             kind: str = "rle") -> DiffTensor:
    """Negative log-likelihood of the standardized residual.

    The angular residual is wrapped to (-pi, pi] via a stop-gradient
    correction, so the loss respects yaw periodicity. ``kind="l1"`` drops the
    learned scales.
    """
    if kind not in ("rle", "l1"):
        raise ConfigError(f"unknown loss kind {kind!r}")
    target = label.as_array()
    raw = ad.add(DiffTensor(target), ad.mul(pred.mu, -1.0))
    wrap_shift = -TWO_PI * round(float(raw.data[3]) / TWO_PI)
    resid = ad.add(raw, DiffTensor(np.array([0.0, 0.0, 0.0, wrap_shift])))
    if kind == "l1":
        return ad.tsum(ad.absolute(resid))
    inv_sigma = ad.exp(ad.mul(pred.log_sigma, -1.0))
    standardized = ad.mul(resid, inv_sigma)
    per_dim = ad.add(ad.absolute(standardized), pred.log_sigma)
    return ad.add(ad.tsum(per_dim), 4.0 * LAPLACE_LOG_NORMALIZER)
