"""gridtrack: a desk-scale voxel-based LiDAR single-object tracker."""

from .geometry import (Box3D, BoxOffset, GridTrackError, PointCloud,
                       TrackedSequence, apply_offset, canonicalize,
                       center_distance, crop_region, iou3d, offset_label,
                       uncanonicalize)
from .voxelize import VoxelGrid, VoxelizerConfig, dual_voxelize
from .sparse import ConvSpec, SparseTensor3D
from .autodiff import DiffTensor, ParamStore, backward, step_adam
from .backbone import BackboneConfig, backbone_forward
from .head import OffsetPrediction, rle_loss
from .pipeline import (OffsetRegressor, TrackerState, ZeroRegressor,
                       build_regressor, make_train_samples, track_sequence,
                       track_step, train)
from .synthetic import SyntheticSceneConfig, generate_synthetic
from .metrics import OpeResult, evaluate_ope, precision_metric, success_metric
from .config import RunConfig, default_config, load_config

__version__ = "0.1.0"
