"""Self-supervised atlas-based segmentation via learned deformation fields.

A single atlas with a known segmentation is registered onto target volumes
by a network (or a direct per-voxel optimizer) that predicts a dense
displacement field, trained only from image similarity, distance-weighted
field smoothness, and a regional intensity-variance term.
"""

from .data import (AtlasBundle, Case, CropConfig, LoadedDataset, Manifest,
                   SynthConfig, augment_dataset, build_atlas_bundle,
                   generate_synthetic, load_dataset, load_manifest,
                   preprocess_dataset, save_manifest)
from .distance import DistanceMap, WeightMap, fast_marching_signed_distance, weight_map
from .errors import AtlasSegError, DataError, NumericalError, UsageError
from .graph import Graph, Node, ParamStore
from .losses import LossBreakdown, LossWeights, combined_loss, loss_cc, loss_grad, loss_ls, loss_wgrad
from .metrics import MetricsRecord, SignificanceResult, dice, hd95, paired_t_test, report
from .training import (Adam, TrainConfig, TrialResult, optimize_field_direct,
                       predict_field, run_trials, select_model, train)
from .unet import (Checkpoint, UNetConfig, build_unet, init_params,
                   load_checkpoint, save_checkpoint)
from .volume import (AffineTransform, BinaryMask, NormalizationConstants, Volume,
                     compute_normalization, crop_to_atlas_box, mask_centroid,
                     normalize_volume)
from .warp import (DeformationField, SurfaceMesh, field_gradient,
                   marching_cubes_surface, project_surface,
                   rasterize_projected_mask, random_smooth_field,
                   sample_trilinear, warp_volume)

__version__ = "0.1.0"
