"""Time-series change detection: where and when land cover last changed.

The pipeline encodes every image of a co-registered series, differences
adjacent frames, sharpens boundaries with a center-difference depthwise
convolution, correlates the steps per pixel, reads out two coarse
moment-of-change estimates, refines them with multiscale temporal class
activation maps, and infers the binary change area directly from the fused
moment scores so the two outputs can never disagree.

Everything runs on the package's own numpy-backed reverse-mode autodiff
(:mod:`caim.tensor`, :mod:`caim.kernels`).
"""

from .data import (ChangeLabels, SceneConfig, SemanticSeries, TsiCube,
                   derive_change_labels, extract_patches, generate_synthetic_scene,
                   load_cube, save_cube, split_dataset)
from .errors import (CaimError, ConfigError, FormatError, GenerationError,
                     GradCheckError, ShapeError)
from .kernels import (bilinear_upsample, conv2d, depth_to_space, grad_check,
                      group_norm, lstm_seq, mhsa_block, space_to_depth)
from .losses import LossConfig, compute_class_ratios, fwcl, total_loss
from .metrics import MetricsReport, compute_metrics, confusion_matrix
from .refine import (AreaPrediction, ModelConfig, MomentPrediction, argmax_maps,
                     forward, fuse_fine_moment, infer_area, init_model_params,
                     predict, temporal_cam)
from .tensor import ParamStore, Tensor, no_grad, relu, softmax
from .training import Adam, TrainConfig, evaluate, train

__version__ = "0.1.0"
