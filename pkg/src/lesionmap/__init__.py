"""Retinopathy classification with class-activation lesion localisation.

The pieces: `autodiff` (tensors, layers, reverse-mode gradients), `imaging`
(CLAHE, resizing, flips, histograms) with `image_io` (PNG/PPM/PGM), `model`
(the DeskNet CNN and weight files), `gradcam` (localisation heatmaps and
overlays), `training`, `evaluation`, `dataset`, and the `cli` entry point.
"""

from .autodiff import Tape, Tensor, backward, finite_difference_gradient
from .dataset import DatasetRecord, load_labeled_dataset, stratified_split, synth_generate
from .errors import LesionmapError
from .evaluation import EvalReport, accuracy, auc_one_vs_rest, confusion_matrix, evaluate
from .gradcam import Heatmap, compute_heatmap, overlay
from .image_io import read_image, write_image
from .imaging import Histogram, Image, clahe, flip, intensity_histogram, normalize, resize_bilinear
from .model import ModelConfig, ModelGraph, build_model, forward_with_features, load_weights, save_weights
from .training import ClassWeights, TrainConfig, class_weights, train, weighted_loss

__version__ = "0.1.0"

__all__ = [
    "ClassWeights",
    "DatasetRecord",
    "EvalReport",
    "Heatmap",
    "Histogram",
    "Image",
    "LesionmapError",
    "ModelConfig",
    "ModelGraph",
    "Tape",
    "Tensor",
    "TrainConfig",
    "accuracy",
    "auc_one_vs_rest",
    "backward",
    "build_model",
    "clahe",
    "class_weights",
    "compute_heatmap",
    "confusion_matrix",
    "evaluate",
    "finite_difference_gradient",
    "flip",
    "forward_with_features",
    "intensity_histogram",
    "load_labeled_dataset",
    "load_weights",
    "normalize",
    "overlay",
    "read_image",
    "resize_bilinear",
    "save_weights",
    "stratified_split",
    "synth_generate",
    "train",
    "weighted_loss",
    "write_image",
]
