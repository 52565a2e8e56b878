"""
COVID-19 CT Segmentation

Preprocessing, U-Net training and transfer, metrics, annotation QA and 3D
export for lung CT volumes, with a synthetic phantom path for testing.
"""

__version__ = "0.1.0"

from .config import Hyperparams, PhantomSpec, RunConfig, UNetConfig
from .errors import CovidSegError
from .evaluation import MetricsReport, evaluate, qa_annotations
from .phantom import synth_volume
from .preprocess import DatasetSplit, SlideSample, make_split
from .reconstruct3d import PointCloud, volume_to_points
from .training import TrainHistory, retrain, train
from .unet import ModelState, build_unet, load_weights, save_weights
from .volume_io import CtVolume, load_bundle, write_bundle

__all__ = [
    "CovidSegError",
    "CtVolume",
    "DatasetSplit",
    "Hyperparams",
    "MetricsReport",
    "ModelState",
    "PhantomSpec",
    "PointCloud",
    "RunConfig",
    "SlideSample",
    "TrainHistory",
    "UNetConfig",
    "build_unet",
    "evaluate",
    "load_bundle",
    "load_weights",
    "make_split",
    "qa_annotations",
    "retrain",
    "save_weights",
    "synth_volume",
    "train",
    "volume_to_points",
    "write_bundle",
]
