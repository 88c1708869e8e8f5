"""Topology-ranking adversarial training for retinal artery/vein segmentation."""

from .dataset import AVMask, FundusSample, SamplePatch, load_avdrive, synth_dataset, synth_sample
from .discriminator import DiscriminatorConfig, init_discriminator, ordinal_target
from .evaluate import av_metrics, connectivity_report, emit_tables, pool_metrics
from .generator import GeneratorConfig, init_generator
from .infer import binarize, make_grid, predict_image, stitch
from .shuffle import ShuffleConfig, shuffle_fraction, shuffle_mask
from .topofeat import TripletConfig, init_extractor, triplet_loss
from .train import TrainConfig, fit, init_state, load_generator, lr_at, train_step

__version__ = "0.1.0"

__all__ = [
    "AVMask", "FundusSample", "SamplePatch", "load_avdrive", "synth_dataset", "synth_sample",
    "DiscriminatorConfig", "init_discriminator", "ordinal_target",
    "av_metrics", "connectivity_report", "emit_tables", "pool_metrics",
    "GeneratorConfig", "init_generator",
    "binarize", "make_grid", "predict_image", "stitch",
    "ShuffleConfig", "shuffle_fraction", "shuffle_mask",
    "TripletConfig", "init_extractor", "triplet_loss",
    "TrainConfig", "fit", "init_state", "load_generator", "lr_at", "train_step",
]
