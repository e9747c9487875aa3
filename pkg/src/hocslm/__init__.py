"""Skeleton action recognition with composite spatial topologies, dual-path
temporal modelling and a frozen-decoder caption objective."""
from .backbone import AblationConfig, BackboneConfig, HGLNet, default_preset, desk_preset
from .cts import CompositeTopologySpatial
from .dht import DualPathTemporal, GlobalTemporalAttention, LocalTemporalConv
from .model import HocSLM, load_checkpoint, save_checkpoint
from .skeleton_io import SkeletonSequence, derive_streams, make_synthetic_dataset, parse_skeleton_file, resample
from .ssf import TinyDecoderLM, apply_ssf_strategy, assemble_multimodal_sequence, generation_loss
from .trainer import TrainConfig, desk_train_config, ensemble_scores, evaluate, run_ablation_suite, train

__version__ = "0.1.0"
