"""voxssl: self-supervised pretraining for 2D/3D volumetric images.

The package covers five proxy tasks (contrastive predictive coding, relative
patch location, jigsaw, rotation prediction, exemplar), the matching losses,
a dimension-generic encoder with checkpoint/inflation utilities, a synthetic
corpus generator, and a small training harness with a CLI front end.
"""

from .errors import VoxsslError
from .grids import GridSpec, extract_grid, extract_lattice
from .losses import TripletConfig, binary_nce, cross_entropy, info_nce, triplet
from .metrics import dice, dice_per_class, quadratic_weighted_kappa
from .models import (
    CheckpointState,
    Encoder,
    EncoderSpec,
    SegmentationModel,
    attach_decoder,
    desk_spec,
    encoder_from_checkpoint,
    inflate_encoder,
    load_checkpoint,
    save_checkpoint,
)
from .permutations import PermutationSet, generate_permutation_set
from .rotations import (
    RotationClass,
    apply_rotation,
    enumerate_rotations,
    enumerate_rotations_2d,
    inverse_rotation,
)
from .synth import SynthSpec, generate
from .tasks import (
    LatticeConfig,
    build_cpc_sample,
    build_exemplar_triplet,
    build_jigsaw_sample,
    build_rotation_sample,
    build_rpl_sample,
    unscramble,
)
from .training import (
    DESK_TASK_PARAMS,
    TASKS,
    RunRecord,
    TrainConfig,
    deterministic_mode,
    epochs_to_threshold,
    finetune,
    pretrain,
    sweep,
)
from .transforms import TransformConfig, random_transform
from .volume import DatasetManifest, Volume, load_volume, preprocess

__version__ = "0.1.0"

__all__ = [
    "CheckpointState",
    "DESK_TASK_PARAMS",
    "DatasetManifest",
    "Encoder",
    "EncoderSpec",
    "GridSpec",
    "LatticeConfig",
    "PermutationSet",
    "RotationClass",
    "RunRecord",
    "SegmentationModel",
    "SynthSpec",
    "TASKS",
    "TrainConfig",
    "TransformConfig",
    "TripletConfig",
    "VoxsslError",
    "Volume",
    "apply_rotation",
    "attach_decoder",
    "binary_nce",
    "build_cpc_sample",
    "build_exemplar_triplet",
    "build_jigsaw_sample",
    "build_rotation_sample",
    "build_rpl_sample",
    "cross_entropy",
    "desk_spec",
    "deterministic_mode",
    "dice",
    "dice_per_class",
    "encoder_from_checkpoint",
    "enumerate_rotations",
    "enumerate_rotations_2d",
    "epochs_to_threshold",
    "extract_grid",
    "extract_lattice",
    "finetune",
    "generate",
    "generate_permutation_set",
    "inflate_encoder",
    "info_nce",
    "inverse_rotation",
    "load_checkpoint",
    "load_volume",
    "pretrain",
    "preprocess",
    "quadratic_weighted_kappa",
    "random_transform",
    "save_checkpoint",
    "sweep",
    "triplet",
    "unscramble",
    "__version__",
]
