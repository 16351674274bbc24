"""tractory: learned streamline tractography on synthetic fiber phantoms.

Pipeline: generate a phantom (``phantom``), build the fixel prior
(``fixel``), encode feature volumes (``encoder``), train the direction
model (``learn``), track (``tracker``) and score (``evalmod``); the
``tractory`` CLI wires the same steps end to end.
"""

from .dwimath import (
    GradientScheme,
    eval_sh,
    fa,
    fit_tensor_lls,
    md,
    principal_dir,
    project_sh,
    sh_basis,
    tensor_to_odf,
)
from .encoder import EncoderWeights, FeatureConfig, FeatureState, encode_subject
from .errors import (
    CheckpointError,
    ConfigError,
    EstimationError,
    FormatError,
    TractoryError,
    UnsupportedDatatypeError,
)
from .fixel import FixelMap, build_fixels, fixels_at
from .learn import (
    Checkpoint,
    DirectionModel,
    TrainBatch,
    build_training_set,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)
from .nifti import read_nifti, write_nifti
from .phantom import BundleDef, PhantomDataset, PhantomSpec, generate, preset
from .tck import read_tck, write_tck
from .tracker import (
    FactPredictor,
    LearnedPredictor,
    Streamline,
    TrackerConfig,
    Tractogram,
    TrackingEnvironment,
    enumerate_seeds,
    jitter_seed,
    propagate,
    track_whole_brain,
)
from .evalmod import EvalReport, density_map, dice, evaluate, mask_from_density
from .vmf import VmfParams, angle_quantile, augment_target, kappa_from_fa, log_c, sample
from .volume import LabelVolume, Volume, interp_trilinear, neighborhood_values

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
