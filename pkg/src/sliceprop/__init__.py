"""sliceprop: segment a 3D volume from one annotated slice.

Self-supervised correspondence learning over adjacent slices (with optional
pseudo-label guidance) plus chained local-attention mask propagation.
"""

from .correspondence import (
    AffinityMatrix,
    WindowSpec,
    apply_affinity,
    compute_affinity,
    fuse_keys_queries,
    oeg_affinity,
)
from .encoder import (
    EncoderConfig,
    EncoderParams,
    FeatureMap,
    encode,
    encode_backward,
    init_encoder,
    load_checkpoint,
    save_checkpoint,
)
from .geig import (
    FeatureSpec,
    GeigConfig,
    GradientEnhancedSlice,
    edge_profile,
    geig_transform,
    second_derivative,
)
from .metrics import RunResult, dice, dice_decay_curve, summarize_runs
from .propagate import PropagationConfig, propagate_volume, propagation_trace
from .pseudolabel import (
    IdentityRefiner,
    LearnedRefiner,
    MorphologicalRefiner,
    Refiner,
    generate_pls,
    pl_quality_report,
    refine_pls,
)
from .training import (
    TrainConfig,
    TrainState,
    gradient_check,
    reconstruction_loss,
    sample_pairs,
    train,
)
from .volume_io import (
    MaskVolume,
    PhantomObject,
    PhantomSpec,
    Volume,
    largest_gt_slice_index,
    load_mask,
    load_volume,
    pick_annotated_slice,
    save_mask,
    save_volume,
    synth_volume,
)

__version__ = "0.1.0"
