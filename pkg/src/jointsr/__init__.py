"""Single-image super-resolution combining external sparse-coding examples
with internal epitomic self-examples, balanced per patch by an adaptive
reconstruction-error-driven weight.
"""

from .imagecore import (
    ColorImage,
    PatchGrid,
    assemble_patches,
    downsample,
    extract_patches,
    load_image,
    make_grid,
    mod_crop,
    rgb_to_ycbcr,
    save_image,
    scale_grid,
    smooth_input,
    upsample,
    ycbcr_to_rgb,
)
from .sparse import (
    ConvergenceError,
    DictionaryPair,
    SparseCode,
    SparseConfig,
    csc_initialize,
    csc_upscale,
    external_noise,
    l1_solve,
    sample_training_pairs,
    train_coupled_dictionary,
)
from .epitome import (
    Epitome,
    EpitomeConfig,
    MatchResult,
    epi_upscale,
    epitomic_match,
    internal_noise,
    nn_lse_upscale,
    nn_match,
    posterior,
    train_epitome,
    transfer_high_frequency,
)
from .joint import (
    JointConfig,
    JointResult,
    WeightMap,
    adaptive_weight,
    fixed_weight_upscale,
    joint_objective,
    joint_upscale,
)
from .metrics import MetricReport, psnr, ssim
from .ranking import (
    ScoreVector,
    UnderDeterminedError,
    WinningMatrix,
    bt_fit,
    bt_predict,
)
from .harness import FIXED_OMEGA_SWEEP, MODES, evaluate, load_manifest, run_pipeline

__version__ = "0.1.0"
