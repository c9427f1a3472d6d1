"""Time-contrastive learning for nonlinear ICA.

Generate nonstationary sources mixed through an invertible network, train a
feature extractor by segment discrimination, unmix the learned features
with linear ICA, and score recovery against the ground truth.
"""

from .datagen import (
    FamilySpec,
    GeneratedData,
    MixingNetwork,
    ModulationMatrix,
    ObservationSeries,
    SourceTensor,
    apply_mixing,
    build_mixing,
    invert_mixing,
    load_dataset,
    make_dataset,
    sample_modulations,
    sample_sources,
    save_dataset,
    standardize_sources,
)
from .evaluation import (
    EvalReport,
    affine_identifiability_check,
    match_components,
    mean_abs_corr,
    true_q_values,
)
from .experiment import ExperimentConfig, run_pipeline, run_sweep
from .linear_ica import (
    IcaConfig,
    IcaResult,
    amari_index,
    fastica,
    joint_diagonalize,
    nsvica,
    whiten,
)
from .network import (
    FeatureExtractorParams,
    MlrParams,
    TclModel,
    features_forward,
    init_params,
    load_model,
    mlr_posterior,
    save_model,
    tcl_gradients,
    tcl_loss,
)
from .trainer import (
    TrainConfig,
    TrainHistory,
    chance_level,
    classification_accuracy,
    split_holdout,
    train_tcl,
)

__version__ = "0.1.0"
