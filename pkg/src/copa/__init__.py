"""Site-robust classification via conditional prevalence adjustment.

A trainable network models the site-invariant ratio between the label
posterior and the conditional label prevalence; predictions adapt to a new
site by multiplying with that site's prevalence estimate and renormalizing.
"""

from .baselines import ErmVariant, predict_erm, train_erm
from .config import ExperimentConfig, SiteSpec, SyntheticDataConfig, config_hash, load_config
from .errors import (
    ConfigurationError,
    CopaError,
    EstimationError,
    MissingArtifactError,
    NumericalError,
)
from .evaluation import f1_score, run_ablation, run_experiment
from .model import (
    AdjustedPrediction,
    ModelSpec,
    RatioModel,
    SiteBatches,
    build_ratio_model,
    copa_forward,
    predict_marginalized,
    predict_site,
    train_copa,
)
from .prevalence import (
    SmoothingConfig,
    count_prevalence,
    fit_aux_model,
    half_split_assign,
    marginal_prevalence,
    subsample_prevalence,
    uniform_prevalence,
)
from .scm import (
    CausalRelation,
    MixingMatrix,
    ScmParams,
    SiteConfig,
    SiteDataset,
    bayes_posterior,
    gen_features_2dim,
    gen_labels,
    label_conditionals,
    label_marginal,
    make_mixing_matrix,
    make_site,
)
from .training import TrainConfig, select_checkpoint

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
