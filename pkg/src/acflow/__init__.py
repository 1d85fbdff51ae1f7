"""Arbitrary-conditioning normalizing flows on numpy.

One model evaluates and samples ``p(x_u | x_o)`` for any split of the features
into observed, target and missing parts.
"""

__version__ = "0.1.0"

from .context import Batch, ConditioningContext
from .data import (
    CsvSchema,
    Dataset,
    GaussianMixture,
    SyntheticSpec,
    eval_marginal_nll,
    eval_nll,
    eval_nrmse,
    from_array,
    gen_synthetic,
    inject_mcar,
    load_csv,
    mean_impute,
)
from .errors import (
    ACFlowError,
    CheckpointError,
    DataError,
    DomainError,
    MaskError,
    NumericalError,
    ShapeError,
    TrainingError,
)
from .masking import MaskDistribution, make_rng, sample_mask
from .model import ACFlow, LossConfig, gibbs_chain, synthetic_architecture, tabular_architecture
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "ACFlow",
    "ACFlowError",
    "Batch",
    "CheckpointError",
    "ConditioningContext",
    "CsvSchema",
    "DataError",
    "Dataset",
    "DomainError",
    "GaussianMixture",
    "LossConfig",
    "MaskDistribution",
    "MaskError",
    "NumericalError",
    "ShapeError",
    "SyntheticSpec",
    "TrainConfig",
    "TrainingError",
    "eval_marginal_nll",
    "eval_nll",
    "eval_nrmse",
    "from_array",
    "gen_synthetic",
    "gibbs_chain",
    "inject_mcar",
    "load_checkpoint",
    "load_csv",
    "make_rng",
    "mean_impute",
    "sample_mask",
    "save_checkpoint",
    "synthetic_architecture",
    "tabular_architecture",
    "train",
]
