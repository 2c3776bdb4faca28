"""Few-shot classification with learned class prototypes that do not depend on the training shot."""

from .autodiff import Tape, Tensor, backward, finite_diff_check, no_grad
from .baseline import protonet_baseline_eval, protonet_baseline_train
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    Episode,
    Split,
    SplitDataset,
    gen_heteroscedastic,
    gen_synthetic,
    load_csv,
    sample_episode_support_query,
    sample_episode_unsplit,
    save_csv,
)
from .embedding import EmbeddingParams, EmbedMode, embed, init_embedding
from .errors import (
    ContractError,
    DatasetFormatError,
    DegenerateInputError,
    DimensionError,
    DivergenceError,
    NonFiniteError,
    OracleError,
    ProtocolError,
    ShotFreeError,
)
from .fewshot import (
    EvalReport,
    FewShotTask,
    ImplicitConfig,
    Scenario,
    backfill_metric,
    classify,
    evaluate,
    lifelong_update,
    prototypes_implicit,
    prototypes_mean,
)
from .losses import center_loss, collapse_demo, episode_loss
from .metric import MetricMap, PrototypeTable, chi, init_prototypes, lift_dimension, posterior
from .training import TrainConfig, TrainLog, meta_train

__all__ = [
    "backfill_metric",
    "backward",
    "center_loss",
    "Checkpoint",
    "chi",
    "classify",
    "collapse_demo",
    "ContractError",
    "DatasetFormatError",
    "DegenerateInputError",
    "DimensionError",
    "DivergenceError",
    "embed",
    "EmbeddingParams",
    "EmbedMode",
    "Episode",
    "episode_loss",
    "EvalReport",
    "evaluate",
    "FewShotTask",
    "finite_diff_check",
    "gen_heteroscedastic",
    "gen_synthetic",
    "ImplicitConfig",
    "init_embedding",
    "init_prototypes",
    "lifelong_update",
    "lift_dimension",
    "load_checkpoint",
    "load_csv",
    "meta_train",
    "MetricMap",
    "no_grad",
    "NonFiniteError",
    "OracleError",
    "posterior",
    "ProtocolError",
    "protonet_baseline_eval",
    "protonet_baseline_train",
    "prototypes_implicit",
    "prototypes_mean",
    "PrototypeTable",
    "sample_episode_support_query",
    "sample_episode_unsplit",
    "save_checkpoint",
    "save_csv",
    "Scenario",
    "ShotFreeError",
    "Split",
    "SplitDataset",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainLog",
]

__version__ = "0.1.0"
