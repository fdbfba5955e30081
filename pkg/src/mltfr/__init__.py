"""Sequential recommendation with filtered LLM-vocabulary experts.

The package augments an ID-based transformer recommender with additive
semantic offsets: frozen LLM vocabulary matrices are filtered per user
through a Gumbel straight-through top-K, cross-attended into the embedding
space, routed by a per-position gate, and optionally combined with a frozen
Fisher-merged consensus expert trained in a second round.
"""

from .backbone import BackboneConfig, SequenceEncoder, predict_scores
from .consensus import (
    ConsensusExpert,
    FisherScore,
    estimate_fisher,
    load_consensus,
    merge_consensus,
    save_consensus,
)
from .data import (
    EvalInstance,
    InteractionData,
    InteractionSequence,
    SequenceBatch,
    batch_and_negatives,
    core_filter,
    load_interactions,
    read_id_map,
    split_leave_one_out,
    write_id_map,
)
from .errors import (
    ConfigurationError,
    DataFormatError,
    DegenerateInterestError,
    EmptyDatasetError,
    EmptySequenceError,
    MltfrError,
    VemFormatError,
    VemLengthError,
    VemValidationError,
)
from .evaluation import (
    MetricsReport,
    compute_improvement,
    evaluate_model,
    popularity_ranks,
    rank_metrics,
    rank_of_target,
)
from .experiment import (
    DatasetSpec,
    ExperimentConfig,
    ExperimentResult,
    ModelSpec,
    SyntheticSpec,
    VocabSpec,
    benchmark_moe_scaling,
    generate_planted_sequences,
    load_experiment_config,
    popularity_report,
    run_experiment,
    sweep_experts,
)
from .filtering import (
    FilterConfig,
    SelectionResult,
    filter_tokens,
    pool_user_interest,
    score_tokens,
)
from .integration import CrossAttention
from .model import Recommender, TokenExpert, VARIANTS
from .moe import GateNetwork, aggregate_experts, combine_with_consensus
from .training import (
    GradCheckReport,
    TrainConfig,
    TrainResult,
    bce_loss,
    check_gradients,
    load_checkpoint,
    save_checkpoint,
    train_two_rounds,
)
from .vocab import ItemTable, VocabEmbedding, load_vocab, random_vocab, save_vocab, synth_vocab

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "ConfigurationError",
    "ConsensusExpert",
    "CrossAttention",
    "DataFormatError",
    "DegenerateInterestError",
    "EmptyDatasetError",
    "EmptySequenceError",
    "DatasetSpec",
    "EvalInstance",
    "ExperimentConfig",
    "ExperimentResult",
    "FilterConfig",
    "FisherScore",
    "GateNetwork",
    "GradCheckReport",
    "InteractionData",
    "InteractionSequence",
    "ItemTable",
    "MetricsReport",
    "ModelSpec",
    "MltfrError",
    "Recommender",
    "SelectionResult",
    "SequenceBatch",
    "SyntheticSpec",
    "SequenceEncoder",
    "TokenExpert",
    "TrainConfig",
    "TrainResult",
    "VARIANTS",
    "VemFormatError",
    "VemLengthError",
    "VemValidationError",
    "VocabEmbedding",
    "VocabSpec",
    "aggregate_experts",
    "batch_and_negatives",
    "bce_loss",
    "benchmark_moe_scaling",
    "check_gradients",
    "combine_with_consensus",
    "compute_improvement",
    "core_filter",
    "estimate_fisher",
    "evaluate_model",
    "filter_tokens",
    "generate_planted_sequences",
    "load_checkpoint",
    "load_consensus",
    "load_experiment_config",
    "load_interactions",
    "load_vocab",
    "merge_consensus",
    "pool_user_interest",
    "popularity_ranks",
    "popularity_report",
    "predict_scores",
    "random_vocab",
    "rank_metrics",
    "rank_of_target",
    "read_id_map",
    "run_experiment",
    "save_checkpoint",
    "save_consensus",
    "save_vocab",
    "score_tokens",
    "split_leave_one_out",
    "sweep_experts",
    "synth_vocab",
    "train_two_rounds",
    "write_id_map",
]
