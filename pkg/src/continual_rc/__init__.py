"""Penalised fine-tuning and continual learning for a small extractive span reader."""

__version__ = "0.1.0"

from .continual import (
    FinetuneSpec,
    RunLog,
    StepRecord,
    continual_run,
    finetune,
    grad_cosine,
    pretrain,
    smooth_series,
)
from .gem import EpisodicMemory, build_memory, gem_project, reference_gradient
from .metrics import evaluate_dataset, token_f1
from .params import GradientSet, ModelSnapshot, NamedParams
from .penalties import (
    FisherDiag,
    LambdaSchedule,
    PenaltyKind,
    PenaltyWeights,
    combined_penalty,
    cosine_penalty,
    estimate_fisher,
    ewc_penalty,
    l2_penalty,
    lambda_at,
    mean_fisher_per_variable,
    normalize_fisher,
)
from .reader import Example, ReaderConfig, encode_batch, forward_backward, forward_loss, init_reader, predict_span
from .tasks import Dataset, SynthDomainSpec, generate_domain
