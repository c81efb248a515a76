"""Desk-scale benchmarks: forgetting, per-method λ sweeps, multi-domain runs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .continual import FISHER_METHODS, FinetuneSpec, RunLog, continual_run, finetune, pretrain
from .metrics import evaluate_dataset
from .params import ModelSnapshot
from .penalties import PenaltyWeights, estimate_fisher
from .reader import ReaderConfig
from .tasks import Dataset, default_domains, generate_domain

# Embeddings stay at their random initialisation, as word vectors are kept
# fixed in the original setup; 64 dimensions keep token classes separable.
DEFAULT_READER = ReaderConfig(vocab_size=240, embed_dim=64, hidden_dim=16, max_context_len=40, freeze_embeddings=True)

# Total sizes whose 70/15/15 cut leaves exactly 3000 / 1000 training examples.
SOURCE_EXAMPLES = 4284
TARGET_EXAMPLES = 1428

# Documented 4-point λ grids: top * 10**{-1.5, -1, -0.5, 0}. Each top value is
# the largest half-decade λ whose target-dev F1 on a pilot seed (seed 0) stays
# within 2 points of vanilla fine-tuning; source F1 plays no part. The combined
# grid scales the single-method tops by 10**-0.5, anchored the same way.
_STEPS = (10 ** -1.5, 0.1, 10 ** -0.5, 1.0)
_TOPS = {"l2": 0.01, "cd": 10 ** 0.5, "ewc": 10 ** -1.5, "ewcn": 0.1}
_ALL_SCALE = 10 ** -0.5
LAMBDA_GRIDS: dict[str, list[PenaltyWeights]] = {
    m: [PenaltyWeights(**{f"lambda_{m}": top * s}) for s in _STEPS] for m, top in _TOPS.items()
}
LAMBDA_GRIDS["all"] = [
    PenaltyWeights(
        lambda_l2=_TOPS["l2"] * _ALL_SCALE * s,
        lambda_cd=_TOPS["cd"] * _ALL_SCALE * s,
        lambda_ewcn=_TOPS["ewcn"] * _ALL_SCALE * s,
    )
    for s in _STEPS
]
# Grid selection keeps the largest λ whose mean target-dev F1 is within this
# margin of vanilla fine-tuning.
TARGET_TOLERANCE = 0.01


def benchmark_datasets(
    n_domains: int = 2,
    seed: int = 0,
    n_examples: Sequence[int] | None = None,
    vocab_size: int = 240,
    distractor_rate: float = 0.1,
) -> list[Dataset]:
    """Synthetic domains on equal disjoint blocks; the first one is the pre-training source."""
    block = 80 if n_domains <= 3 else vocab_size // n_domains
    if n_examples is None:
        n_examples = [SOURCE_EXAMPLES] + [TARGET_EXAMPLES] * (n_domains - 1)
    specs = default_domains(
        n_domains, vocab_size=vocab_size, block_size=block, n_examples=list(n_examples),
        distractor_rate=distractor_rate, seed=seed,
    )
    return [generate_domain(s) for s in specs]


@dataclass
class FinetuneResult:
    method: str
    weights: PenaltyWeights
    seed: int
    source_before: float
    source_after: float
    target_dev: float
    target_test: float
    log: RunLog = field(repr=False)

    @property
    def source_drop(self) -> float:
        return self.source_before - self.source_after


@dataclass
class SeedSetup:
    """Pre-trained snapshot and Fisher diagonal for one seed, reused across methods."""

    seed: int
    source: Dataset
    target: Dataset
    snapshot: ModelSnapshot
    fisher: object | None = None


def prepare_seed(
    seed: int,
    config: ReaderConfig = DEFAULT_READER,
    pretrain_steps: int = 2000,
    base_spec: FinetuneSpec | None = None,
    with_fisher: bool = True,
) -> SeedSetup:
    source, target = benchmark_datasets(2, seed)
    spec = (base_spec or FinetuneSpec()).replace(seed=seed, diagnostics_memory_size=0)
    snapshot = pretrain(config, source, spec, steps=pretrain_steps)
    fisher = None
    if with_fisher:
        fisher = estimate_fisher(snapshot.params, source.train, min(spec.fisher_samples, len(source.train)), config)
    return SeedSetup(seed, source, target, snapshot, fisher)


def run_method(
    setup: SeedSetup,
    method: str,
    weights: PenaltyWeights = PenaltyWeights(),
    config: ReaderConfig = DEFAULT_READER,
    base_spec: FinetuneSpec | None = None,
) -> FinetuneResult:
    spec = (base_spec or FinetuneSpec(diagnostics_memory_size=0)).replace(
        method=method, weights=weights, seed=setup.seed
    )
    fisher = setup.fisher if method in FISHER_METHODS else None
    params, log = finetune(setup.snapshot, fisher, setup.target, setup.source, spec, config)
    return FinetuneResult(
        method=method,
        weights=weights,
        seed=setup.seed,
        source_before=log.initial_source_f1,
        source_after=log.final_source_f1,
        target_dev=log.final_target_f1,
        target_test=evaluate_dataset(params, setup.target.test, spec.max_span_len)[0],
        log=log,
    )


def select_weights(
    candidates: Sequence[Sequence[FinetuneResult]],
    baseline_target_dev: float,
    tolerance: float = TARGET_TOLERANCE,
) -> int:
    """Index of the grid point to keep, judged on target-dev F1 only.

    ``candidates[k]`` holds the per-seed results of grid point k. The largest
    grid index whose mean target-dev F1 is within ``tolerance`` of the
    baseline wins; if none qualifies, the best mean target-dev F1 wins.
    """
    means = [float(np.mean([r.target_dev for r in runs])) for runs in candidates]
    ok = [k for k, m in enumerate(means) if m >= baseline_target_dev - tolerance]
    if ok:
        return max(ok)
    return int(np.argmax(means))


def continual_benchmark(
    method: str,
    seed: int,
    n_domains: int = 4,
    weights: PenaltyWeights = PenaltyWeights(),
    config: ReaderConfig = DEFAULT_READER,
    pretrain_steps: int = 2000,
    base_spec: FinetuneSpec | None = None,
) -> list[RunLog]:
    sequence = benchmark_datasets(n_domains, seed)
    spec = (base_spec or FinetuneSpec(diagnostics_memory_size=0)).replace(
        method=method, weights=weights, seed=seed
    )
    return continual_run(config, sequence, spec, pretrain_steps=pretrain_steps)


def first_domain_series(logs: Sequence[RunLog], first: str) -> list[tuple[int, float]]:
    """(global step, first-domain dev F1) across all phases of a continual run."""
    out = []
    offset = 0
    for log in logs:
        for r in log.records:
            if r.seen_f1 and first in r.seen_f1:
                out.append((offset + r.step, r.seen_f1[first]))
        if log.records:
            offset += log.records[-1].step
    return out
