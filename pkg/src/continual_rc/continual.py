"""Pre-training, penalised fine-tuning and sequential multi-domain runs."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .gem import build_memory, gem_project, reference_gradient
from .metrics import evaluate_dataset
from .params import GradientSet, ModelSnapshot, NamedParams, check_structure, combine, step as sgd_step
from .penalties import (
    FisherDiag,
    LambdaSchedule,
    PenaltyKind,
    PenaltyWeights,
    estimate_fisher,
    lambda_at,
    method_penalty,
    normalize_fisher,
)
from .reader import Example, ReaderConfig, forward_backward, init_reader
from .tasks import Dataset, check_disjoint

logger = logging.getLogger(__name__)

METHODS = ("finetune", "l2", "cd", "ewc", "ewcn", "all", "gem")
FISHER_METHODS = ("ewc", "ewcn", "all")
_PENALTY_OF = {
    "finetune": PenaltyKind.NONE,
    "gem": PenaltyKind.NONE,
    "l2": PenaltyKind.L2,
    "cd": PenaltyKind.CD,
    "ewc": PenaltyKind.EWC,
    "ewcn": PenaltyKind.EWCN,
    "all": PenaltyKind.ALL,
}


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class FinetuneSpec:
    method: str = "finetune"
    weights: PenaltyWeights = field(default_factory=PenaltyWeights)
    schedule: LambdaSchedule = field(default_factory=LambdaSchedule)
    steps: int = 1000
    batch_size: int = 32
    learning_rate: float = 0.05
    eval_interval: int = 100
    seed: int = 0
    diagnostics_memory_size: int = 256
    smoothing_window: int = 1000
    fisher_samples: int = 1000
    max_span_len: int = 4

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {{{', '.join(METHODS)}}}")
        for name in ("steps", "batch_size", "eval_interval", "smoothing_window", "fisher_samples", "max_span_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.diagnostics_memory_size < 0:
            raise ConfigurationError("diagnostics_memory_size must be nonnegative")
        if self.eval_interval > self.steps:
            raise ConfigurationError("eval_interval must not exceed steps")
        if self.smoothing_window > self.steps:
            raise ConfigurationError("smoothing_window must not exceed steps")

    @property
    def diagnostics(self) -> bool:
        return self.diagnostics_memory_size > 0

    def replace(self, **changes) -> "FinetuneSpec":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class StepRecord:
    step: int
    ce_loss: float
    penalty_value: float
    lambda_value: float
    source_eval_f1: float | None = None
    target_eval_f1: float | None = None
    grad_cos: float | None = None
    seen_f1: Mapping[str, float] | None = None

    @property
    def total_loss(self) -> float:
        return self.ce_loss + self.lambda_value * self.penalty_value


@dataclass
class RunLog:
    method: str
    source: str | None = None
    target: str | None = None
    records: list[StepRecord] = field(default_factory=list)
    initial_source_f1: float | None = None
    initial_target_f1: float | None = None
    step_offset: int = 0
    final_params: NamedParams | None = field(default=None, repr=False)

    def append(self, record: StepRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("RunLog steps must be strictly increasing")
        self.records.append(record)

    def series(self, field_name: str) -> list[tuple[int, float]]:
        """(step, value) pairs where the field is present."""
        return [(r.step, getattr(r, field_name)) for r in self.records if getattr(r, field_name) is not None]

    def grad_cos_values(self) -> list[float]:
        return [r.grad_cos for r in self.records if r.grad_cos is not None]

    @property
    def final_source_f1(self) -> float | None:
        vals = self.series("source_eval_f1")
        return vals[-1][1] if vals else None

    @property
    def final_target_f1(self) -> float | None:
        vals = self.series("target_eval_f1")
        return vals[-1][1] if vals else None


def grad_cosine(g: Mapping[str, np.ndarray], g_ref: Mapping[str, np.ndarray]) -> float:
    """Cosine similarity of the two flattened gradients."""
    check_structure(g, g_ref)
    a = np.concatenate([np.ravel(g[k]) for k in g])
    b = np.concatenate([np.ravel(g_ref[k]) for k in g_ref])
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero gradient")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def smooth_series(values: Sequence[float], window: int) -> list[float]:
    """Means of consecutive non-overlapping windows; a trailing partial window is dropped."""
    if len(values) == 0:
        raise ValueError("cannot smooth an empty series")
    if window < 1 or window > len(values):
        raise ValueError(f"window must be in [1, {len(values)}], got {window}")
    arr = np.asarray(values, dtype=np.float64)
    n = len(arr) // window
    return [float(np.mean(arr[i * window:(i + 1) * window])) for i in range(n)]


def _evaluate(params: NamedParams, data: Sequence[Example] | None, spec: FinetuneSpec) -> float | None:
    if not data:
        return None
    return evaluate_dataset(params, data, spec.max_span_len)[0]


def _train(
    params: NamedParams,
    config: ReaderConfig,
    train_data: Sequence[Example],
    spec: FinetuneSpec,
    *,
    theta_star: NamedParams | None = None,
    fisher: FisherDiag | None = None,
    fisher_norm: FisherDiag | None = None,
    source: Dataset | None = None,
    target_dev: Sequence[Example] | None = None,
    extra_evals: Mapping[str, Sequence[Example]] | None = None,
    log: RunLog,
) -> NamedParams:
    """SGD loop shared by pre-training and fine-tuning."""
    if len(train_data) == 0:
        raise ValueError("training data is empty")
    rng = np.random.default_rng(spec.seed)
    kind = _PENALTY_OF[spec.method]
    memory = None
    if source is not None and (spec.diagnostics or spec.method == "gem"):
        if spec.diagnostics_memory_size < 1:
            raise ConfigurationError("gem needs diagnostics_memory_size > 0")
        memory = build_memory(source.train, spec.diagnostics_memory_size)
    source_dev = source.dev if source is not None else None

    for t in range(1, spec.steps + 1):
        idx = rng.integers(0, len(train_data), size=spec.batch_size)
        batch = [train_data[i] for i in idx]
        ce, g_ce = forward_backward(params, batch, config)
        lam = lambda_at(spec.schedule, t - 1)
        penalty = 0.0
        update: GradientSet = g_ce
        if kind is not PenaltyKind.NONE:
            penalty, g_pen = method_penalty(kind, params, theta_star, spec.weights, fisher, fisher_norm)
            if config.freeze_embeddings:
                # frozen means frozen: no penalty may move the embedding table either
                g_pen = g_pen.replace(embedding=np.zeros_like(g_pen["embedding"]))
            update = combine(g_ce, g_pen, lam)
        g_ref = reference_gradient(params, memory, config) if memory is not None else None
        if spec.method == "gem":
            update = gem_project(g_ce, g_ref)
        cos = None
        if g_ref is not None and spec.diagnostics:
            try:
                cos = grad_cosine(update, g_ref)
            except ValueError:
                cos = None
        params = sgd_step(params, update, spec.learning_rate)

        src_f1 = tgt_f1 = seen = None
        if t % spec.eval_interval == 0:
            src_f1 = _evaluate(params, source_dev, spec)
            tgt_f1 = _evaluate(params, target_dev, spec)
            if extra_evals:
                seen = {name: _evaluate(params, data, spec) for name, data in extra_evals.items()}
        log.append(StepRecord(t, ce, penalty, lam, src_f1, tgt_f1, cos, seen))
    return params


def pretrain(
    config: ReaderConfig, source: Dataset, spec: FinetuneSpec, steps: int | None = None
) -> ModelSnapshot:
    """Plain SGD on the source CE loss from a fresh initialisation."""
    snapshot, _ = _pretrain_logged(config, source, spec, steps)
    return snapshot


def _pretrain_logged(
    config: ReaderConfig,
    source: Dataset,
    spec: FinetuneSpec,
    steps: int | None = None,
    extra_evals: Mapping[str, Sequence[Example]] | None = None,
) -> tuple[ModelSnapshot, RunLog]:
    if not source.train:
        raise ValueError(f"source dataset {source.name!r} has no training examples")
    n_steps = spec.steps if steps is None else steps
    if n_steps < 0:
        raise ValueError("steps must be nonnegative")
    params = init_reader(config, spec.seed)
    log = RunLog(method="pretrain", source=None, target=source.name)
    if n_steps > 0:
        train_spec = spec.replace(
            method="finetune",
            steps=n_steps,
            eval_interval=min(spec.eval_interval, n_steps),
            smoothing_window=min(spec.smoothing_window, n_steps),
        )
        params = _train(
            params, config, source.train, train_spec,
            target_dev=source.dev, extra_evals=extra_evals, log=log,
        )
    return ModelSnapshot(params, source.name, n_steps), log


def finetune(
    snapshot: ModelSnapshot,
    fisher: FisherDiag | None,
    target: Dataset,
    source_eval: Dataset,
    spec: FinetuneSpec,
    config: ReaderConfig | None = None,
    extra_evals: Mapping[str, Sequence[Example]] | None = None,
) -> tuple[NamedParams, RunLog]:
    """Fine-tune from ``snapshot`` on ``target`` with the penalty chosen by ``spec.method``.

    ``source_eval.train`` feeds the GEM / diagnostics memory and
    ``source_eval.dev`` is evaluated every ``eval_interval`` steps alongside
    ``target.dev``.
    """
    if spec.method in FISHER_METHODS and fisher is None:
        raise ConfigurationError(f"method {spec.method!r} requires a Fisher diagonal")
    if spec.method == "gem" and spec.diagnostics_memory_size < 1:
        raise ConfigurationError("gem needs diagnostics_memory_size > 0")
    theta_star = snapshot.params
    if config is None:
        V, d = theta_star["embedding"].shape
        config = ReaderConfig(V, d, theta_star["hidden1.bias"].shape[0], 10**9)
    fisher_norm = None
    if fisher is not None:
        check_structure(theta_star, fisher)
        if spec.method in ("ewcn", "all"):
            fisher_norm = normalize_fisher(fisher)
    log = RunLog(
        method=spec.method,
        source=source_eval.name,
        target=target.name,
        initial_source_f1=_evaluate(theta_star, source_eval.dev, spec),
        initial_target_f1=_evaluate(theta_star, target.dev, spec),
        step_offset=snapshot.step,
    )
    params = _train(
        theta_star, config, target.train, spec,
        theta_star=theta_star, fisher=fisher, fisher_norm=fisher_norm,
        source=source_eval, target_dev=target.dev, extra_evals=extra_evals, log=log,
    )
    log.final_params = params
    return params, log


def continual_run(
    config: ReaderConfig,
    sequence: Sequence[Dataset],
    spec: FinetuneSpec,
    pretrain_steps: int | None = None,
) -> list[RunLog]:
    """Pre-train on ``sequence[0]`` then fine-tune on each later domain in turn.

    The model finished on the previous domain is the source for the next one,
    and the Fisher diagonal is re-estimated on that previous domain's training
    data. Every log evaluates the dev split of all domains seen so far.
    Returns one log per phase, pre-training first; each carries the
    parameters it ended with in ``final_params``.
    """
    if len(sequence) < 2:
        raise ValueError("a continual run needs at least two domains")
    names = [d.name for d in sequence]
    if len(set(names)) != len(names):
        raise ValueError("domain names must be unique")
    for d in sequence:
        check_disjoint(d)

    first = sequence[0]
    snapshot, pre_log = _pretrain_logged(
        config, first, spec, pretrain_steps, extra_evals={first.name: first.dev}
    )
    pre_log.final_params = snapshot.params
    logs = [pre_log]
    params = snapshot.params
    global_step = snapshot.step
    for k in range(1, len(sequence)):
        prev, cur = sequence[k - 1], sequence[k]
        fisher = None
        if spec.method in FISHER_METHODS:
            n = min(spec.fisher_samples, len(prev.train))
            fisher = estimate_fisher(params, prev.train, n, config)
        snapshot = ModelSnapshot(params, prev.name, global_step)
        seen = {d.name: d.dev for d in sequence[: k + 1]}
        logger.info("continual: %s -> %s (%s)", prev.name, cur.name, spec.method)
        params, log = finetune(snapshot, fisher, cur, prev, spec, config, extra_evals=seen)
        logs.append(log)
        global_step += spec.steps
    return logs
