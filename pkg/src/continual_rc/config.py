"""Strict YAML experiment configuration.

Schema (every key optional except ``output_dir``; unknown keys are errors)::

    output_dir: runs/demo            # required
    pretrain_steps: 2000
    reader:
      vocab_size: 240
      embed_dim: 64
      hidden_dim: 16
      max_context_len: 40
      freeze_embeddings: true
    domains:                         # default: two 80-token-block domains
      - name: source
        seed: 0
        vocab_size: 240              # defaults to reader.vocab_size
        block: [0, 80]
        trigger_token: 0
        context_len: [20, 40]
        answer_len: [1, 4]
        n_examples: 4284
        distractor_rate: 0.1
        question_len: 4
    finetune:
      method: finetune               # finetune | l2 | cd | ewc | ewcn | all | gem
      weights: {lambda_l2: 0, lambda_cd: 0, lambda_ewc: 0, lambda_ewcn: 0}
      schedule: {kind: static, initial: 1.0, total_steps: 1, floor: 0.0}
      steps: 1000
      batch_size: 32
      learning_rate: 0.05
      eval_interval: 100
      seed: 0
      diagnostics_memory_size: 256   # GEM / diagnostics memory m; 0 disables diagnostics
      smoothing_window: 1000         # gradient-cosine averaging window
      fisher_samples: 1000
      max_span_len: 4
    sweep:                           # optional list of weight sets
      - {lambda_l2: 0.01}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .continual import METHODS, ConfigurationError, FinetuneSpec
from .experiments import DEFAULT_READER, SOURCE_EXAMPLES, TARGET_EXAMPLES
from .penalties import LambdaSchedule, PenaltyWeights
from .reader import ReaderConfig
from .tasks import SynthDomainSpec, default_domains


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    output_dir: Path
    reader: ReaderConfig = DEFAULT_READER
    domains: tuple[SynthDomainSpec, ...] = ()
    spec: FinetuneSpec = field(default_factory=FinetuneSpec)
    pretrain_steps: int = 2000
    sweep: tuple[PenaltyWeights, ...] | None = None


class _StrictLoader(yaml.SafeLoader):
    pass


def _no_duplicates(loader: _StrictLoader, node: yaml.MappingNode, deep: bool = False) -> dict:
    seen = set()
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in seen:
            line = key_node.start_mark.line + 1
            raise ConfigError(f"line {line}: duplicate key {key!r}")
        seen.add(key)
    return loader.construct_mapping(node, deep=deep)


_StrictLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _no_duplicates)


def _check_keys(where: str, data: Any, allowed: set[str]) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(str, unknown))}; allowed: {', '.join(sorted(allowed))}")
    return data


def _int(where: str, value: Any, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{where}: must be >= {minimum}, got {value}")
    return value


def _float(where: str, value: Any, minimum: float | None = None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{where}: must be >= {minimum}, got {value}")
    return float(value)


def _pair(where: str, value: Any) -> tuple[int, int]:
    if not isinstance(value, list) or len(value) != 2:
        raise ConfigError(f"{where}: expected a two-element list")
    return _int(where, value[0]), _int(where, value[1])


def _reader(data: Any) -> ReaderConfig:
    d = _check_keys("reader", data, {"vocab_size", "embed_dim", "hidden_dim", "max_context_len", "freeze_embeddings"})
    kwargs = {}
    for key in ("vocab_size", "embed_dim", "hidden_dim", "max_context_len"):
        if key in d:
            kwargs[key] = _int(f"reader.{key}", d[key], 1)
    if "freeze_embeddings" in d:
        if not isinstance(d["freeze_embeddings"], bool):
            raise ConfigError("reader.freeze_embeddings: expected true or false")
        kwargs["freeze_embeddings"] = d["freeze_embeddings"]
    base = DEFAULT_READER
    return ReaderConfig(**{**base.__dict__, **kwargs})


def _weights(where: str, data: Any) -> PenaltyWeights:
    d = _check_keys(where, data, {"lambda_l2", "lambda_cd", "lambda_ewc", "lambda_ewcn"})
    return PenaltyWeights(**{k: _float(f"{where}.{k}", v, 0.0) for k, v in d.items()})


def _schedule(data: Any) -> LambdaSchedule:
    d = _check_keys("finetune.schedule", data, {"kind", "initial", "total_steps", "floor"})
    kwargs: dict[str, Any] = {}
    if "kind" in d:
        if d["kind"] not in ("static", "linear_decay"):
            raise ConfigError(f"finetune.schedule.kind: {d['kind']!r} is not one of {{static, linear_decay}}")
        kwargs["kind"] = d["kind"]
    if "initial" in d:
        kwargs["initial"] = _float("finetune.schedule.initial", d["initial"], 0.0)
    if "floor" in d:
        kwargs["floor"] = _float("finetune.schedule.floor", d["floor"], 0.0)
    if "total_steps" in d:
        kwargs["total_steps"] = _int("finetune.schedule.total_steps", d["total_steps"], 1)
    try:
        return LambdaSchedule(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"finetune.schedule: {exc}") from None


_SPEC_INTS = {
    "steps": 1, "batch_size": 1, "eval_interval": 1, "seed": None,
    "diagnostics_memory_size": 0, "smoothing_window": 1, "fisher_samples": 1, "max_span_len": 1,
}


def _spec(data: Any) -> FinetuneSpec:
    d = _check_keys("finetune", data, set(_SPEC_INTS) | {"method", "weights", "schedule", "learning_rate"})
    kwargs: dict[str, Any] = {}
    if "method" in d:
        if d["method"] not in METHODS:
            raise ConfigError(f"finetune.method: {d['method']!r} is not one of {{{', '.join(METHODS)}}}")
        kwargs["method"] = d["method"]
    if "weights" in d:
        kwargs["weights"] = _weights("finetune.weights", d["weights"])
    if "schedule" in d:
        kwargs["schedule"] = _schedule(d["schedule"])
    if "learning_rate" in d:
        kwargs["learning_rate"] = _float("finetune.learning_rate", d["learning_rate"])
    for key, minimum in _SPEC_INTS.items():
        if key in d:
            kwargs[key] = _int(f"finetune.{key}", d[key], minimum)
    try:
        return FinetuneSpec(**kwargs)
    except ConfigurationError as exc:
        raise ConfigError(f"finetune: {exc}") from None


_DOMAIN_KEYS = {
    "name", "seed", "vocab_size", "block", "trigger_token", "context_len",
    "answer_len", "n_examples", "distractor_rate", "question_len",
}


def _domain(i: int, data: Any, reader: ReaderConfig) -> SynthDomainSpec:
    where = f"domains[{i}]"
    d = _check_keys(where, data, _DOMAIN_KEYS)
    for key in ("name", "block", "trigger_token"):
        if key not in d:
            raise ConfigError(f"{where}: missing required key {key!r}")
    if not isinstance(d["name"], str) or not d["name"]:
        raise ConfigError(f"{where}.name: expected a nonempty string")
    kwargs: dict[str, Any] = {
        "name": d["name"],
        "seed": _int(f"{where}.seed", d.get("seed", i)),
        "vocab_size": _int(f"{where}.vocab_size", d.get("vocab_size", reader.vocab_size), 1),
        "domain_token_block": _pair(f"{where}.block", d["block"]),
        "trigger_token": _int(f"{where}.trigger_token", d["trigger_token"], 0),
    }
    for key in ("context_len", "answer_len"):
        if key in d:
            kwargs[key] = _pair(f"{where}.{key}", d[key])
    if "n_examples" in d:
        kwargs["n_examples"] = _int(f"{where}.n_examples", d["n_examples"], 1)
    if "question_len" in d:
        kwargs["question_len"] = _int(f"{where}.question_len", d["question_len"], 1)
    if "distractor_rate" in d:
        kwargs["distractor_rate"] = _float(f"{where}.distractor_rate", d["distractor_rate"], 0.0)
    try:
        spec = SynthDomainSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    if spec.vocab_size > reader.vocab_size:
        raise ConfigError(f"{where}: vocab_size exceeds reader.vocab_size")
    if spec.context_len[1] > reader.max_context_len:
        raise ConfigError(f"{where}: context_len max exceeds reader.max_context_len")
    return spec


TOP_KEYS = {"output_dir", "reader", "domains", "finetune", "pretrain_steps", "sweep"}


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.load(text, Loader=_StrictLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark is not None else "?"
        raise ConfigError(f"line {line}: YAML syntax error: {exc.problem or exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"YAML error: {exc}") from None
    d = _check_keys("config", data, TOP_KEYS)
    if "output_dir" not in d:
        raise ConfigError("config: missing required key 'output_dir'")
    if not isinstance(d["output_dir"], str) or not d["output_dir"]:
        raise ConfigError("output_dir: expected a nonempty path string")
    reader = _reader(d.get("reader"))
    if "domains" in d:
        if not isinstance(d["domains"], list) or len(d["domains"]) == 0:
            raise ConfigError("domains: expected a nonempty list")
        domains = tuple(_domain(i, item, reader) for i, item in enumerate(d["domains"]))
    else:
        domains = tuple(default_domains(
            2, vocab_size=reader.vocab_size, block_size=80,
            n_examples=[SOURCE_EXAMPLES, TARGET_EXAMPLES],
        ))
    names = [s.name for s in domains]
    if len(set(names)) != len(names):
        raise ConfigError(f"domains: names must be unique, got {names}")
    blocks = sorted((s.domain_token_block, s.name) for s in domains)
    for ((_, hi), a), ((lo, _), b) in zip(blocks, blocks[1:]):
        if lo < hi:
            raise ConfigError(f"domains: token blocks of {a!r} and {b!r} overlap")
    sweep = None
    if "sweep" in d:
        if not isinstance(d["sweep"], list) or not d["sweep"]:
            raise ConfigError("sweep: expected a nonempty list of weight mappings")
        sweep = tuple(_weights(f"sweep[{i}]", w) for i, w in enumerate(d["sweep"]))
    return ExperimentConfig(
        output_dir=Path(d["output_dir"]),
        reader=reader,
        domains=domains,
        spec=_spec(d.get("finetune")),
        pretrain_steps=_int("pretrain_steps", d.get("pretrain_steps", 2000), 0),
        sweep=sweep,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise ConfigError(f"{path}: not valid UTF-8") from None
    return parse_config(text)
