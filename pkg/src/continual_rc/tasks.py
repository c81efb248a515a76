"""Synthetic extractive-QA domains with controllable vocabulary shift.

Every domain owns a contiguous block of token ids. Inside the block, the
trigger token marks where the answer starts, a sub-range of "answer" tokens
forms the answer span, and the rest is filler. A fraction of filler positions
(``distractor_rate``) is replaced by tokens from outside the block, which is
the knob for how much two domains overlap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .reader import Example

TRAIN_FRAC, DEV_FRAC, TEST_FRAC = 0.70, 0.15, 0.15


@dataclass(frozen=True)
class SynthDomainSpec:
    name: str
    seed: int
    vocab_size: int
    domain_token_block: tuple[int, int]  # [lo, hi)
    trigger_token: int
    context_len: tuple[int, int] = (20, 40)
    answer_len: tuple[int, int] = (1, 4)
    n_examples: int = 1000
    distractor_rate: float = 0.1
    question_len: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "domain_token_block", tuple(self.domain_token_block))
        object.__setattr__(self, "context_len", tuple(self.context_len))
        object.__setattr__(self, "answer_len", tuple(self.answer_len))
        lo, hi = self.domain_token_block
        if not 0 <= lo < hi <= self.vocab_size:
            raise ValueError(f"token block {self.domain_token_block} not inside vocab of {self.vocab_size}")
        if hi - lo < 5:
            raise ValueError("token block needs at least 5 tokens")
        if not lo <= self.trigger_token < hi:
            raise ValueError("trigger_token must lie inside the domain token block")
        cmin, cmax = self.context_len
        amin, amax = self.answer_len
        if not 1 <= amin <= amax:
            raise ValueError(f"invalid answer_len {self.answer_len}")
        if not 1 <= cmin <= cmax:
            raise ValueError(f"invalid context_len {self.context_len}")
        if amax > cmin - 1:
            raise ValueError("answer_len max must be at most context_len min - 1")
        if self.n_examples < 1:
            raise ValueError("n_examples must be positive")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ValueError("distractor_rate must be in [0, 1]")
        if self.question_len < 1:
            raise ValueError("question_len must be positive")
        if self.distractor_rate > 0 and hi - lo == self.vocab_size:
            raise ValueError("distractors need tokens outside the domain block")

    @property
    def answer_tokens(self) -> np.ndarray:
        lo, hi = self.domain_token_block
        inner = np.array([t for t in range(lo, hi) if t != self.trigger_token])
        return inner[: len(inner) // 2]

    @property
    def filler_tokens(self) -> np.ndarray:
        lo, hi = self.domain_token_block
        inner = np.array([t for t in range(lo, hi) if t != self.trigger_token])
        return inner[len(inner) // 2:]


@dataclass(frozen=True)
class Dataset:
    name: str
    train: list[Example] = field(default_factory=list)
    dev: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)

    def splits(self) -> dict[str, list[Example]]:
        return {"train": self.train, "dev": self.dev, "test": self.test}


def split_sizes(n: int) -> tuple[int, int, int]:
    """70/15/15 cut; dev and test are floored and train takes the remainder."""
    n_dev = int(np.floor(n * DEV_FRAC + 1e-9))
    n_test = int(np.floor(n * TEST_FRAC + 1e-9))
    return n - n_dev - n_test, n_dev, n_test


def _sample_example(spec: SynthDomainSpec, rng: np.random.Generator, outside: np.ndarray) -> Example:
    cmin, cmax = spec.context_len
    amin, amax = spec.answer_len
    n = int(rng.integers(cmin, cmax + 1))
    a = int(rng.integers(amin, amax + 1))
    trig = int(rng.integers(0, n - a))
    filler = rng.choice(spec.filler_tokens, size=n)
    if len(outside):
        swap = rng.random(n) < spec.distractor_rate
        filler = np.where(swap, rng.choice(outside, size=n), filler)
    context = filler.copy()
    context[trig] = spec.trigger_token
    context[trig + 1: trig + 1 + a] = rng.choice(spec.answer_tokens, size=a)
    question = rng.choice(spec.filler_tokens, size=spec.question_len)
    question[int(rng.integers(0, spec.question_len))] = spec.trigger_token
    return Example(context, question, [(trig + 1, trig + a)])


def generate_domain(spec: SynthDomainSpec) -> Dataset:
    """Deterministic per ``spec.seed``; examples are unique, so splits are disjoint."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.domain_token_block
    outside = np.array([t for t in range(spec.vocab_size) if not lo <= t < hi], dtype=np.int64)
    seen: set[tuple] = set()
    examples: list[Example] = []
    attempts = 0
    while len(examples) < spec.n_examples:
        attempts += 1
        if attempts > 50 * spec.n_examples:
            raise ValueError("could not generate enough distinct examples; widen lengths or vocabulary")
        ex = _sample_example(spec, rng, outside)
        key = (ex.context, ex.question)
        if key in seen:
            continue
        seen.add(key)
        examples.append(ex)
    order = rng.permutation(len(examples))
    shuffled = [examples[i] for i in order]
    n_train, n_dev, _ = split_sizes(len(shuffled))
    return Dataset(
        name=spec.name,
        train=shuffled[:n_train],
        dev=shuffled[n_train:n_train + n_dev],
        test=shuffled[n_train + n_dev:],
    )


def default_domains(
    n_domains: int = 2,
    vocab_size: int = 240,
    block_size: int = 80,
    n_examples: Sequence[int] | int = 1000,
    distractor_rate: float = 0.1,
    seed: int = 0,
    **kwargs,
) -> list[SynthDomainSpec]:
    """Domains on consecutive disjoint token blocks, trigger = first block token."""
    if n_domains * block_size > vocab_size:
        raise ValueError("blocks do not fit in the vocabulary")
    if isinstance(n_examples, int):
        n_examples = [n_examples] * n_domains
    specs = []
    for k in range(n_domains):
        lo = k * block_size
        specs.append(SynthDomainSpec(
            name=f"domain{k}",
            seed=seed * 1000 + k,
            vocab_size=vocab_size,
            domain_token_block=(lo, lo + block_size),
            trigger_token=lo,
            n_examples=n_examples[k],
            distractor_rate=distractor_rate,
            **kwargs,
        ))
    return specs


def check_disjoint(dataset: Dataset) -> None:
    """Raise if any (context, question, answers) triple appears in two splits."""
    owner: dict[tuple, str] = {}
    for split, examples in dataset.splits().items():
        for ex in examples:
            key = (ex.context, ex.question, ex.answers)
            prev = owner.setdefault(key, split)
            if prev != split:
                raise ValueError(f"{dataset.name}: example shared by {prev} and {split}")


def format_example(ex: Example) -> str:
    ctx = " ".join(map(str, ex.context))
    q = " ".join(map(str, ex.question))
    spans = ";".join(f"{s}-{e}" for s, e in ex.answers)
    return f"{ctx}\t{q}\t{spans}"


def parse_example(line: str) -> Example:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 3:
        raise ValueError(f"expected 3 tab-separated fields, got {len(parts)}")
    ctx = [int(t) for t in parts[0].split()]
    q = [int(t) for t in parts[1].split()]
    spans = []
    for item in parts[2].split(";"):
        s, e = item.split("-")
        spans.append((int(s), int(e)))
    return Example(ctx, q, spans)


def write_examples(examples: Iterable[Example], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(format_example(ex) + "\n")


def read_examples(path: str | Path) -> list[Example]:
    with open(path, encoding="utf-8") as fh:
        return [parse_example(line) for line in fh if line.strip()]
