"""Gradient episodic memory with a single source-domain constraint."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .params import GradientSet, NamedParams, check_structure
from .reader import EncodedBatch, Example, ReaderConfig, encode_batch, forward_backward

DEFAULT_MEMORY_SIZE = 256
_ZERO_REF = 1e-24


class EmptyMemoryError(RuntimeError):
    pass


@dataclass(frozen=True)
class EpisodicMemory:
    examples: tuple[Example, ...]
    capacity: int
    _encoded: dict = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.examples)

    def encoded(self, config: ReaderConfig) -> EncodedBatch:
        """The memory as one padded batch, built once per reader config."""
        if config not in self._encoded:
            self._encoded[config] = encode_batch(self.examples, config)
        return self._encoded[config]


def build_memory(source_train: Sequence[Example], m: int = DEFAULT_MEMORY_SIZE) -> EpisodicMemory:
    """Keep the first ``m`` source training examples, in stream order."""
    if m < 1:
        raise ValueError(f"memory capacity must be positive, got {m}")
    if len(source_train) == 0:
        raise ValueError("source training stream is empty")
    return EpisodicMemory(tuple(source_train[:m]), m)


def reference_gradient(
    params: NamedParams, memory: EpisodicMemory, config: ReaderConfig | None = None
) -> GradientSet:
    """CE gradient of the whole memory taken as one batch."""
    if len(memory) == 0:
        raise EmptyMemoryError("episodic memory is empty")
    batch = memory.encoded(config) if config is not None else list(memory.examples)
    _, grad = forward_backward(params, batch, config)
    return grad


def gem_project(g: GradientSet, g_ref: GradientSet) -> GradientSet:
    """Project ``g`` onto the half-space ``{x : x . g_ref >= 0}``.

    Feasible gradients, and any ``g`` when ``g_ref`` is (numerically) zero,
    come back unchanged.
    """
    check_structure(g, g_ref)
    gv, rv = g.flat(), g_ref.flat()
    dot = float(gv @ rv)
    ref_sq = float(rv @ rv)
    if dot >= 0 or ref_sq < _ZERO_REF:
        return g
    return g.unflatten(gv - (dot / ref_sq) * rv)
