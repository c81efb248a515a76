"""Token-overlap F1 and exact match over id-token answers."""

from __future__ import annotations

from collections import Counter
from typing import Sequence

from .params import NamedParams
from .reader import Example, predict_spans


def token_f1(pred: Sequence[int], golds: Sequence[Sequence[int]]) -> float:
    """Max over golds of the multiset-overlap F1."""
    if len(pred) == 0:
        raise ValueError("prediction must be nonempty")
    if len(golds) == 0:
        raise ValueError("need at least one gold answer")
    pred_counts = Counter(pred)
    best = 0.0
    for gold in golds:
        if len(gold) == 0:
            raise ValueError("gold answers must be nonempty")
        overlap = sum((pred_counts & Counter(gold)).values())
        if overlap == 0:
            continue
        precision = overlap / len(pred)
        recall = overlap / len(gold)
        best = max(best, 2 * precision * recall / (precision + recall))
    return best


def evaluate_dataset(
    params: NamedParams, data: Sequence[Example], max_span_len: int, batch_size: int = 256
) -> tuple[float, float]:
    """Return (mean token F1, exact match) over ``data``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    f1_total, em_total = 0.0, 0
    for lo in range(0, len(data), batch_size):
        chunk = data[lo:lo + batch_size]
        for ex, (s, e) in zip(chunk, predict_spans(params, chunk, max_span_len)):
            golds = [ex.context[gs:ge + 1] for gs, ge in ex.answers]
            f1_total += token_f1(ex.context[s:e + 1], golds)
            em_total += (s, e) in ex.answers
    return f1_total / len(data), em_total / len(data)
