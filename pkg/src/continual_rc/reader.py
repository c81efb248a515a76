"""A small extractive span reader with hand-written backprop.

Each context position is scored from a local window of token embeddings
(previous, current, next) concatenated with a projected mean question
embedding, passed through two tanh layers, then two linear heads give start
and end scores. Start and end distributions are softmaxes over positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .params import GradientSet, NamedParams

WINDOW = 3  # previous, current, next token


class ContextLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ReaderConfig:
    vocab_size: int = 240
    embed_dim: int = 16
    hidden_dim: int = 32
    max_context_len: int = 48
    freeze_embeddings: bool = False

    def __post_init__(self) -> None:
        for field in ("vocab_size", "embed_dim", "hidden_dim", "max_context_len"):
            value = getattr(self, field)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{field} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class Example:
    context: tuple[int, ...]
    question: tuple[int, ...]
    answers: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "context", tuple(int(t) for t in self.context))
        object.__setattr__(self, "question", tuple(int(t) for t in self.question))
        object.__setattr__(self, "answers", tuple((int(s), int(e)) for s, e in self.answers))
        if not self.context:
            raise ValueError("context must be nonempty")
        if not self.question:
            raise ValueError("question must be nonempty")
        if not self.answers:
            raise ValueError("at least one answer span is required")
        n = len(self.context)
        for s, e in self.answers:
            if not 0 <= s <= e < n:
                raise ValueError(f"answer span ({s}, {e}) outside context of length {n}")

    def answer_tokens(self, k: int = 0) -> list[int]:
        s, e = self.answers[k]
        return list(self.context[s:e + 1])


VARIABLES = (
    "embedding",
    "question_proj",
    "hidden1.weight",
    "hidden1.bias",
    "hidden2.weight",
    "hidden2.bias",
    "start_head",
    "end_head",
)


def variable_shapes(config: ReaderConfig) -> dict[str, tuple[int, ...]]:
    d, h = config.embed_dim, config.hidden_dim
    return {
        "embedding": (config.vocab_size, d),
        "question_proj": (d, d),
        "hidden1.weight": ((WINDOW + 1) * d, h),
        "hidden1.bias": (h,),
        "hidden2.weight": (h, h),
        "hidden2.bias": (h,),
        "start_head": (h,),
        "end_head": (h,),
    }


def init_reader(config: ReaderConfig, seed: int) -> NamedParams:
    """Weights uniform in [-0.1, 0.1], biases zero."""
    rng = np.random.default_rng(seed)
    out = []
    for name, shape in variable_shapes(config).items():
        if name.endswith(".bias"):
            out.append((name, np.zeros(shape)))
        else:
            out.append((name, rng.uniform(-0.1, 0.1, size=shape)))
    return NamedParams(out)


class EncodedBatch:
    """Padded integer arrays for a list of examples.

    Build once with :func:`encode_batch` when the same examples are scored
    repeatedly (episodic memory, finite-difference checks).
    """

    def __init__(self, batch: Sequence[Example], config: ReaderConfig):
        if len(batch) == 0:
            raise ValueError("batch must be nonempty")
        for ex in batch:
            if len(ex.context) > config.max_context_len:
                raise ContextLengthError(
                    f"context length {len(ex.context)} exceeds max_context_len {config.max_context_len}"
                )
            if max(ex.context) >= config.vocab_size or max(ex.question) >= config.vocab_size:
                raise ValueError("token id outside vocabulary")
        B = len(batch)
        L = max(len(ex.context) for ex in batch)
        Lq = max(len(ex.question) for ex in batch)
        self.size = B
        self.lengths = np.array([len(ex.context) for ex in batch])
        self.ctx = np.zeros((B, L), dtype=np.int64)
        self.mask = np.zeros((B, L), dtype=bool)
        self.q = np.zeros((B, Lq), dtype=np.int64)
        self.qmask = np.zeros((B, Lq), dtype=bool)
        for b, ex in enumerate(batch):
            n, m = len(ex.context), len(ex.question)
            self.ctx[b, :n] = ex.context
            self.mask[b, :n] = True
            self.q[b, :m] = ex.question
            self.qmask[b, :m] = True
        # neighbour validity: prev exists for j >= 1, next exists for j < n-1
        self.prev_mask = np.zeros_like(self.mask)
        self.prev_mask[:, 1:] = self.mask[:, :-1] & self.mask[:, 1:]
        self.next_mask = np.zeros_like(self.mask)
        self.next_mask[:, :-1] = self.mask[:, 1:]
        self.prev_ids = np.zeros_like(self.ctx)
        self.prev_ids[:, 1:] = self.ctx[:, :-1]
        self.next_ids = np.zeros_like(self.ctx)
        self.next_ids[:, :-1] = self.ctx[:, 1:]
        self.qlen = self.qmask.sum(axis=1)
        # float masks with a trailing axis, reused by every forward pass
        self.cur_w = self.mask[..., None].astype(np.float64)
        self.prev_w = self.prev_mask[..., None].astype(np.float64)
        self.next_w = self.next_mask[..., None].astype(np.float64)
        self.q_w = self.qmask[..., None] / self.qlen[:, None, None]
        self.pad = np.where(self.mask, 0.0, -np.inf)
        self.starts = np.array([ex.answers[0][0] for ex in batch])
        self.ends = np.array([ex.answers[0][1] for ex in batch])


def encode_batch(batch: Sequence[Example], config: ReaderConfig) -> EncodedBatch:
    return EncodedBatch(batch, config)


def _encoded(batch, config: ReaderConfig) -> EncodedBatch:
    return batch if isinstance(batch, EncodedBatch) else EncodedBatch(batch, config)


def _config_of(params: NamedParams, freeze_embeddings: bool = False, max_context_len: int | None = None) -> ReaderConfig:
    V, d = params["embedding"].shape
    h = params["hidden1.bias"].shape[0]
    return ReaderConfig(V, d, h, max_context_len or 10**9, freeze_embeddings)


def _forward(params: NamedParams, bt: EncodedBatch) -> dict:
    E = params["embedding"]
    cur = E[bt.ctx] * bt.cur_w
    prev = E[bt.prev_ids] * bt.prev_w
    nxt = E[bt.next_ids] * bt.next_w
    qmean = (E[bt.q] * bt.q_w).sum(axis=1)
    qproj = qmean @ params["question_proj"]
    B, L = bt.ctx.shape
    feat = np.concatenate([prev, cur, nxt, np.broadcast_to(qproj[:, None, :], (B, L, qproj.shape[1]))], axis=2)
    h1 = np.tanh(feat @ params["hidden1.weight"] + params["hidden1.bias"])
    h2 = np.tanh(h1 @ params["hidden2.weight"] + params["hidden2.bias"])
    s = h2 @ params["start_head"] + bt.pad
    e = h2 @ params["end_head"] + bt.pad
    return dict(qmean=qmean, feat=feat, h1=h1, h2=h2, s=s, e=e)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _loss_terms(cache: dict, bt: EncodedBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = np.arange(bt.size)
    ls = _log_softmax(cache["s"])
    le = _log_softmax(cache["e"])
    per_example = -(ls[rows, bt.starts] + le[rows, bt.ends])
    return per_example, ls, le


def _mean_loss(per_example: np.ndarray) -> float:
    # fixed left-to-right reduction in example order
    total = 0.0
    for v in per_example:
        total += float(v)
    return total / len(per_example)


def forward_loss(
    params: NamedParams, batch: Sequence[Example] | EncodedBatch, config: ReaderConfig | None = None
) -> float:
    """Mean over the batch of start CE + end CE at the first gold span."""
    config = config or _config_of(params)
    bt = _encoded(batch, config)
    cache = _forward(params, bt)
    per_example, _, _ = _loss_terms(cache, bt)
    return _mean_loss(per_example)


def forward_backward(
    params: NamedParams, batch: Sequence[Example] | EncodedBatch, config: ReaderConfig | None = None
) -> tuple[float, GradientSet]:
    config = config or _config_of(params)
    bt = _encoded(batch, config)
    c = _forward(params, bt)
    per_example, ls, le = _loss_terms(c, bt)
    loss = _mean_loss(per_example)

    B, L = bt.ctx.shape
    rows = np.arange(B)
    ds = np.exp(ls)
    ds[rows, bt.starts] -= 1.0
    de = np.exp(le)
    de[rows, bt.ends] -= 1.0
    ds /= B
    de /= B

    h1, h2, feat = c["h1"], c["h2"], c["feat"]
    g_start = np.einsum("bl,blh->h", ds, h2)
    g_end = np.einsum("bl,blh->h", de, h2)
    dh2 = ds[..., None] * params["start_head"] + de[..., None] * params["end_head"]
    dz2 = dh2 * (1.0 - h2 * h2)
    g_w2 = np.einsum("blh,blk->hk", h1, dz2)
    g_b2 = dz2.sum(axis=(0, 1))
    dh1 = dz2 @ params["hidden2.weight"].T
    dz1 = dh1 * (1.0 - h1 * h1)
    g_w1 = np.einsum("blf,blh->fh", feat, dz1)
    g_b1 = dz1.sum(axis=(0, 1))

    d = params["embedding"].shape[1]
    dfeat = dz1 @ params["hidden1.weight"].T
    dqproj = dfeat[:, :, 3 * d:].sum(axis=1)
    g_qp = c["qmean"].T @ dqproj

    if config.freeze_embeddings:
        g_emb = np.zeros_like(params["embedding"])
    else:
        g_emb = np.zeros_like(params["embedding"])
        dprev = dfeat[:, :, :d] * bt.prev_mask[..., None]
        dcur = dfeat[:, :, d:2 * d] * bt.mask[..., None]
        dnext = dfeat[:, :, 2 * d:3 * d] * bt.next_mask[..., None]
        np.add.at(g_emb, bt.prev_ids[bt.prev_mask], dprev[bt.prev_mask])
        np.add.at(g_emb, bt.ctx[bt.mask], dcur[bt.mask])
        np.add.at(g_emb, bt.next_ids[bt.next_mask], dnext[bt.next_mask])
        dqmean = dqproj @ params["question_proj"].T / bt.qlen[:, None]
        dq = np.broadcast_to(dqmean[:, None, :], bt.q.shape + (d,))
        np.add.at(g_emb, bt.q[bt.qmask], dq[bt.qmask])

    grads = GradientSet._adopt([
        ("embedding", g_emb),
        ("question_proj", g_qp),
        ("hidden1.weight", g_w1),
        ("hidden1.bias", g_b1),
        ("hidden2.weight", g_w2),
        ("hidden2.bias", g_b2),
        ("start_head", g_start),
        ("end_head", g_end),
    ])
    return loss, grads


def span_scores(params: NamedParams, batch: Sequence[Example]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw start/end scores (padding positions are -inf) and context lengths."""
    bt = EncodedBatch(batch, _config_of(params))
    c = _forward(params, bt)
    return c["s"], c["e"], bt.lengths


def best_span(start_scores: np.ndarray, end_scores: np.ndarray, max_span_len: int) -> tuple[int, int]:
    """argmax of start[i] + end[j] over i <= j < i + max_span_len.

    Ties go to the smallest start, then the smallest end.
    """
    n = len(start_scores)
    best, best_val = (0, 0), -np.inf
    for i in range(n):
        j_hi = min(n, i + max_span_len)
        window = start_scores[i] + end_scores[i:j_hi]
        k = int(np.argmax(window))
        if window[k] > best_val:
            best_val = window[k]
            best = (i, i + k)
    return best


def predict_span(params: NamedParams, example: Example, max_span_len: int) -> tuple[int, int]:
    if max_span_len < 1:
        raise ValueError("max_span_len must be positive")
    s, e, lengths = span_scores(params, [example])
    n = int(lengths[0])
    return best_span(s[0, :n], e[0, :n], max_span_len)


def predict_spans(params: NamedParams, examples: Sequence[Example], max_span_len: int) -> list[tuple[int, int]]:
    """Batched :func:`predict_span` with the same tie-breaking."""
    if max_span_len < 1:
        raise ValueError("max_span_len must be positive")
    s, e, _ = span_scores(params, examples)
    B, L = s.shape
    K = min(max_span_len, L)
    # cand[b, i, k] = s[b, i] + e[b, i + k]; row-major argmax picks smallest i, then smallest k
    e_pad = np.concatenate([e, np.full((B, K), -np.inf)], axis=1)
    cand = np.stack([s + e_pad[:, k:k + L] for k in range(K)], axis=2)
    flat = cand.reshape(B, L * K).argmax(axis=1)
    starts, offsets = np.divmod(flat, K)
    return [(int(i), int(i + k)) for i, k in zip(starts, offsets)]
