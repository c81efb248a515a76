import math

import numpy as np
import pytest

from continual_rc.params import NamedParams
from continual_rc.reader import Example, ReaderConfig, init_reader


TINY = ReaderConfig(vocab_size=20, embed_dim=3, hidden_dim=4, max_context_len=10)


def random_example(rng, vocab=20, min_len=1, max_len=10, n_spans=1):
    n = int(rng.integers(min_len, max_len + 1))
    ctx = rng.integers(0, vocab, n)
    q = rng.integers(0, vocab, int(rng.integers(1, 5)))
    spans = []
    for _ in range(n_spans):
        s = int(rng.integers(0, n))
        spans.append((s, int(rng.integers(s, n))))
    return Example(ctx, q, spans)


def perturbed_reader(config=TINY, seed=0, scale=0.5):
    rng = np.random.default_rng(seed + 1000)
    p = init_reader(config, seed)
    return p.map(lambda a: a + rng.normal(0.0, scale, a.shape))


def oracle_example_loss(params, ex):
    """Position-by-position reimplementation of the reader loss for one example."""
    E = params["embedding"]
    d = E.shape[1]
    qmean = sum(E[t] for t in ex.question) / len(ex.question)
    qproj = qmean @ params["question_proj"]
    n = len(ex.context)
    start_scores, end_scores = [], []
    for j in range(n):
        prev = E[ex.context[j - 1]] if j > 0 else np.zeros(d)
        cur = E[ex.context[j]]
        nxt = E[ex.context[j + 1]] if j + 1 < n else np.zeros(d)
        x = np.concatenate([prev, cur, nxt, qproj])
        h1 = np.tanh(x @ params["hidden1.weight"] + params["hidden1.bias"])
        h2 = np.tanh(h1 @ params["hidden2.weight"] + params["hidden2.bias"])
        start_scores.append(float(h2 @ params["start_head"]))
        end_scores.append(float(h2 @ params["end_head"]))

    def nll(scores, k):
        m = max(scores)
        return -(scores[k] - m - math.log(sum(math.exp(s - m) for s in scores)))

    s, e = ex.answers[0]
    return nll(start_scores, s) + nll(end_scores, e), start_scores, end_scores


def oracle_loss(params, batch):
    return sum(oracle_example_loss(params, ex)[0] for ex in batch) / len(batch)


def central_differences(fn, params: NamedParams, h=1e-5):
    flat = params.flat()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        out[i] = (fn(params.unflatten(up)) - fn(params.unflatten(down))) / (2 * h)
    return params.unflatten(out)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
