"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the terminal
report) or ``python3 tests/test_acceptance.py``. The benchmark criteria
(3-6) share one set of pre-trained readers and take about half an hour on a
single core.
"""

from __future__ import annotations

import csv
import time

import numpy as np
import pytest

from continual_rc.continual import FinetuneSpec, finetune, pretrain, smooth_series
from continual_rc.experiments import (
    DEFAULT_READER,
    LAMBDA_GRIDS,
    TARGET_TOLERANCE,
    continual_benchmark,
    first_domain_series,
    prepare_seed,
    run_method,
    select_weights,
)
from continual_rc.gem import gem_project
from continual_rc.metrics import token_f1
from continual_rc.params import GradientSet, NamedParams
from continual_rc.penalties import (
    FisherDiag,
    LambdaSchedule,
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
from continual_rc.persistence import load_checkpoint, save_checkpoint, write_runlog
from continual_rc.reader import ReaderConfig, encode_batch, forward_backward, forward_loss, variable_shapes
from continual_rc.tasks import default_domains, generate_domain

from conftest import central_differences, random_example, rel_error

SEEDS = range(5)
PENALIZED = ("l2", "cd", "ewc", "ewcn", "all")


@pytest.fixture(scope="module")
def report(request):
    tr = request.config.pluginmanager.getplugin("terminalreporter")
    lines = []

    def emit(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {label}: {detail}"
        lines.append(line)
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        else:
            print(line)
        return ok

    yield emit
    if tr is not None and lines:
        tr.write_sep("-", "acceptance summary")
        for line in lines:
            tr.write_line(line)


# 1. gradient correctness ---------------------------------------------------

GRAD_READER = ReaderConfig(vocab_size=30, embed_dim=6, hidden_dim=20, max_context_len=8)


def random_params(rng, shapes=(("w", (20, 25)), ("b", (300,)), ("v", (4, 5, 10)))) -> NamedParams:
    return NamedParams([(name, rng.normal(size=shape)) for name, shape in shapes])


def test_c1_gradients(report):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = {}

    def check(name, fn, grad, params):
        num = central_differences(fn, params)
        worst[name] = max(worst.get(name, 0.0), rel_error(grad.flat(), num.flat()))

    for _ in range(20):
        theta, star = random_params(rng), random_params(rng)
        fisher = FisherDiag([(k, rng.random(v.shape)) for k, v in theta.items()])
        # keep EWC away from its kinks: every |theta - theta*| > 1e-3
        diff = star.flat() - theta.flat()
        diff = np.where(np.abs(diff) < 1e-3, 1e-3 * np.sign(diff + 1e-300), diff)
        theta_ewc = theta.unflatten(star.flat() - diff)
        weights = PenaltyWeights(lambda_l2=rng.random(), lambda_cd=rng.random(), lambda_ewcn=rng.random())
        check("l2", lambda p: l2_penalty(p, star)[0], l2_penalty(theta, star)[1], theta)
        check("cd", lambda p: cosine_penalty(p, star)[0], cosine_penalty(theta, star)[1], theta)
        check("ewc", lambda p: ewc_penalty(p, star, fisher)[0], ewc_penalty(theta_ewc, star, fisher)[1], theta_ewc)
        check("all", lambda p: combined_penalty(p, star, fisher, weights)[0],
              combined_penalty(theta_ewc, star, fisher, weights)[1], theta_ewc)

        params = NamedParams([(k, rng.normal(0.0, 0.5, shape)) for k, shape in variable_shapes(GRAD_READER).items()])
        examples = [random_example(rng, vocab=30, min_len=2, max_len=8, n_spans=int(rng.integers(1, 3))) for _ in range(3)]
        batch = encode_batch(examples, GRAD_READER)
        _, g = forward_backward(params, batch, GRAD_READER)
        check("reader", lambda p: forward_loss(p, batch, GRAD_READER), g, params)
    elapsed = time.perf_counter() - t0
    dims = f"penalty dim {theta.size}, reader dim {params.size}"
    ok = max(worst.values()) < 1e-6 and elapsed < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert report("1 gradients", ok, f"max rel err {detail} ({dims}); {elapsed:.1f}s (< 10s)"), worst


# 2. GEM projection optimality ----------------------------------------------


def test_c2_gem_optimality(report):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst_dot, closer = 0.0, 0
    for _ in range(100):
        dim = int(rng.integers(5, 200))
        while True:
            gv, rv = rng.normal(size=dim), rng.normal(size=dim)
            if gv @ rv < 0:
                break
        cut = dim // 2
        g = GradientSet({"a": gv[:cut], "b": gv[cut:]})
        r = GradientSet({"a": rv[:cut], "b": rv[cut:]})
        pv = gem_project(g, r).flat()
        worst_dot = max(worst_dot, abs(pv @ rv) / (np.linalg.norm(pv) * np.linalg.norm(rv)))
        best = np.linalg.norm(pv - gv)
        scales = rng.uniform(1e-4, 2.0, size=(1000, 1)) * best
        cands = pv + scales * rng.normal(size=(1000, dim)) / np.sqrt(dim)
        # half the samples land exactly on the constraint boundary
        cands[::2] -= np.outer(cands[::2] @ rv / (rv @ rv), rv)
        feasible = cands @ rv >= 0
        dist = np.linalg.norm(cands - gv, axis=1)
        closer += int(np.sum(feasible & (dist < best * (1 - 1e-12))))
    elapsed = time.perf_counter() - t0
    ok = worst_dot <= 1e-9 and closer == 0 and elapsed < 10
    assert report("2 GEM projection", ok,
                  f"max |g~.g_ref|/(|g~||g_ref|) {worst_dot:.1e} (<= 1e-9), closer feasible samples {closer}/100000; {elapsed:.1f}s"), (worst_dot, closer)


# benchmark readers shared by criteria 3-5 ----------------------------------


@pytest.fixture(scope="module")
def benchmark():
    """Pre-trained readers plus vanilla fine-tuning for every seed."""
    t0 = time.perf_counter()
    setups, finetuned = [], []
    for seed in SEEDS:
        st = prepare_seed(seed, with_fisher=False)
        setups.append(st)
        finetuned.append(run_method(st, "finetune"))
    forgetting_time = time.perf_counter() - t0
    for st in setups:
        st.fisher = estimate_fisher(st.snapshot.params, st.source.train, 1000, DEFAULT_READER)
    return setups, finetuned, forgetting_time, time.perf_counter() - t0


def test_c3_fisher_normalization(report, benchmark):
    rng = np.random.default_rng(3)
    bounds_ok = True
    for _ in range(200):
        items = []
        for k in range(int(rng.integers(1, 6))):
            shape = tuple(int(s) for s in rng.integers(1, 6, size=int(rng.integers(1, 3))))
            if rng.random() < 0.2:
                arr = np.full(shape, rng.exponential())
            else:
                arr = rng.exponential(size=shape) * 10.0 ** rng.uniform(-8, 3)
            items.append((f"v{k}", arr))
        f = FisherDiag(items)
        n = normalize_fisher(f)
        for name, raw in f.items():
            a = n[name]
            bounds_ok &= bool(np.all((a >= 0) & (a <= 1)))
            if raw.max() > raw.min():
                bounds_ok &= a.min() == 0.0 and a.max() == 1.0
            else:
                bounds_ok &= bool(np.all(a == 0))
        bounds_ok &= normalize_fisher(n).bitwise_equal(n)
    report("3a Fisher normalization bounds", bounds_ok, "entries in [0,1], endpoints attained, constants -> 0, idempotent (200 random diagonals)")

    setups, *_ = benchmark
    raw_ratios, norm_ratios = [], []
    for st in setups:
        # variables whose Fisher is identically zero (frozen embeddings) carry no importance
        raw = {k: v for k, v in mean_fisher_per_variable(st.fisher) if v > 0}
        norm = dict(mean_fisher_per_variable(normalize_fisher(st.fisher)))
        norm = [norm[k] for k in raw]
        means = sorted(raw.values())
        raw_ratios.append(means[-1] / float(np.median(means)))
        norm_ratios.append(max(norm) / min(norm))
    effect_ok = min(raw_ratios) >= 10 and max(norm_ratios) < 10
    report("3b Fisher normalization effect", effect_ok,
           f"raw top/median per seed {np.round(raw_ratios, 1).tolist()} (>= 10); "
           f"normalized max/min {np.round(norm_ratios, 2).tolist()} (< 10)")
    assert bounds_ok and effect_ok


# 4. forgetting ---------------------------------------------------------------


def test_c4_forgetting(report, benchmark):
    _, finetuned, elapsed, _ = benchmark
    drops = [100 * r.source_drop for r in finetuned]
    mean = float(np.mean(drops))
    ok = mean >= 15 and elapsed < 300
    assert report("4 forgetting", ok,
                  f"mean source dev F1 drop {mean:.1f} points (>= 15), per seed {np.round(drops, 1).tolist()}; {elapsed:.0f}s (< 300s)"), drops


def test_c4_pretrain_quality(report, benchmark):
    _, finetuned, _, _ = benchmark
    f1 = [r.source_before for r in finetuned]
    ok = min(f1) >= 0.85
    assert report("4 pre-training quality", ok, f"source dev F1 after pre-training {np.round(f1, 3).tolist()} (each >= 0.85)"), f1


# 5. recovery ordering ----------------------------------------------------------


@pytest.fixture(scope="module")
def sweep(benchmark):
    setups, finetuned, _, setup_time = benchmark
    t0 = time.perf_counter()
    grid = {m: [[run_method(st, m, w) for st in setups] for w in LAMBDA_GRIDS[m]] for m in PENALIZED}
    elapsed = setup_time + time.perf_counter() - t0
    base_dev = float(np.mean([r.target_dev for r in finetuned]))
    chosen = {m: grid[m][select_weights(grid[m], base_dev, TARGET_TOLERANCE)] for m in PENALIZED}
    chosen["finetune"] = finetuned
    return chosen, elapsed


def retention(runs) -> float:
    return float(np.mean([r.source_after / r.source_before for r in runs]))


def test_c5a_penalties_help(report, sweep):
    chosen, elapsed = sweep
    ret = {m: retention(r) for m, r in chosen.items()}
    ok = all(ret[m] >= ret["finetune"] for m in PENALIZED) and elapsed < 1800
    summary = ", ".join(f"{m} {ret[m]:.3f} (lambda {weights_of(chosen[m])})" for m in ("finetune",) + PENALIZED)
    assert report("5a penalized >= finetune", ok, f"source retention {summary}; {elapsed:.0f}s (< 1800s)"), ret


def weights_of(runs) -> str:
    w = runs[0].weights
    vals = [f"{getattr(w, f'lambda_{k}'):.3g}" for k in ("l2", "cd", "ewc", "ewcn") if getattr(w, f"lambda_{k}") > 0]
    return "/".join(vals) or "0"


def test_c5b_normalized_ewc(report, sweep):
    chosen, _ = sweep
    a, b = retention(chosen["ewcn"]), retention(chosen["ewc"])
    assert report("5b ewcn >= ewc", a >= b, f"retention ewcn {a:.3f} vs ewc {b:.3f}"), (a, b)


def test_c5c_all_best(report, sweep):
    chosen, _ = sweep
    ret = {m: retention(chosen[m]) for m in ("l2", "cd", "ewcn", "all")}
    ok = ret["all"] == max(ret.values())
    assert report("5c all highest among l2/cd/ewcn/all", ok,
                  ", ".join(f"{m} {v:.3f}" for m, v in ret.items())), ret


def test_c5d_target_comparable(report, sweep):
    chosen, _ = sweep
    base = float(np.mean([r.target_test for r in chosen["finetune"]]))
    gaps = {m: 100 * (float(np.mean([r.target_test for r in chosen[m]])) - base) for m in PENALIZED}
    ok = all(abs(g) <= 2 for g in gaps.values())
    assert report("5d target test within 2 points", ok,
                  f"finetune {100 * base:.2f}; deltas " + ", ".join(f"{m} {g:+.2f}" for m, g in gaps.items())), gaps


# 6. continual learning ---------------------------------------------------------


def test_c6_continual(report, tmp_path_factory):
    # `all` keeps the weights the 2-domain grid selects under the same rule
    weights = LAMBDA_GRIDS["all"][1]
    t0 = time.perf_counter()
    finals = {"finetune": [], "all": []}
    out = tmp_path_factory.mktemp("continual") / "first_domain_f1.csv"
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "seed", "global_step", "first_domain_dev_f1"])
        for seed in SEEDS:
            for method, wts in (("finetune", PenaltyWeights()), ("all", weights)):
                logs = continual_benchmark(method, seed, n_domains=4, weights=wts)
                series = first_domain_series(logs, logs[0].target)
                for step, f1 in series:
                    w.writerow([method, seed, step, format(f1, ".17g")])
                finals[method].append(series[-1][1])
    elapsed = time.perf_counter() - t0
    n_rows = sum(1 for _ in open(out)) - 1
    a, f = float(np.mean(finals["all"])), float(np.mean(finals["finetune"]))
    ok = a > f and elapsed < 1800 and n_rows > 0
    assert report("6 continual shape", ok,
                  f"final first-domain F1 all {a:.4f} vs finetune {f:.4f}; {n_rows} series rows -> {out}; {elapsed:.0f}s (< 1800s)"), finals


# 7. diagnostics arithmetic -------------------------------------------------------


def test_c7_smoothing(report):
    config = ReaderConfig(vocab_size=40, embed_dim=4, hidden_dim=4, max_context_len=12)
    specs = default_domains(2, vocab_size=40, block_size=20, n_examples=[120, 80], context_len=(6, 12), answer_len=(1, 3))
    source, target = (generate_domain(s) for s in specs)
    spec = FinetuneSpec(method="l2", weights=PenaltyWeights(lambda_l2=0.01), steps=20000, batch_size=1,
                        eval_interval=20000, smoothing_window=1000, diagnostics_memory_size=8)
    snapshot = pretrain(config, source, spec, steps=200)
    _, log = finetune(snapshot, None, target, source, spec, config)
    raw = log.grad_cos_values()
    smoothed = smooth_series(raw, spec.smoothing_window)
    ok = len(raw) == 20000 and len(smoothed) == 20 and all(-1 <= v <= 1 for v in smoothed)
    assert report("7 diagnostics arithmetic", ok,
                  f"{len(raw)} raw values -> {len(smoothed)} smoothed (== 20), range [{min(smoothed):.3f}, {max(smoothed):.3f}]"), smoothed


# 8. metric unit suite --------------------------------------------------------------


def test_c8_token_f1(report):
    checks = [
        token_f1([1, 2, 3], [[1, 2, 3]]) == 1.0,
        token_f1([1, 2], [[3, 4]]) == 0.0,
        token_f1([1, 2], [[2, 3]]) == 0.5,
        token_f1([1, 1, 2], [[1, 2, 2]]) == 2 / 3,
        token_f1([1, 2], [[3, 4], [2, 3]]) == 0.5,
        token_f1([1, 2], [[2, 3], [1, 2]]) == 1.0,
    ]
    # adding golds never lowers the score
    rng = np.random.default_rng(8)
    for _ in range(500):
        pred = rng.integers(0, 6, int(rng.integers(1, 5))).tolist()
        golds = [rng.integers(0, 6, int(rng.integers(1, 5))).tolist() for _ in range(int(rng.integers(1, 4)))]
        extra = rng.integers(0, 6, int(rng.integers(1, 5))).tolist()
        checks.append(token_f1(pred, golds + [extra]) >= token_f1(pred, golds))
    ok = all(checks)
    assert report("8 token F1", ok, f"{sum(checks)}/{len(checks)} exact checks"), checks


# 9. reproducibility and persistence ----------------------------------------------------


def test_c9_reproducibility(report, tmp_path):
    config = ReaderConfig(vocab_size=40, embed_dim=6, hidden_dim=6, max_context_len=12)
    specs = default_domains(2, vocab_size=40, block_size=20, n_examples=[150, 100], context_len=(6, 12), answer_len=(1, 3))
    source, target = (generate_domain(s) for s in specs)
    spec = FinetuneSpec(method="all", weights=PenaltyWeights(0.01, 0.1, 0.0, 0.01), steps=60, batch_size=8,
                        eval_interval=20, smoothing_window=10, diagnostics_memory_size=16, seed=9,
                        schedule=LambdaSchedule("linear_decay", 1.0, 60, 0.2))
    blobs = []
    for k in range(2):
        snap = pretrain(config, source, spec, steps=80)
        fisher = estimate_fisher(snap.params, source.train, 50, config)
        params, log = finetune(snap, fisher, target, source, spec, config)
        write_runlog(log, tmp_path / f"log{k}.csv")
        save_checkpoint(params, target.name, 140, tmp_path / f"ckpt{k}.json", config)
        blobs.append(((tmp_path / f"log{k}.csv").read_bytes(), (tmp_path / f"ckpt{k}.json").read_bytes()))
    identical = blobs[0] == blobs[1]
    loaded, tag, step = load_checkpoint(tmp_path / "ckpt0.json")
    round_trip = loaded.bitwise_equal(params) and (tag, step) == (target.name, 140)
    sched = LambdaSchedule("linear_decay", 0.7, 500, 0.05)
    endpoints = (
        lambda_at(sched, 0) == 0.7
        and lambda_at(sched, 500) == 0.05
        and lambda_at(sched, 250) == max(0.05, 0.7 * (1 - 250 / 500))
        and lambda_at(LambdaSchedule("static", 0.3), 12345) == 0.3
    )
    ok = identical and round_trip and endpoints
    assert report("9 reproducibility", ok,
                  f"byte-identical log+checkpoint {identical}, bitwise round-trip {round_trip}, schedule endpoints {endpoints}"), (identical, round_trip, endpoints)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
