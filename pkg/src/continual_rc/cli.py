"""Command-line driver: ``continual-rc <command> --config cfg.yaml``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .continual import METHODS, FISHER_METHODS, continual_run, finetune, smooth_series
from .continual import _pretrain_logged
from .metrics import evaluate_dataset
from .params import ModelSnapshot
from .penalties import PenaltyWeights, estimate_fisher, mean_fisher_per_variable, normalize_fisher
from .persistence import CheckpointError, load_checkpoint_full, save_checkpoint, write_runlog
from .tasks import generate_domain, write_examples

logger = logging.getLogger("continual_rc")


class LockError(RuntimeError):
    pass


@contextlib.contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _write_metadata(out: Path, command: str, cfg: ExperimentConfig) -> None:
    meta = {
        "command": command,
        "version": __version__,
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "method": cfg.spec.method,
        "seed": cfg.spec.seed,
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")


def _apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    spec = cfg.spec
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.method is not None:
        changes["method"] = args.method
    lambdas = {k: getattr(args, k) for k in ("lambda_l2", "lambda_cd", "lambda_ewc", "lambda_ewcn")}
    if any(v is not None for v in lambdas.values()):
        current = dataclasses.asdict(spec.weights)
        current.update({k: v for k, v in lambdas.items() if v is not None})
        changes["weights"] = PenaltyWeights(**current)
    if changes:
        spec = spec.replace(**changes)
    out = Path(args.out) if args.out else cfg.output_dir
    return dataclasses.replace(cfg, spec=spec, output_dir=out)


def _datasets(cfg: ExperimentConfig):
    return [generate_domain(d) for d in cfg.domains]


def _source_snapshot(cfg: ExperimentConfig, datasets, checkpoint: str | None) -> ModelSnapshot:
    if checkpoint:
        params, tag, step, reader = load_checkpoint_full(checkpoint)
        if reader is not None and reader != cfg.reader:
            raise ConfigError(f"{checkpoint}: reader config differs from the experiment config")
        return ModelSnapshot(params, tag, step)
    snapshot, _ = _pretrain_logged(cfg.reader, datasets[0], cfg.spec, cfg.pretrain_steps)
    return snapshot


def cmd_generate(cfg, args) -> None:
    for ds in _datasets(cfg):
        folder = cfg.output_dir / "data" / ds.name
        folder.mkdir(parents=True, exist_ok=True)
        for split, examples in ds.splits().items():
            write_examples(examples, folder / f"{split}.tsv")
        print(f"{ds.name}: train={len(ds.train)} dev={len(ds.dev)} test={len(ds.test)}")


def cmd_pretrain(cfg, args) -> None:
    datasets = _datasets(cfg)
    snapshot, log = _pretrain_logged(cfg.reader, datasets[0], cfg.spec, cfg.pretrain_steps)
    save_checkpoint(snapshot.params, snapshot.tag, snapshot.step, cfg.output_dir / "pretrain.ckpt.json", cfg.reader)
    write_runlog(log, cfg.output_dir / "pretrain.csv")
    f1, em = evaluate_dataset(snapshot.params, datasets[0].dev, cfg.spec.max_span_len)
    print(f"pretrained on {snapshot.tag}: dev F1={f1:.4f} EM={em:.4f}")


def _need_two(datasets) -> None:
    if len(datasets) < 2:
        raise ConfigError("this command needs at least two domains (source and target)")


def cmd_finetune(cfg, args) -> None:
    datasets = _datasets(cfg)
    _need_two(datasets)
    source, target = datasets[0], datasets[1]
    snapshot = _source_snapshot(cfg, datasets, args.checkpoint)
    fisher = None
    if cfg.spec.method in FISHER_METHODS:
        n = min(cfg.spec.fisher_samples, len(source.train))
        fisher = estimate_fisher(snapshot.params, source.train, n, cfg.reader)
    runs = [(cfg.spec.method, cfg.spec.weights)]
    if cfg.sweep:
        runs = [(cfg.spec.method, w) for w in cfg.sweep]
    summary = []
    for k, (method, weights) in enumerate(runs):
        spec = cfg.spec.replace(weights=weights)
        params, log = finetune(snapshot, fisher, target, source, spec, cfg.reader)
        stem = f"finetune_{method}" + (f"_{k}" if cfg.sweep else "")
        write_runlog(log, cfg.output_dir / f"{stem}.csv")
        save_checkpoint(params, target.name, snapshot.step + spec.steps, cfg.output_dir / f"{stem}.ckpt.json", cfg.reader)
        test_f1, _ = evaluate_dataset(params, target.test, spec.max_span_len)
        summary.append([stem, *dataclasses.astuple(weights), log.initial_source_f1, log.final_source_f1, log.final_target_f1, test_f1])
        print(f"{stem}: source {log.initial_source_f1:.4f} -> {log.final_source_f1:.4f}, target dev {log.final_target_f1:.4f}, target test {test_f1:.4f}")
    with open(cfg.output_dir / "finetune_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "lambda_l2", "lambda_cd", "lambda_ewc", "lambda_ewcn", "source_before", "source_after", "target_dev", "target_test"])
        for row in summary:
            w.writerow([row[0]] + [format(x, ".17g") for x in row[1:]])


def cmd_continual(cfg, args) -> None:
    datasets = _datasets(cfg)
    _need_two(datasets)
    logs = continual_run(cfg.reader, datasets, cfg.spec, pretrain_steps=cfg.pretrain_steps)
    rows = []
    for k, log in enumerate(logs):
        write_runlog(log, cfg.output_dir / f"continual_{k}_{log.target}.csv")
        for r in log.records:
            for name, f1 in (r.seen_f1 or {}).items():
                rows.append((log.step_offset + r.step, log.target, name, f1))
    with open(cfg.output_dir / "continual_eval.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["global_step", "training_domain", "eval_domain", "dev_f1"])
        for step, training, name, f1 in rows:
            w.writerow([step, training, name, format(f1, ".17g")])
    save_checkpoint(logs[-1].final_params, logs[-1].target, logs[-1].step_offset + cfg.spec.steps,
                    cfg.output_dir / "continual_final.ckpt.json", cfg.reader)
    first = datasets[0].name
    final = [f1 for _, _, name, f1 in rows if name == first]
    print(f"continual ({cfg.spec.method}): final {first} dev F1 = {final[-1]:.4f}")


def cmd_fisher(cfg, args) -> None:
    datasets = _datasets(cfg)
    snapshot = _source_snapshot(cfg, datasets, args.checkpoint)
    source = datasets[0]
    n = min(cfg.spec.fisher_samples, len(source.train))
    fisher = estimate_fisher(snapshot.params, source.train, n, cfg.reader)
    raw = mean_fisher_per_variable(fisher)
    norm = dict(mean_fisher_per_variable(normalize_fisher(fisher)))
    with open(cfg.output_dir / "fisher_means.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", "mean_fisher", "mean_normalized_fisher"])
        for name, mean in raw:
            w.writerow([name, format(mean, ".17g"), format(norm[name], ".17g")])
            print(f"{name:16s} {mean:.6g} {norm[name]:.6g}")


def cmd_eval(cfg, args) -> None:
    datasets = _datasets(cfg)
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    params, tag, step, _ = load_checkpoint_full(args.checkpoint)
    with open(cfg.output_dir / "eval.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "split", "f1", "exact_match"])
        for ds in datasets:
            for split in ("dev", "test"):
                f1, em = evaluate_dataset(params, getattr(ds, split), cfg.spec.max_span_len)
                w.writerow([ds.name, split, format(f1, ".17g"), format(em, ".17g")])
                print(f"{ds.name}/{split}: F1={f1:.4f} EM={em:.4f}")


def cmd_diagnose(cfg, args) -> None:
    datasets = _datasets(cfg)
    _need_two(datasets)
    if not cfg.spec.diagnostics:
        raise ConfigError("diagnose needs finetune.diagnostics_memory_size > 0")
    source, target = datasets[0], datasets[1]
    snapshot = _source_snapshot(cfg, datasets, args.checkpoint)
    fisher = None
    if cfg.spec.method in FISHER_METHODS:
        fisher = estimate_fisher(snapshot.params, source.train, min(cfg.spec.fisher_samples, len(source.train)), cfg.reader)
    _, log = finetune(snapshot, fisher, target, source, cfg.spec, cfg.reader)
    write_runlog(log, cfg.output_dir / f"diagnose_{cfg.spec.method}.csv")
    smoothed = smooth_series(log.grad_cos_values(), cfg.spec.smoothing_window)
    with open(cfg.output_dir / f"grad_cos_{cfg.spec.method}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "end_step", "mean_grad_cos"])
        for i, v in enumerate(smoothed):
            w.writerow([i, (i + 1) * cfg.spec.smoothing_window, format(v, ".17g")])
    print(f"{len(smoothed)} smoothed gradient-cosine values written")


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "continual": cmd_continual,
    "fisher": cmd_fisher,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="continual-rc", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override finetune.seed")
        p.add_argument("--method", choices=METHODS, help="override finetune.method")
        p.add_argument("--out", help="override output_dir")
        p.add_argument("--checkpoint", help="start from this checkpoint instead of pre-training")
        for lam in ("l2", "cd", "ewc", "ewcn"):
            p.add_argument(f"--lambda-{lam}", dest=f"lambda_{lam}", type=float, help=f"override lambda_{lam}")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        with output_lock(cfg.output_dir):
            _write_metadata(cfg.output_dir, args.command, cfg)
            COMMANDS[args.command](cfg, args)
    except (ConfigError, CheckpointError, LockError, ValueError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"continual-rc {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
