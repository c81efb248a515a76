"""Checkpoints with bit-exact hex-float arrays, and run-log CSV export."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .continual import RunLog, StepRecord
from .params import NamedParams
from .reader import ReaderConfig

FORMAT_VERSION = 1
RUNLOG_HEADER = ("step", "ce_loss", "penalty_value", "lambda", "source_f1", "target_f1", "grad_cos")


class CheckpointError(ValueError):
    pass


class VersionError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


def _digest(variables: list[dict]) -> str:
    h = hashlib.sha256()
    for var in variables:
        h.update(var["name"].encode())
        h.update(repr(var["shape"]).encode())
        for v in var["values"]:
            h.update(v.encode())
            h.update(b",")
    return h.hexdigest()


def save_checkpoint(
    params: NamedParams,
    tag: str,
    step: int,
    path: str | Path,
    reader: ReaderConfig | None = None,
) -> None:
    variables = [
        {"name": name, "shape": list(arr.shape), "values": [float(x).hex() for x in arr.ravel()]}
        for name, arr in params.items()
    ]
    doc = {
        "format_version": FORMAT_VERSION,
        "tag": tag,
        "step": int(step),
        "reader": asdict(reader) if reader is not None else None,
        "variables": variables,
        "sha256": _digest(variables),
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[NamedParams, str, int]:
    params, tag, step, _ = load_checkpoint_full(path)
    return params, tag, step


def load_checkpoint_full(path: str | Path) -> tuple[NamedParams, str, int, ReaderConfig | None]:
    """Like :func:`load_checkpoint` but also returns the stored reader config."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{path}: not a readable checkpoint ({exc})") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise IntegrityError(f"{path}: missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise VersionError(f"{path}: format_version {doc['format_version']!r}, expected {FORMAT_VERSION}")
    try:
        tag, step, variables = doc["tag"], doc["step"], doc["variables"]
        if not isinstance(tag, str) or not isinstance(step, int) or not isinstance(variables, list):
            raise TypeError("bad header field types")
        if doc.get("sha256") != _digest(variables):
            raise IntegrityError(f"{path}: checksum mismatch")
        items = []
        for var in variables:
            shape = tuple(int(s) for s in var["shape"])
            values = [float.fromhex(v) for v in var["values"]]
            if len(values) != math.prod(shape):
                raise IntegrityError(f"{path}: variable {var['name']!r} has {len(values)} values for shape {shape}")
            items.append((var["name"], np.array(values, dtype=np.float64).reshape(shape)))
        params = NamedParams(items)
        reader = ReaderConfig(**doc["reader"]) if doc.get("reader") else None
    except IntegrityError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise IntegrityError(f"{path}: corrupted checkpoint ({exc})") from None
    return params, tag, step, reader


def _fmt(x: float | None) -> str:
    return "" if x is None else format(float(x), ".17g")


def write_runlog(log: RunLog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RUNLOG_HEADER)
        for r in log.records:
            writer.writerow([
                r.step,
                _fmt(r.ce_loss),
                _fmt(r.penalty_value),
                _fmt(r.lambda_value),
                _fmt(r.source_eval_f1),
                _fmt(r.target_eval_f1),
                _fmt(r.grad_cos),
            ])


def read_runlog(path: str | Path, method: str = "unknown") -> RunLog:
    def opt(s: str) -> float | None:
        return None if s == "" else float(s)

    log = RunLog(method=method)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != RUNLOG_HEADER:
            raise ValueError(f"unexpected run-log header {header}")
        for row in reader:
            log.append(StepRecord(
                step=int(row[0]),
                ce_loss=float(row[1]),
                penalty_value=float(row[2]),
                lambda_value=float(row[3]),
                source_eval_f1=opt(row[4]),
                target_eval_f1=opt(row[5]),
                grad_cos=opt(row[6]),
            ))
    return log
