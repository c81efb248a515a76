"""Auxiliary penalties that keep fine-tuned parameters close to a source model.

All penalties return ``(value, grad)`` with the gradient taken with respect
to the current parameters; the source parameters are constants.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .params import GradientSet, NamedParams, check_structure
from .reader import Example, ReaderConfig, forward_backward

COSINE_EPS = 1e-12


class FisherDiag(NamedParams):
    """Per-parameter nonnegative importance weights."""

    __slots__ = ()

    def __init__(self, variables):
        super().__init__(variables)
        for name, arr in self.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"Fisher entries for {name!r} must be finite")
            if np.any(arr < 0):
                raise ValueError(f"Fisher entries for {name!r} must be nonnegative")


class PenaltyKind(str, enum.Enum):
    NONE = "none"
    L2 = "l2"
    CD = "cd"
    EWC = "ewc"
    EWCN = "ewcn"
    ALL = "all"


@dataclass(frozen=True)
class PenaltyWeights:
    lambda_l2: float = 0.0
    lambda_cd: float = 0.0
    lambda_ewc: float = 0.0
    lambda_ewcn: float = 0.0

    def __post_init__(self) -> None:
        for name in ("lambda_l2", "lambda_cd", "lambda_ewc", "lambda_ewcn"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite nonnegative number, got {value!r}")


@dataclass(frozen=True)
class LambdaSchedule:
    """Multiplier applied to the weighted penalty at each step."""

    kind: str = "static"
    initial: float = 1.0
    total_steps: int = 1
    floor: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("static", "linear_decay"):
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected static or linear_decay")
        if self.initial < 0 or self.floor < 0:
            raise ValueError("schedule values must be nonnegative")
        if self.kind == "linear_decay":
            if self.total_steps < 1:
                raise ValueError("linear_decay needs total_steps >= 1")
            if self.floor > self.initial:
                raise ValueError("floor must not exceed initial")


def lambda_at(schedule: LambdaSchedule, step: int) -> float:
    if schedule.kind == "static":
        return schedule.initial
    return max(schedule.floor, schedule.initial * (1.0 - step / schedule.total_steps))


def l2_penalty(theta: NamedParams, theta_star: NamedParams) -> tuple[float, GradientSet]:
    """Squared Euclidean distance, summed over every parameter."""
    check_structure(theta, theta_star)
    value = 0.0
    grads = []
    for name in theta:
        diff = (theta[name] - theta_star[name]).ravel()
        value += float(diff @ diff)
        grads.append((name, (2.0 * diff).reshape(theta[name].shape)))
    return value, GradientSet._adopt(grads)


def cosine_penalty(theta: NamedParams, theta_star: NamedParams) -> tuple[float, GradientSet]:
    """Mean over variables of ``1 - cos(theta_v, theta*_v)``.

    Variables where either vector has norm below 1e-12 have no direction and
    are skipped; they also drop out of the averaging denominator.
    """
    check_structure(theta, theta_star)
    terms, grads, kept = [], {}, 0
    for name in theta:
        a, b = theta[name].ravel(), theta_star[name].ravel()
        na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
        if na < COSINE_EPS or nb < COSINE_EPS:
            grads[name] = None
            continue
        kept += 1
        cos = float(a @ b) / (na * nb)
        terms.append(1.0 - cos)
        grads[name] = (cos / (na * na)) * a - b / (na * nb)
    if kept == 0:
        return 0.0, GradientSet([(k, np.zeros_like(v)) for k, v in theta.items()])
    value = sum(terms) / kept
    return value, GradientSet._adopt([
        (k, np.zeros_like(v) if grads[k] is None else (grads[k] / kept).reshape(v.shape))
        for k, v in theta.items()
    ])


def ewc_penalty(theta: NamedParams, theta_star: NamedParams, fisher: Mapping[str, np.ndarray]) -> tuple[float, GradientSet]:
    """Fisher-weighted absolute deviation; the subgradient at zero deviation is 0."""
    check_structure(theta, theta_star, fisher)
    value = 0.0
    grads = []
    for name in theta:
        f = np.asarray(fisher[name])
        if not isinstance(fisher, FisherDiag) and np.any(f < 0):
            raise ValueError(f"negative Fisher entry in {name!r}")
        diff = theta[name] - theta_star[name]
        value += float(f.ravel() @ np.abs(diff).ravel())
        grads.append((name, f * np.sign(diff)))
    return value, GradientSet._adopt(grads)


def combined_penalty(
    theta: NamedParams,
    theta_star: NamedParams,
    fisher_norm: Mapping[str, np.ndarray],
    weights: PenaltyWeights,
) -> tuple[float, GradientSet]:
    """L2 + cosine distance + normalised-Fisher EWC, each with its own weight.

    ``weights.lambda_ewc`` is not used here; only the normalised EWC term
    enters the combination. Same value as summing the three penalties, done
    in one pass over the variables.
    """
    check_structure(theta, theta_star, fisher_norm)
    w_l2, w_cd, w_ew = weights.lambda_l2, weights.lambda_cd, weights.lambda_ewcn
    l2_v = ew_v = 0.0
    cd_terms, parts = [], {}
    for name in theta:
        a, b = theta[name].ravel(), theta_star[name].ravel()
        f = np.asarray(fisher_norm[name]).ravel()
        if not isinstance(fisher_norm, FisherDiag) and np.any(f < 0):
            raise ValueError(f"negative Fisher entry in {name!r}")
        diff = a - b
        l2_v += float(diff @ diff)
        ew_v += float(f @ np.abs(diff))
        cd_g = None
        na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
        if na >= COSINE_EPS and nb >= COSINE_EPS:
            cos = float(a @ b) / (na * nb)
            cd_terms.append(1.0 - cos)
            cd_g = (cos / (na * na)) * a - b / (na * nb)
        parts[name] = (diff, f, cd_g)
    kept = len(cd_terms)
    cd_v = sum(cd_terms) / kept if kept else 0.0
    grads = []
    # same operation order as the three separate penalties, so results match bitwise
    for name, v in theta.items():
        diff, f, cd_g = parts[name]
        cd = cd_g / kept if cd_g is not None else np.zeros_like(diff)
        grads.append((name, (w_l2 * (2.0 * diff) + w_cd * cd + w_ew * (f * np.sign(diff))).reshape(v.shape)))
    value = w_l2 * l2_v + w_cd * cd_v + w_ew * ew_v
    return value, GradientSet._adopt(grads)


def method_penalty(
    kind: PenaltyKind | str,
    theta: NamedParams,
    theta_star: NamedParams,
    weights: PenaltyWeights,
    fisher: Mapping[str, np.ndarray] | None = None,
    fisher_norm: Mapping[str, np.ndarray] | None = None,
) -> tuple[float, GradientSet]:
    """Weighted penalty for one fine-tuning variant."""
    kind = PenaltyKind(kind)
    if kind is PenaltyKind.NONE:
        return 0.0, GradientSet([(k, np.zeros_like(v)) for k, v in theta.items()])
    if kind is PenaltyKind.L2:
        v, g = l2_penalty(theta, theta_star)
        lam = weights.lambda_l2
    elif kind is PenaltyKind.CD:
        v, g = cosine_penalty(theta, theta_star)
        lam = weights.lambda_cd
    elif kind is PenaltyKind.EWC:
        if fisher is None:
            raise ValueError("ewc needs a Fisher diagonal")
        v, g = ewc_penalty(theta, theta_star, fisher)
        lam = weights.lambda_ewc
    elif kind is PenaltyKind.EWCN:
        if fisher_norm is None:
            raise ValueError("ewcn needs a normalised Fisher diagonal")
        v, g = ewc_penalty(theta, theta_star, fisher_norm)
        lam = weights.lambda_ewcn
    else:
        if fisher_norm is None:
            raise ValueError("all needs a normalised Fisher diagonal")
        return combined_penalty(theta, theta_star, fisher_norm, weights)
    return lam * v, GradientSet([(k, lam * g[k]) for k in theta])


def estimate_fisher(
    params: NamedParams,
    source_data: Sequence[Example],
    n_samples: int | None = None,
    config: ReaderConfig | None = None,
) -> FisherDiag:
    """Mean squared per-example CE gradient over the first ``n_samples`` examples."""
    if len(source_data) == 0:
        raise ValueError("Fisher estimation needs at least one example")
    n = len(source_data) if n_samples is None else n_samples
    if n < 1 or n > len(source_data):
        raise ValueError(f"n_samples must be in [1, {len(source_data)}], got {n}")
    acc = {k: np.zeros_like(v) for k, v in params.items()}
    for ex in source_data[:n]:
        _, g = forward_backward(params, [ex], config)
        for k in acc:
            acc[k] += g[k] * g[k]
    return FisherDiag([(k, acc[k] / n) for k in params])


def normalize_fisher(fisher: Mapping[str, np.ndarray]) -> FisherDiag:
    """Min-max rescale within each variable; constant variables become 0."""
    out = []
    for name, f in fisher.items():
        f = np.asarray(f, dtype=np.float64)
        lo, hi = float(f.min()), float(f.max())
        if hi > lo:
            out.append((name, (f - lo) / (hi - lo)))
        else:
            out.append((name, np.zeros_like(f)))
    return FisherDiag(out)


def mean_fisher_per_variable(fisher: Mapping[str, np.ndarray]) -> list[tuple[str, float]]:
    return [(name, float(np.mean(f))) for name, f in fisher.items()]
