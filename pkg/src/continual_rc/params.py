"""Named parameter containers shared by the reader, penalties and GEM."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when two parameter sets do not share names, order and shapes."""


class NamedParams(Mapping[str, np.ndarray]):
    """Ordered mapping of variable name -> float64 array.

    Arrays are copied on construction and marked read-only, so an instance can
    be shared freely. Training code builds a new instance per update.
    """

    __slots__ = ("_vars", "_struct")

    def __init__(self, variables: Mapping[str, np.ndarray] | Sequence[tuple[str, np.ndarray]]):
        items = variables.items() if isinstance(variables, Mapping) else variables
        store: dict[str, np.ndarray] = {}
        for name, values in items:
            if name in store:
                raise ValueError(f"duplicate variable name {name!r}")
            arr = np.array(values, dtype=np.float64, copy=True)
            if arr.ndim == 0 or any(s < 1 for s in arr.shape):
                raise ValueError(f"variable {name!r} needs a nonempty shape, got {arr.shape}")
            arr.setflags(write=False)
            store[name] = arr
        if not store:
            raise ValueError("NamedParams needs at least one variable")
        self._vars = store
        self._struct = None

    @classmethod
    def _adopt(cls, items: Sequence[tuple[str, np.ndarray]]) -> "NamedParams":
        """Wrap freshly computed float64 arrays without copying; callers hand over ownership."""
        if cls.__init__ is not NamedParams.__init__:
            return cls(items)
        store = {}
        for name, arr in items:
            arr.setflags(write=False)
            store[name] = arr
        out = object.__new__(cls)
        out._vars = store
        out._struct = None
        return out

    def __getitem__(self, name: str) -> np.ndarray:
        return self._vars[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._vars)

    def __len__(self) -> int:
        return len(self._vars)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._vars.items())
        return f"{type(self).__name__}({inner})"

    @property
    def names(self) -> list[str]:
        return list(self._vars)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [v.shape for v in self._vars.values()]

    @property
    def size(self) -> int:
        return sum(v.size for v in self._vars.values())

    def structure(self) -> list[tuple[str, tuple[int, ...]]]:
        return list(self._structure_key())

    def _structure_key(self) -> tuple:
        if self._struct is None:
            self._struct = tuple((k, v.shape) for k, v in self._vars.items())
        return self._struct

    def same_structure(self, other: Mapping[str, np.ndarray]) -> bool:
        if list(self._vars) != list(other):
            return False
        return all(self._vars[k].shape == np.shape(other[k]) for k in self._vars)

    def flat(self) -> np.ndarray:
        """All values concatenated in variable order."""
        return np.concatenate([v.ravel() for v in self._vars.values()])

    def unflatten(self, flat: np.ndarray) -> "NamedParams":
        """Inverse of :meth:`flat` using this instance's structure."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeError(f"expected flat vector of length {self.size}, got {flat.shape}")
        # one copy of the whole vector; the per-variable views share it
        flat = flat.copy()
        store, offset = {}, 0
        for name, v in self._vars.items():
            store[name] = flat[offset:offset + v.size].reshape(v.shape)
            offset += v.size
        out = type(self)._adopt(list(store.items()))
        out._struct = self._struct
        return out

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "NamedParams":
        return type(self)([(k, fn(v)) for k, v in self._vars.items()])

    def zeros_like(self) -> "NamedParams":
        return self.map(np.zeros_like)

    def replace(self, **updates: np.ndarray) -> "NamedParams":
        for k in updates:
            if k not in self._vars:
                raise KeyError(k)
        return type(self)([(k, updates.get(k, v)) for k, v in self._vars.items()])

    def bitwise_equal(self, other: "NamedParams") -> bool:
        if not self.same_structure(other):
            return False
        return all(
            np.array_equal(self._vars[k].view(np.uint64), np.asarray(other[k]).view(np.uint64))
            for k in self._vars
        )


class GradientSet(NamedParams):
    """Gradient with the same structure as the parameters it was computed for."""

    __slots__ = ()


def _key(x: Mapping[str, np.ndarray]) -> tuple:
    if isinstance(x, NamedParams):
        return x._structure_key()
    return tuple((k, np.shape(x[k])) for k in x)


def check_structure(*sets: Mapping[str, np.ndarray]) -> None:
    ref = _key(sets[0])
    for other in sets[1:]:
        got = _key(other)
        if got != ref:
            raise ShapeError(f"structure mismatch: {list(ref)} vs {list(got)}")


def combine(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], scale: float = 1.0) -> GradientSet:
    """Return ``a + scale * b`` as a GradientSet."""
    check_structure(a, b)
    return GradientSet._adopt([(k, np.asarray(a[k], dtype=np.float64) + scale * np.asarray(b[k], dtype=np.float64)) for k in a])


def step(params: NamedParams, grads: Mapping[str, np.ndarray], lr: float) -> NamedParams:
    """One plain SGD update."""
    check_structure(params, grads)
    return NamedParams._adopt([(k, params[k] - lr * np.asarray(grads[k], dtype=np.float64)) for k in params])


@dataclass(frozen=True)
class ModelSnapshot:
    params: NamedParams
    tag: str
    step: int = 0

    def __post_init__(self) -> None:
        if self.step < 0:
            raise ValueError("snapshot step must be nonnegative")
