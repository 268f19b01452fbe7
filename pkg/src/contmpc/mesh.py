"""Rectangular parameter meshes and chunked lexicographic iteration."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

MESH_GUARD = 10 ** 9


@dataclass(frozen=True)
class Axis:
    """``count`` equispaced nodes on ``[lower, upper]``, keeping every ``stride``-th."""

    name: str
    lower: float
    upper: float
    count: int
    stride: int = 1

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"axis {self.name}: count must be >= 1")
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)):
            raise ValueError(f"axis {self.name}: bounds must be finite")
        if self.stride < 1:
            raise ValueError(f"axis {self.name}: stride must be >= 1")

    def values(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.count)[:: self.stride]

    def __len__(self):
        return len(range(0, self.count, self.stride))


def _group(name: str) -> str:
    return name.rstrip("0123456789")


@dataclass(frozen=True)
class MeshSpec:
    axes: Sequence[Axis]
    guard: int = MESH_GUARD
    _values: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))
        names = [a.name for a in self.axes]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate axis names in {names}")
        if self.total > self.guard:
            raise ValueError(f"mesh has {self.total} points, above the guard {self.guard}")
        object.__setattr__(self, "_values", {a.name: a.values() for a in self.axes})

    @property
    def total(self) -> int:
        return int(np.prod([len(a) for a in self.axes], dtype=object)) if self.axes else 0

    @property
    def names(self):
        return [a.name for a in self.axes]

    def names_in(self, group: str):
        """Axis names of a group, e.g. ``"x"`` gives ``x1..xn`` in order."""
        return [a.name for a in self.axes if _group(a.name) == group]

    def values(self, name):
        return self._values[name]

    def count(self, names: Sequence[str]) -> int:
        return int(np.prod([len(self._values[n]) for n in names], dtype=np.int64))

    def subsample(self, stride) -> "MeshSpec":
        """Coarser mesh whose nodes are a subset of this one's.

        ``stride`` is an int for every axis or a dict keyed by axis name or
        group (``"x"``, ``"t"``, ``"U"``...).
        """
        axes = []
        for a in self.axes:
            if isinstance(stride, dict):
                k = stride.get(a.name, stride.get(_group(a.name), 1))
            else:
                k = stride
            axes.append(Axis(a.name, a.lower, a.upper, a.count, a.stride * k))
        return MeshSpec(axes, guard=self.guard)

    def product(self, names: Sequence[str], start=0, stop=None) -> np.ndarray:
        """Rows ``start:stop`` of the lexicographic product of ``names`` (last fastest)."""
        shape = tuple(len(self._values[n]) for n in names)
        total = int(np.prod(shape, dtype=np.int64))
        stop = total if stop is None else min(stop, total)
        idx = np.unravel_index(np.arange(start, stop), shape)
        if not names:
            return np.zeros((max(stop - start, 0), 0))
        return np.stack([self._values[n][i] for n, i in zip(names, idx)], axis=-1)

    def chunks(self, names: Sequence[str], size: int) -> Iterator[np.ndarray]:
        total = self.count(names)
        for start in range(0, total, size):
            yield self.product(names, start, start + size)

    def to_dict(self):
        return {"axes": [{"name": a.name, "lower": a.lower, "upper": a.upper,
                          "count": a.count, "stride": a.stride} for a in self.axes]}

    @classmethod
    def from_dict(cls, d):
        return cls([Axis(a["name"], float(a["lower"]), float(a["upper"]), int(a["count"]),
                         int(a.get("stride", 1))) for a in d["axes"]])
