"""In-memory columnar dataset shared by every model family."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class ClusterBlock:
    """Clusters of one common size ``l``; ``rows`` is a (g, l) index array."""

    size: int
    clusters: np.ndarray
    rows: np.ndarray


@dataclass(frozen=True, eq=False)
class Dataset:
    """Design matrix plus the role columns a model may need.

    Units of independence are clusters when ``cluster`` is present and rows
    otherwise.  Everything is stored as numpy arrays and treated as immutable.
    """

    X: np.ndarray
    y: Optional[np.ndarray] = None
    cluster: Optional[np.ndarray] = None
    time: Optional[np.ndarray] = None
    status: Optional[np.ndarray] = None
    group: Optional[np.ndarray] = None
    names: tuple = field(default=())

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        object.__setattr__(self, "X", X)
        for attr, dtype in (("y", float), ("time", float), ("status", np.int64),
                            ("cluster", None), ("group", None)):
            value = getattr(self, attr)
            if value is not None:
                value = np.asarray(value) if dtype is None else np.asarray(value, dtype=dtype)
                if value.shape[0] != X.shape[0]:
                    raise ValueError(f"column {attr!r} has {value.shape[0]} rows, X has {X.shape[0]}")
                object.__setattr__(self, attr, value)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{j}" for j in range(X.shape[1])))
        elif len(self.names) != X.shape[1]:
            raise ValueError("names must match the number of design columns")
        else:
            object.__setattr__(self, "names", tuple(self.names))

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @cached_property
    def unit_labels(self) -> np.ndarray:
        """Sorted distinct cluster ids, or row positions when unclustered."""
        if self.cluster is None:
            return np.arange(self.n_rows)
        return np.unique(self.cluster)

    @cached_property
    def _unit_index(self) -> np.ndarray:
        if self.cluster is None:
            return np.arange(self.n_rows)
        return np.unique(self.cluster, return_inverse=True)[1].ravel()

    @property
    def n_units(self) -> int:
        return len(self.unit_labels)

    @cached_property
    def cluster_blocks(self) -> list[ClusterBlock]:
        """Rows grouped by cluster, batched by cluster size for vectorized GEE."""
        if self.cluster is None:
            raise ValueError("dataset has no cluster column")
        idx = self._unit_index
        order = np.argsort(idx, kind="stable")
        counts = np.bincount(idx, minlength=self.n_units)
        starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
        blocks = []
        for size in np.unique(counts):
            cl = np.flatnonzero(counts == size)
            rows = order[starts[cl][:, None] + np.arange(size)[None, :]]
            blocks.append(ClusterBlock(int(size), cl, rows))
        return blocks

    def take_units(self, units: Sequence[int]) -> "Dataset":
        """Subset by unit position (index into ``unit_labels``), keeping row order."""
        units = np.asarray(units, dtype=np.int64)
        mask = np.zeros(self.n_units, dtype=bool)
        mask[units] = True
        rows = np.flatnonzero(mask[self._unit_index])
        return self.take_rows(rows)

    def take_rows(self, rows) -> "Dataset":
        def sub(a):
            return None if a is None else a[rows]

        return Dataset(self.X[rows], sub(self.y), sub(self.cluster), sub(self.time),
                       sub(self.status), sub(self.group), self.names)

    def units_of(self, mask_rows: np.ndarray) -> np.ndarray:
        """Unit positions touched by a boolean row mask."""
        return np.unique(self._unit_index[mask_rows])

    def row_units(self) -> np.ndarray:
        return self._unit_index
