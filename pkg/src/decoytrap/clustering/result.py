from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np


METHODS = ("AP", "MeanShift", "GMM", "OPTICS")


@dataclass
class ClusterResult:
    """Hard partition of a dataset plus one representative row per cluster.

    ``exemplars[c]`` is the dataset index representing cluster ``c`` and
    ``labels[exemplars[c]] == c`` always holds.
    """

    labels: np.ndarray
    exemplars: np.ndarray
    method: str
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def n_clusters(self) -> int:
        return len(self.exemplars)

    def validate(self) -> None:
        m = len(self.labels)
        k = len(self.exemplars)
        if not 1 <= k <= m:
            raise ValueError(f"cluster count {k} outside [1, {m}]")
        if len(set(self.exemplars.tolist())) != k:
            raise ValueError("exemplar indices are not distinct")
        if self.labels.min() < 0 or self.labels.max() >= k:
            raise ValueError("label outside [0, K)")
        if not np.array_equal(self.labels[self.exemplars], np.arange(k)):
            raise ValueError("an exemplar is not a member of its own cluster")

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "labels": [int(v) for v in self.labels],
            "exemplars": [int(v) for v in self.exemplars],
            "diagnostics": {k: _jsonable(v) for k, v in self.diagnostics.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, float) and not np.isfinite(value):
        return str(value)
    return value


def relabel(assign: np.ndarray, exemplars: list[int] | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map an exemplar-index assignment onto contiguous labels.

    ``assign[i]`` is the dataset index of the exemplar serving point ``i``.
    Clusters are numbered in ascending exemplar index.
    """
    ex = np.array(sorted(set(int(e) for e in exemplars)), dtype=np.intp)
    lookup = {int(e): c for c, e in enumerate(ex)}
    labels = np.array([lookup[int(a)] for a in assign], dtype=np.intp)
    return labels, ex
