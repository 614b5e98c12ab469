"""FP / AP / Forget over an accuracy matrix.

``a[q, m]`` is the accuracy on task ``q`` (stream position) after training
finished on task ``m``. Accuracies are stored on [0, 1] and presented on a
0-100 scale.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class IncompleteMatrixError(ValueError):
    pass


@dataclass
class AccuracyMatrix:
    a: np.ndarray  # (N, N), NaN where not evaluated

    @classmethod
    def empty(cls, n: int) -> "AccuracyMatrix":
        return cls(np.full((n, n), np.nan))

    @property
    def n(self) -> int:
        return self.a.shape[0]

    def percent(self) -> np.ndarray:
        return 100.0 * self.a

    def to_list(self) -> list[list[float | None]]:
        return [[None if np.isnan(v) else round(float(100.0 * v), 6) for v in row] for row in self.a]


def _as_array(matrix) -> np.ndarray:
    a = matrix.a if isinstance(matrix, AccuracyMatrix) else np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"accuracy matrix must be square, got {a.shape}")
    return a


def fp(matrix) -> float:
    """Mean over tasks of the accuracy after the final task."""
    a = _as_array(matrix)
    last = a[:, -1]
    if np.isnan(last).any():
        raise IncompleteMatrixError("final column has missing entries")
    return float(last.mean())


def ap(matrix) -> float:
    """Mean over tasks of the accuracy right after learning that task."""
    a = _as_array(matrix)
    diag = np.diag(a)
    if np.isnan(diag).any():
        raise IncompleteMatrixError("diagonal has missing entries")
    return float(diag.mean())


def forget(matrix) -> float:
    return ap(matrix) - fp(matrix)


def summary(matrix, scale: float = 100.0) -> dict[str, float]:
    f, p = fp(matrix), ap(matrix)
    return {"fp": scale * f, "ap": scale * p, "forget": scale * p - scale * f}


def metrics_record(matrix, method: str, order: list[int], seed: int, **extra) -> dict:
    a = matrix if isinstance(matrix, AccuracyMatrix) else AccuracyMatrix(_as_array(matrix))
    rec = {"method": method, "order": [int(i) for i in order], "seed": int(seed), "matrix": a.to_list()}
    rec.update(summary(a))
    rec.update(extra)
    return rec


def write_json(record: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


CSV_FIELDS = ("method", "order", "seed", "fp", "ap", "forget")


def write_csv(records: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([
                r["method"], "-".join(str(i) for i in r["order"]), r["seed"],
                f"{r['fp']:.4f}", f"{r['ap']:.4f}", f"{r['forget']:.4f}",
            ])
    return path
