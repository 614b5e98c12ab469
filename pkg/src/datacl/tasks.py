"""Synthetic sequential classification tasks with controllable shift.

Each task is a mixture of ``C`` isotropic Gaussians. Class ``c`` of task
``t`` is centred at::

    w * shared[c] + (1 - w) * T_t(specific[c] + domain)

where ``shared`` is identical across tasks, ``domain`` is a class-independent
offset that makes tasks distinguishable from their inputs, and ``T_t`` is the
task transform (``T_0`` is always the identity):

* ``rotation``      rotate every plane of a fixed random basis by ``t * magnitude`` radians
* ``permutation``   permute a fraction ``magnitude`` of the coordinates
* ``cluster-drift`` translate each class by ``t * magnitude`` along its own direction
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import rng

SHIFT_KINDS = ("rotation", "permutation", "cluster-drift")


@dataclass(frozen=True)
class StreamConfig:
    n_tasks: int = 5
    d_in: int = 32
    n_classes: int = 4
    shift: str = "rotation"
    magnitude: float = np.pi / 6
    shared_weight: float = 0.3
    seed: int = 0
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 500
    class_radius: float = 5.0
    domain_radius: float = 3.0
    noise: float = 1.0

    def __post_init__(self):
        if self.n_tasks < 2:
            raise ValueError(f"n_tasks must be >= 2, got {self.n_tasks}")
        if self.shift not in SHIFT_KINDS:
            raise ValueError(f"shift must be one of {SHIFT_KINDS}, got {self.shift!r}")
        if self.magnitude < 0:
            raise ValueError(f"magnitude must be >= 0, got {self.magnitude}")
        if not 0.0 <= self.shared_weight <= 1.0:
            raise ValueError(f"shared_weight must be in [0, 1], got {self.shared_weight}")
        if self.n_classes < 2 or self.n_classes > 2 ** min(self.d_in, 62):
            raise ValueError(f"n_classes={self.n_classes} not separable in d_in={self.d_in}")
        if self.shift == "rotation" and self.d_in % 2:
            raise ValueError("rotation shift needs an even d_in")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < self.n_classes:
                raise ValueError(f"{name} must hold at least one sample per class")


@dataclass
class Split:
    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Task:
    task_id: int
    seed: int
    train: Split
    val: Split
    test: Split
    means: np.ndarray = field(repr=False)


@dataclass
class TaskStream:
    config: StreamConfig
    tasks: list[Task]

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i) -> Task:
        return self.tasks[i]

    @property
    def order(self) -> list[int]:
        return [t.task_id for t in self.tasks]


def _rotation(d: int, angle: float, basis: np.ndarray) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    blocks = np.zeros((d, d))
    for i in range(0, d, 2):
        blocks[i:i + 2, i:i + 2] = [[c, -s], [s, c]]
    return basis @ blocks @ basis.T


def _balanced_labels(n: int, C: int, gen: np.random.Generator) -> np.ndarray:
    return gen.permutation(np.arange(n) % C)


def _draw(means: np.ndarray, n: int, noise: float, gen: np.random.Generator) -> Split:
    y = _balanced_labels(n, means.shape[0], gen)
    X = means[y] + noise * gen.standard_normal((n, means.shape[1]))
    return Split(X, y)


def task_means(cfg: StreamConfig) -> np.ndarray:
    """(n_tasks, C, d_in) class centres."""
    g = rng(cfg.seed, "stream-structure")
    C, d = cfg.n_classes, cfg.d_in

    def unit_rows(n):
        v = g.standard_normal((n, d))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    shared = cfg.class_radius * unit_rows(C)
    specific = cfg.class_radius * unit_rows(C)
    domain = cfg.domain_radius * unit_rows(1)[0]
    basis, _ = np.linalg.qr(g.standard_normal((d, d)))
    drift = unit_rows(C)
    perm_draws = [g.permutation(d) for _ in range(cfg.n_tasks)]

    out = np.empty((cfg.n_tasks, C, d))
    base = specific + domain
    for t in range(cfg.n_tasks):
        if cfg.shift == "rotation":
            moved = base @ _rotation(d, t * cfg.magnitude, basis).T
        elif cfg.shift == "permutation":
            moved = base[:, _partial_permutation(perm_draws[t], cfg.magnitude if t else 0.0)]
        else:
            moved = base + t * cfg.magnitude * drift
        out[t] = cfg.shared_weight * shared + (1.0 - cfg.shared_weight) * moved
    return out


def _partial_permutation(draw: np.ndarray, fraction: float) -> np.ndarray:
    """Cycle the first ``round(fraction * d)`` coordinates of ``draw`` one step."""
    d = len(draw)
    k = int(round(min(fraction, 1.0) * d))
    perm = np.arange(d)
    if k >= 2:
        chosen = draw[:k]
        perm[chosen] = np.roll(chosen, 1)
    return perm


def gen_task_stream(cfg: StreamConfig) -> TaskStream:
    means = task_means(cfg)
    tasks = []
    for t in range(cfg.n_tasks):
        g = rng(cfg.seed, "task", t)
        tasks.append(Task(
            task_id=t,
            seed=cfg.seed,
            train=_draw(means[t], cfg.n_train, cfg.noise, g),
            val=_draw(means[t], cfg.n_val, cfg.noise, g),
            test=_draw(means[t], cfg.n_test, cfg.noise, g),
            means=means[t],
        ))
    return TaskStream(cfg, tasks)


def order_shuffle(stream: TaskStream, order_seed: int | None = None, perm=None) -> TaskStream:
    """Reorder tasks by an explicit ``perm`` or a seeded random one."""
    n = len(stream)
    if perm is None:
        perm = np.arange(n) if order_seed is None else rng(order_seed, "order").permutation(n)
    perm = [int(i) for i in perm]
    if sorted(perm) != list(range(n)):
        raise ValueError(f"not a permutation of {n} tasks: {perm}")
    return replace(stream, tasks=[stream.tasks[i] for i in perm])


def export_csv(stream: TaskStream, path) -> Path:
    path = Path(path)
    d = stream.config.d_in
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"feature_{i}" for i in range(d)] + ["label", "task_id", "split"])
        for task in stream:
            for split_name in ("train", "val", "test"):
                split = getattr(task, split_name)
                for x, y in zip(split.X, split.y):
                    w.writerow([repr(float(v)) for v in x] + [int(y), task.task_id, split_name])
    return path
