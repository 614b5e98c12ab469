"""Sequential training over a task stream."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .config import RunConfig
from .lifecycle import RestorationPolicy, SourceSnapshot, apply_restoration, expand_for_task
from .metrics import AccuracyMatrix
from .model import (
    ModelState,
    build_state,
    forward,
    mean_queries,
    predict,
    predict_static,
    trainable_names,
)
from .numerics import backward, grad_check, rng
from .tasks import Task, TaskStream

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e3

ABLATION_ROWS = {
    "E1": dict(high_branch=False, low_branch=False, weighting=False, attention=False, ortho=False, restore=False),
    "E2": dict(high_branch=True, low_branch=False, weighting=False, attention=False, ortho=False, restore=False),
    "E3": dict(high_branch=False, low_branch=True, weighting=False, attention=False, ortho=False, restore=False),
    "E4": dict(high_branch=True, low_branch=True, weighting=False, attention=False, ortho=False, restore=False),
    "E5": dict(high_branch=True, low_branch=True, weighting=False, attention=False, ortho=False, restore=True),
    "E6": dict(high_branch=True, low_branch=True, weighting=True, attention=False, ortho=False, restore=True),
    "E7": dict(high_branch=True, low_branch=True, weighting=True, attention=True, ortho=False, restore=True),
    "E8": dict(high_branch=True, low_branch=True, weighting=True, attention=True, ortho=True, restore=True),
}


class DivergenceError(RuntimeError):
    pass


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             masks: dict[str, np.ndarray | None]) -> dict[str, np.ndarray]:
        """Return updated copies; elements where ``masks`` is True never move."""
        self.t += 1
        out = {}
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(name, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            upd = self.lr * (m / (1 - self.b1**self.t)) / (np.sqrt(v / (1 - self.b2**self.t)) + self.eps)
            mask = masks.get(name)
            if mask is not None:
                upd = np.where(mask, 0.0, upd)
            out[name] = params[name] - upd
        return out


@dataclass
class ReplayBuffer:
    ratio: float
    X: list[np.ndarray] = field(default_factory=list)
    y: list[np.ndarray] = field(default_factory=list)
    tid: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return sum(len(a) for a in self.y)

    def add_task(self, task: Task, seed: int) -> None:
        n = math.ceil(self.ratio * len(task.train))
        if n == 0:
            return
        idx = np.sort(rng(seed, "replay-store", task.task_id).choice(len(task.train), n, replace=False))
        self.X.append(task.train.X[idx])
        self.y.append(task.train.y[idx])
        self.tid.append(np.full(n, task.task_id))

    def sample(self, n: int, gen: np.random.Generator):
        X, y, t = np.concatenate(self.X), np.concatenate(self.y), np.concatenate(self.tid)
        idx = gen.integers(0, len(y), n)
        return X[idx], y[idx], t[idx]

    def extra_per_batch(self, batch_size: int) -> int:
        return math.ceil(self.ratio * batch_size) if len(self) else 0


@dataclass
class StepLog:
    step: int
    task: int
    loss: float
    ortho: float
    restored: int


def total_loss(state: ModelState, cfg: RunConfig, X, y, task_ids, values=None):
    """Task cross-entropy plus ``beta`` times the orthogonality penalty.

    Returns (loss node, cross-entropy value, penalty value).
    """
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty batch")
    if y.min() < 0 or y.max() >= state.n_classes:
        raise ValueError(f"labels must lie in [0, {state.n_classes}), got range [{y.min()}, {y.max()}]")
    fw = forward(state, cfg, np.asarray(X, dtype=np.float64), np.asarray(task_ids), values)
    ce = fw.tape.cross_entropy(fw.logits, y)
    if fw.ortho is None:
        return ce, float(ce.value), 0.0
    return ce + cfg.beta * fw.ortho, float(ce.value), float(fw.ortho.value)


def masked_grads(state: ModelState, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, g in grads.items():
        mask = state.frozen_mask(name)
        out[name] = g if mask is None else np.where(mask, 0.0, g)
    return out


def begin_task(state: ModelState, cfg: RunConfig, position: int) -> None:
    """Expand and freeze component banks for the task at ``position`` (0-based)."""
    if not cfg.flag("weighting"):
        return
    for i, banks in enumerate(state.banks):
        for bk in sorted(banks):
            gen = rng(cfg.seed, "expand", position, i, bk)
            banks[bk] = expand_for_task(banks[bk], position + 1, cfg.per_task, gen)


def restoration_snapshot(state: ModelState, cfg: RunConfig) -> SourceSnapshot:
    arrays = state.named_arrays()
    snap = {}
    for name in trainable_names(state, cfg):
        kind = name.split(".")[-1]
        if kind in ("A1", "A2"):
            snap[name] = np.zeros_like(arrays[name])
        elif kind == "W":
            snap[name] = arrays[name]
    return SourceSnapshot(snap)


def train_task(state: ModelState, task: Task, cfg: RunConfig, position: int,
               buffer: ReplayBuffer | None = None, step0: int = 0,
               log_rows: list[StepLog] | None = None) -> tuple[int, list[float]]:
    """Train on one task in place. Returns (global step, per-epoch mean losses)."""
    names = trainable_names(state, cfg)
    if not names or cfg.epochs == 0:
        return step0, []
    opt = Adam(cfg.lr)
    snapshot = restoration_snapshot(state, cfg) if cfg.flag("restore") else None
    policy = RestorationPolicy(cfg.restore_p, cfg.restore_interval)
    n = len(task.train)
    step = step0
    initial = None
    epoch_means = []
    for epoch in range(cfg.epochs):
        order = rng(cfg.seed, "shuffle", position, epoch).permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            X, y = task.train.X[idx], task.train.y[idx]
            tids = np.full(len(idx), task.task_id)
            if buffer is not None and cfg.uses_replay:
                k = buffer.extra_per_batch(cfg.batch_size)
                if k:
                    rX, ry, rt = buffer.sample(k, rng(cfg.seed, "replay-draw", step))
                    X, y, tids = np.concatenate([X, rX]), np.concatenate([y, ry]), np.concatenate([tids, rt])
            loss, ce, ortho = total_loss(state, cfg, X, y, tids)
            lv = float(loss.value)
            if initial is None:
                initial = max(lv, 1e-12)
            if not math.isfinite(lv) or lv > DIVERGENCE_FACTOR * initial:
                raise DivergenceError(f"task {task.task_id} step {step}: loss {lv!r} (initial {initial:.4g})")
            grads = masked_grads(state, {k: v for k, v in backward(loss).items() if k in names})
            arrays = state.named_arrays()
            masks = {k: state.frozen_mask(k) for k in names}
            for k, v in opt.step({k: arrays[k] for k in names}, grads, masks).items():
                state.set_array(k, v)
            step += 1
            restored = 0
            if snapshot is not None and policy.due(step):
                arrays = state.named_arrays()
                eligible = {k: ~m for k in snapshot if (m := state.frozen_mask(k)) is not None}
                new, restored = apply_restoration({k: arrays[k] for k in snapshot}, snapshot, policy,
                                                  rng(cfg.seed, "restore", step), eligible)
                for k, v in new.items():
                    state.set_array(k, v)
            losses.append(lv)
            if log_rows is not None:
                log_rows.append(StepLog(step, task.task_id, lv, ortho, restored))
        epoch_means.append(float(np.mean(losses)))
    return step, epoch_means


def evaluate(state: ModelState, cfg: RunConfig, task: Task, static: bool = False) -> float:
    X, y = task.test.X, task.test.y
    pred = predict_static(state, cfg, X, task.task_id) if static else predict(state, cfg, X, task.task_id)
    return float(np.mean(pred == y))


@dataclass
class SequenceResult:
    matrix: AccuracyMatrix
    static_matrix: AccuracyMatrix | None
    log: list[StepLog]
    state: ModelState
    step: int = 0


def new_state(stream: TaskStream, cfg: RunConfig) -> ModelState:
    sc = stream.config
    return build_state(sc.d_in, sc.n_tasks, sc.n_classes, cfg)


def train_sequence(stream: TaskStream, cfg: RunConfig,
                   on_task_end: Callable[[int, SequenceResult], None] | None = None,
                   resume: SequenceResult | None = None, start_position: int = 0) -> SequenceResult:
    """Train every task in order, filling a[q, m] after each task m.

    Row ``q`` of the matrix is the ``q``-th task of the stream's order.
    ``resume`` with ``start_position`` continues a run saved by ``on_task_end``.
    """
    if len(stream) < 2:
        raise ValueError("a task stream needs at least 2 tasks")
    N = len(stream)
    if resume is None:
        result = SequenceResult(AccuracyMatrix.empty(N), AccuracyMatrix.empty(N) if cfg.static_eval else None,
                                [], new_state(stream, cfg))
    else:
        result = resume
    state = result.state
    buffer = ReplayBuffer(cfg.replay_ratio) if cfg.uses_replay else None
    if buffer is not None:
        for task in stream.tasks[:start_position]:
            buffer.add_task(task, cfg.seed)
    for m in range(start_position, N):
        task = stream[m]
        begin_task(state, cfg, m)
        result.step, _ = train_task(state, task, cfg, m, buffer, result.step, result.log)
        state.task_queries[task.task_id] = mean_queries(state, task.train.X)
        if buffer is not None:
            buffer.add_task(task, cfg.seed)
        for q, other in enumerate(stream):
            if other.task_id not in state.task_queries:
                state.task_queries[other.task_id] = mean_queries(state, other.train.X)
            result.matrix.a[q, m] = evaluate(state, cfg, other)
            if result.static_matrix is not None:
                result.static_matrix.a[q, m] = evaluate(state, cfg, other, static=True)
        if on_task_end is not None:
            on_task_end(m, result)
    return result


def ablation_grid(stream: TaskStream, base: RunConfig, rows=tuple(ABLATION_ROWS)) -> dict[str, SequenceResult]:
    """One sequence run per ablation row, same seed throughout."""
    base = replace(base, method="data")
    return {row: train_sequence(stream, replace(base, **ABLATION_ROWS[row])) for row in rows}


def gradient_report(state: ModelState, cfg: RunConfig, X, y, task_ids, eps: float = 1e-5,
                    max_entries: int | None = None,
                    perturb: dict[str, float] | None = None) -> dict[str, float | None]:
    """Max relative FD error per trainable array of the full loss.

    Frozen bank entries are not probed; they never receive updates.
    The extra ``ortho`` group checks the penalty on its own; it is None
    (skipped) when the penalty is inactive.
    """
    names = trainable_names(state, cfg)
    base = state.named_arrays()
    params = {k: base[k] for k in names}
    live = {k: ~m for k in names if (m := state.frozen_mask(k)) is not None}

    def loss_fn(values):
        return total_loss(state, cfg, X, y, task_ids, values)[0]

    report: dict[str, float | None] = dict(grad_check(loss_fn, params, eps=eps, names=names,
                                                      max_entries=max_entries, seed=cfg.seed, perturb=perturb,
                                                      entries=live))
    bank_names = [k for k in names if k.count(".") == 2]
    active = cfg.flag("weighting") and cfg.flag("ortho") and cfg.beta > 0 and bank_names
    if not active:
        report["ortho"] = None
        return report

    def ortho_fn(values):
        fw = forward(state, cfg, np.asarray(X, dtype=np.float64), np.asarray(task_ids), values)
        return fw.ortho if fw.ortho is not None else fw.tape.constant(0.0)

    errs = grad_check(ortho_fn, {k: params[k] for k in bank_names}, eps=eps, names=bank_names,
                      max_entries=max_entries, seed=cfg.seed, entries=live,
                      perturb={k[len("ortho:"):]: v for k, v in (perturb or {}).items() if k.startswith("ortho:")})
    report["ortho"] = max(errs.values())
    return report


def gradcheck_setup(stream: TaskStream, cfg: RunConfig, n_tasks: int = 2, batch: int = 8):
    """A small model with ``n_tasks`` expansions (older components frozen)
    and every trainable array randomized, plus a mixed-task batch."""
    state = new_state(stream, cfg)
    for m in range(min(n_tasks, len(stream))):
        begin_task(state, cfg, m)
    g = rng(cfg.seed, "gradcheck-init")
    arrays = state.named_arrays()
    for name in trainable_names(state, cfg):
        if name.endswith((".A1", ".A2")):
            state.set_array(name, 0.1 * g.standard_normal(arrays[name].shape))
    tasks = [stream[m] for m in range(min(n_tasks, len(stream)))]
    X = np.concatenate([t.train.X[:batch] for t in tasks])
    y = np.concatenate([t.train.y[:batch] for t in tasks])
    tids = np.concatenate([np.full(batch, t.task_id) for t in tasks])
    return state, X, y, tids
