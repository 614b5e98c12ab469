"""Task-boundary mechanics: expansion with freezing, orthogonality, restoration."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .numerics import Tape, Var, frobenius_sq, matmul
from .weighting import ComponentBank

log = logging.getLogger(__name__)


def orthogonal_init(n: int, d: int, gen: np.random.Generator, against: np.ndarray | None = None) -> np.ndarray:
    """``n`` orthonormal rows of length ``d`` from a seeded Gaussian draw.

    With ``against`` (rows), the draw is first projected onto the orthogonal
    complement of their span, provided there is room for ``n`` more
    directions; otherwise the projection is skipped.
    """
    if n > d:
        raise ValueError(f"cannot place {n} orthonormal rows in dimension {d}")
    G = gen.standard_normal((n, d))
    if against is not None and len(against):
        basis = _row_basis(against)
        if basis.shape[1] + n <= d:
            G = G - (G @ basis) @ basis.T
        else:
            log.info("no room to orthogonalize %d new rows against %d old ones in dim %d",
                     n, basis.shape[1], d)
    Q, R = np.linalg.qr(G.T)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return (Q * signs).T


def _row_basis(rows: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (columns) for the span of ``rows``."""
    U, s, _ = np.linalg.svd(rows.T, full_matrices=False)
    return U[:, s > tol * max(1.0, s[0] if s.size else 0.0)]


def ortho_loss(B) -> float:
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2 or B.shape[0] == 0:
        return 0.0
    return frobenius_sq(matmul(B, B.T) - np.eye(B.shape[0]))


def ortho_loss_tape(B: Var) -> Var:
    G = B @ B.T - np.eye(B.shape[0])
    return (G * G).sum()


def expand_for_task(bank: ComponentBank, t: int, per_task: int, gen: np.random.Generator) -> ComponentBank:
    """Freeze every existing component and append ``per_task`` fresh ones.

    New keys, attention vectors and (flattened) weight slices are orthonormal
    among themselves and orthogonal to the frozen ones whenever the dimension
    allows.
    """
    if t < 1:
        raise ValueError(f"task index starts at 1, got {t}")
    expected_old = (t - 1) * per_task
    if bank.M != expected_old:
        raise ValueError(f"bank holds {bank.M} components, expected {expected_old} before task {t}")
    M, L, d = bank.W.shape
    old_w = bank.W.reshape(M, L * d)
    new_w = orthogonal_init(per_task, L * d, gen, against=old_w).reshape(per_task, L, d)
    new_k = orthogonal_init(per_task, bank.d_q, gen, against=bank.K.T)
    new_a = orthogonal_init(per_task, bank.d_q, gen, against=bank.A.T)
    return ComponentBank(
        W=np.concatenate([bank.W, new_w]),
        K=np.concatenate([bank.K, new_k.T], axis=1),
        A=np.concatenate([bank.A, new_a.T], axis=1),
        frozen=np.concatenate([np.ones(M, dtype=bool), np.zeros(per_task, dtype=bool)]),
    )


@dataclass(frozen=True)
class RestorationPolicy:
    p: float = 0.01
    interval: int = 200

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"restoration probability must be in [0, 1], got {self.p}")
        if self.interval < 1:
            raise ValueError(f"restoration interval must be >= 1, got {self.interval}")

    def due(self, step: int) -> bool:
        return step > 0 and step % self.interval == 0


class SourceSnapshot(dict):
    """Read-only copies of restoration targets, taken at task start."""

    def __init__(self, values: Mapping[str, np.ndarray]):
        super().__init__()
        for k, v in values.items():
            v = np.array(v, dtype=np.float64)
            v.setflags(write=False)
            dict.__setitem__(self, k, v)

    def __setitem__(self, key, value):
        raise TypeError("SourceSnapshot is immutable")


def apply_restoration(
    params: Mapping[str, np.ndarray],
    snapshot: SourceSnapshot,
    policy: RestorationPolicy,
    gen: np.random.Generator,
    eligible: Mapping[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], int]:
    """Reset each element to its snapshot value with probability ``policy.p``.

    Only names present in ``snapshot`` are touched. ``eligible`` optionally
    gives a boolean mask per name (broadcastable) limiting which elements may
    be reset. Returns the updated arrays and the number of restored elements.
    """
    out = dict(params)
    restored = 0
    for name in sorted(snapshot):
        cur = np.asarray(params[name])
        if cur.shape != snapshot[name].shape:
            raise ValueError(f"{name}: snapshot shape {snapshot[name].shape} != {cur.shape}")
        mask = gen.random(cur.shape) < policy.p
        if eligible is not None and name in eligible:
            mask &= np.broadcast_to(eligible[name], cur.shape)
        out[name] = np.where(mask, snapshot[name], cur)
        restored += int(mask.sum())
    return out, restored
