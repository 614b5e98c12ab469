"""Attention-weighted composition of frozen/trainable weight components.

A bank holds ``M`` components. Component ``m`` owns a weight slice
``W[m]`` (``L_w x d``), a key ``K[:, m]`` and an attention vector
``A[:, m]`` (both length ``d_q``). For a query ``q``::

    alpha_m = cos(q * A[:, m], K[:, m])
    lam     = sum_m alpha_m W[m]            # L_w x d

and ``lam`` is split into a high-branch and a low-branch scale by averaging
its first and second half of rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, Tape, Var, cosine_sim


@dataclass
class ComponentBank:
    W: np.ndarray  # (M, L_w, d)
    K: np.ndarray  # (d_q, M)
    A: np.ndarray  # (d_q, M)
    frozen: np.ndarray = field(default=None)  # (M,) bool

    def __post_init__(self):
        if self.W.ndim != 3:
            raise DimensionError(f"W must be (M, L_w, d), got {self.W.shape}")
        M = self.W.shape[0]
        if self.K.shape != (self.K.shape[0], M) or self.A.shape != self.K.shape:
            raise DimensionError(f"K {self.K.shape} / A {self.A.shape} do not match M={M}")
        if self.frozen is None:
            self.frozen = np.zeros(M, dtype=bool)
        self.frozen = np.asarray(self.frozen, dtype=bool)

    @classmethod
    def empty(cls, d_q: int, L_w: int, d: int) -> "ComponentBank":
        if L_w % 2:
            raise ValueError(f"L_w must be even, got {L_w}")
        return cls(W=np.zeros((0, L_w, d)), K=np.zeros((d_q, 0)), A=np.zeros((d_q, 0)))

    @property
    def M(self) -> int:
        return self.W.shape[0]

    @property
    def L_w(self) -> int:
        return self.W.shape[1]

    @property
    def d(self) -> int:
        return self.W.shape[2]

    @property
    def d_q(self) -> int:
        return self.K.shape[0]

    def copy(self) -> "ComponentBank":
        return ComponentBank(self.W.copy(), self.K.copy(), self.A.copy(), self.frozen.copy())


def query(x) -> np.ndarray:
    """Mean-pool a layer input over every leading axis; a vector passes through."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("query needs a nonempty input")
    return x.reshape(-1, x.shape[-1]).mean(axis=0)


def attention_weights(q, bank: ComponentBank) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (bank.d_q,):
        raise DimensionError(f"query has shape {q.shape}, bank expects ({bank.d_q},)")
    return np.array([cosine_sim(q * bank.A[:, m], bank.K[:, m]) for m in range(bank.M)])


def compose_lambda(alpha, bank: ComponentBank) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (bank.M,):
        raise DimensionError(f"alpha has shape {alpha.shape}, bank has M={bank.M}")
    return np.tensordot(alpha, bank.W, axes=(0, 0))


def split_lambda(lam) -> tuple[np.ndarray, np.ndarray]:
    lam = np.asarray(lam, dtype=np.float64)
    L = lam.shape[-2]
    if L % 2:
        raise ValueError(f"L_w must be even to split, got {L}")
    return lam[..., : L // 2, :].mean(axis=-2), lam[..., L // 2:, :].mean(axis=-2)


# --------------------------------------------------------------------------
# tape versions, batched over queries
# --------------------------------------------------------------------------


def attention_weights_tape(tape: Tape, Q: np.ndarray, K: Var, A: Var | None) -> Var:
    """alpha for a batch of queries ``Q`` (B x d_q): returns B x M.

    ``A=None`` drops the attention vectors (plain key similarity).
    """
    q = tape.constant(Q.reshape(Q.shape[0], 1, Q.shape[1]))
    keys = K.T  # M x d_q
    attended = q if A is None else q * A.T
    return tape.cosine(attended, keys)


def lambda_tape(tape: Tape, alpha: Var, W: Var) -> Var:
    """B x M weights against an (M, L_w, d) bank -> B x L_w x d."""
    M, L, d = W.shape
    flat = alpha @ W.reshape(M, L * d)
    return flat.reshape(alpha.shape[0], L, d)


def split_lambda_tape(lam: Var) -> tuple[Var, Var]:
    L = lam.shape[1]
    if L % 2:
        raise ValueError(f"L_w must be even to split, got {L}")
    return lam[:, : L // 2, :].mean(axis=1), lam[:, L // 2:, :].mean(axis=1)


def mean_lambda_tape(lam: Var) -> Var:
    return lam.mean(axis=1)
