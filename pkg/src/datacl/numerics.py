"""Dense float64 arithmetic, seeded RNG and a small reverse-mode tape.

The tape only knows the primitives the adapter model needs. Every node is
appended to its tape at creation, so creation order is a valid topological
order and the backward sweep is a single reverse pass.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Mapping

import numpy as np

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


class DimensionError(ValueError):
    pass


def rng(*key: int | str) -> np.random.Generator:
    """PCG64 generator keyed by a tuple of ints/strings.

    Strings are folded to ints through their UTF-8 bytes so that the stream
    does not depend on Python's salted ``hash``.
    """
    parts = []
    for k in key:
        if isinstance(k, str):
            parts.append(int.from_bytes(k.encode("utf-8")[:8].ljust(8, b"\0"), "little"))
        else:
            parts.append(int(k))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(parts)))


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch: {u.shape} vs {v.shape}")
    nu = np.sqrt(u @ u)
    nv = np.sqrt(v @ v)
    if nu < NORM_EPS or nv < NORM_EPS:
        log.warning("cosine_sim on a zero-norm vector; returning 0")
        return 0.0
    return float(np.clip((u @ v) / (nu * nv), -1.0, 1.0))


def frobenius_sq(b) -> float:
    b = np.asarray(b, dtype=np.float64)
    return float(np.sum(b * b))


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Var:
    """A value on a tape. Arithmetic operators record new nodes."""

    __slots__ = ("tape", "value", "grad", "parents", "backward_fn", "name")

    def __init__(self, tape: "Tape", value: np.ndarray, parents=(), backward_fn=None, name=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self) -> "Var":
        return self.tape.transpose(self)

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.add(self, self.tape.neg(self.tape.lift(other)))

    def __rsub__(self, other):
        return self.tape.add(self.tape.lift(other), self.tape.neg(self))

    def __neg__(self):
        return self.tape.neg(self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __getitem__(self, idx):
        return self.tape.getitem(self, idx)

    def sum(self, axis=None):
        return self.tape.sum(self, axis)

    def mean(self, axis=None):
        return self.tape.mean(self, axis)

    def reshape(self, *shape):
        return self.tape.reshape(self, shape[0] if len(shape) == 1 else shape)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"


class Tape:
    """Ordered record of primitive operations."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    # leaves -------------------------------------------------------------

    def param(self, value, name: str) -> Var:
        v = Var(self, np.asarray(value, dtype=np.float64), name=name)
        self.nodes.append(v)
        self.params[name] = v
        return v

    def constant(self, value) -> Var:
        v = Var(self, np.asarray(value, dtype=np.float64))
        self.nodes.append(v)
        return v

    def lift(self, x) -> Var:
        return x if isinstance(x, Var) else self.constant(x)

    def _node(self, value, parents, backward_fn) -> Var:
        v = Var(self, value, parents, backward_fn)
        self.nodes.append(v)
        return v

    # primitives ---------------------------------------------------------

    def add(self, a, b) -> Var:
        a, b = self.lift(a), self.lift(b)

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return self._node(a.value + b.value, (a, b), bw)

    def neg(self, a) -> Var:
        return self._node(-a.value, (a,), lambda g: (-g,))

    def mul(self, a, b) -> Var:
        a, b = self.lift(a), self.lift(b)

        def bw(g):
            return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

        return self._node(a.value * b.value, (a, b), bw)

    def matmul(self, a, b) -> Var:
        a, b = self.lift(a), self.lift(b)
        out = matmul(a.value, b.value)

        def bw(g):
            return g @ b.value.T, a.value.T @ g

        return self._node(out, (a, b), bw)

    def transpose(self, a) -> Var:
        return self._node(a.value.T, (a,), lambda g: (g.T,))

    def reshape(self, a, shape) -> Var:
        old = a.shape
        return self._node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def getitem(self, a, idx) -> Var:
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(p, (slice, int)) for p in parts)

        def bw(g):
            full = np.zeros_like(a.value)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return self._node(a.value[idx], (a,), bw)

    def sum(self, a, axis=None) -> Var:
        shape = a.shape

        def bw(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._node(a.value.sum(axis=axis), (a,), bw)

    def mean(self, a, axis=None) -> Var:
        n = a.value.size if axis is None else a.shape[axis]
        return self.mul(self.sum(a, axis), 1.0 / n)

    def relu(self, a) -> Var:
        mask = a.value > 0
        return self._node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))

    def stop_gradient(self, a) -> Var:
        return self.constant(a.value.copy())

    def cosine(self, u, k) -> Var:
        """Cosine similarity along the last axis; 0 where either norm is ~0.

        ``u`` and ``k`` broadcast against each other.
        """
        u, k = self.lift(u), self.lift(k)
        nu = np.sqrt(np.sum(u.value * u.value, axis=-1))
        nk = np.sqrt(np.sum(k.value * k.value, axis=-1))
        ok = (nu >= NORM_EPS) & (nk >= NORM_EPS)
        if not np.all(ok):
            log.warning("cosine on zero-norm input in %d place(s); set to 0", int(np.sum(~ok)))
        denom = np.where(ok, nu * nk, 1.0)
        dot = np.sum(u.value * k.value, axis=-1)
        c = np.where(ok, dot / denom, 0.0)
        safe_nu = np.where(ok, nu, 1.0)
        safe_nk = np.where(ok, nk, 1.0)

        def bw(g):
            w = np.where(ok, g, 0.0)[..., None]
            du = w * (k.value / denom[..., None] - c[..., None] * u.value / (safe_nu**2)[..., None])
            dk = w * (u.value / denom[..., None] - c[..., None] * k.value / (safe_nk**2)[..., None])
            return _unbroadcast(du, u.shape), _unbroadcast(dk, k.shape)

        return self._node(c, (u, k), bw)

    def gather_cols(self, a, idx: np.ndarray) -> Var:
        """out[b, j] = a[b, idx[b, j]]."""
        rows = np.arange(a.shape[0])[:, None]

        def bw(g):
            full = np.zeros_like(a.value)
            np.add.at(full, (np.broadcast_to(rows, idx.shape), idx), g)
            return (full,)

        return self._node(a.value[rows, idx], (a,), bw)

    def cross_entropy(self, logits, labels: np.ndarray) -> Var:
        """Mean softmax cross-entropy over the batch (rows of ``logits``)."""
        z = logits.value
        m = z.max(axis=1, keepdims=True)
        ez = np.exp(z - m)
        s = ez.sum(axis=1, keepdims=True)
        logp = z - m - np.log(s)
        n = z.shape[0]
        out = -logp[np.arange(n), labels].mean()

        def bw(g):
            p = ez / s
            p[np.arange(n), labels] -= 1.0
            return (g * p / n,)

        return self._node(np.asarray(out), (logits,), bw)


def backward(loss: Var) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns gradients keyed by param name."""
    if loss.value.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    tape = loss.tape
    for v in tape.nodes:
        v.grad = None
    loss.grad = np.ones_like(loss.value)
    for v in reversed(tape.nodes):
        if v.grad is None or v.backward_fn is None:
            continue
        for p, gp in zip(v.parents, v.backward_fn(v.grad)):
            p.grad = gp if p.grad is None else p.grad + gp
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.value)).reshape(p.value.shape)
        for name, p in tape.params.items()
    }


def grad_check(
    loss_fn: Callable[[Mapping[str, np.ndarray]], Var],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
    perturb: Mapping[str, float] | None = None,
    entries: Mapping[str, np.ndarray] | None = None,
) -> dict[str, float]:
    """Per-parameter max of |analytic - central FD| / max(1, |FD|).

    ``loss_fn`` builds a fresh tape from ``params`` and returns the scalar
    loss node; parameters it should differentiate must be registered via
    ``tape.param`` under the same names. ``max_entries`` subsamples large
    arrays (deterministically) to bound runtime. ``perturb`` adds a constant
    to named analytic gradients; it exists so negative controls can be tested.
    ``entries`` restricts named arrays to the True positions of a mask.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads = backward(loss_fn(params))
    g = rng(seed, "gradcheck")
    errors = {}
    for name in names if names is not None else grads:
        arr = params[name]
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if entries is not None and name in entries:
            idx = np.flatnonzero(np.broadcast_to(entries[name], arr.shape))
        if max_entries is not None and idx.size > max_entries:
            idx = np.sort(g.choice(idx, max_entries, replace=False))
        analytic = grads[name].reshape(-1)
        if perturb and name in perturb:
            analytic = analytic + perturb[name]
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn(params).value)
            flat[i] = orig - eps
            fm = float(loss_fn(params).value)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(analytic[i] - num) / max(1.0, abs(num)))
        errors[name] = worst
    return errors
