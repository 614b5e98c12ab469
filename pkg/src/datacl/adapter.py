"""Dual-rank adapter on a frozen linear layer.

Two bottleneck branches sit beside the frozen map ``W0``: a low-rank one
(``A1 @ B1``, rank ``d_l``) and a high-rank one (``A2 @ B2``, rank ``d_h``).
Their outputs are scaled element-wise by ``lam_h`` / ``lam_l`` and added to
the base output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, matmul

DOWN_INIT_STD = 0.02


@dataclass
class DecomposedAdapterLayer:
    W0: np.ndarray
    b0: np.ndarray | None
    B1: np.ndarray
    A1: np.ndarray
    B2: np.ndarray
    A2: np.ndarray
    check_ranks: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        d_out, d_in = self.W0.shape
        d_l, d_h = self.B1.shape[0], self.B2.shape[0]
        if self.check_ranks and not 1 <= d_l < d_h <= min(d_in, d_out):
            raise ValueError(f"need 1 <= d_l < d_h <= min(d_in, d_out); got d_l={d_l}, d_h={d_h}, "
                             f"d_in={d_in}, d_out={d_out}")
        expected = {"B1": (d_l, d_in), "A1": (d_out, d_l), "B2": (d_h, d_in), "A2": (d_out, d_h)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.b0 is not None and self.b0.shape != (d_out,):
            raise DimensionError(f"b0 has shape {self.b0.shape}, expected ({d_out},)")
        self.W0.setflags(write=False)
        if self.b0 is not None:
            self.b0.setflags(write=False)

    @classmethod
    def init(cls, W0, b0, d_l: int, d_h: int, gen: np.random.Generator) -> "DecomposedAdapterLayer":
        """Gaussian down-projections, zero up-projections: starts at the base map."""
        W0 = np.array(W0, dtype=np.float64)
        d_out, d_in = W0.shape
        return cls(
            W0=W0,
            b0=None if b0 is None else np.array(b0, dtype=np.float64),
            B1=gen.normal(0.0, DOWN_INIT_STD, (d_l, d_in)),
            A1=np.zeros((d_out, d_l)),
            B2=gen.normal(0.0, DOWN_INIT_STD, (d_h, d_in)),
            A2=np.zeros((d_out, d_h)),
        )

    @property
    def d_in(self) -> int:
        return self.W0.shape[1]

    @property
    def d_out(self) -> int:
        return self.W0.shape[0]

    @property
    def d_l(self) -> int:
        return self.B1.shape[0]

    @property
    def d_h(self) -> int:
        return self.B2.shape[0]

    def base(self, x) -> np.ndarray:
        x = _check_input(x, self.d_in)
        out = matmul(x, self.W0.T)
        return out if self.b0 is None else out + self.b0


def _check_input(x, d_in: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != d_in:
        raise DimensionError(f"input has trailing size {x.shape[-1]}, layer expects {d_in}")
    return np.atleast_2d(x)


def _check_lambda(lam, d_out: int) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 0:
        return np.full(d_out, float(lam))
    if lam.shape[-1] != d_out:
        raise DimensionError(f"lambda has trailing size {lam.shape[-1]}, layer output is {d_out}")
    return lam


def branch_features(layer: DecomposedAdapterLayer, x) -> tuple[np.ndarray, np.ndarray]:
    """(f_h, f_l) for a vector or a batch of row vectors."""
    single = np.ndim(x) == 1
    x = _check_input(x, layer.d_in)
    f_h = matmul(matmul(x, layer.B2.T), layer.A2.T)
    f_l = matmul(matmul(x, layer.B1.T), layer.A1.T)
    if single:
        return f_h[0], f_l[0]
    return f_h, f_l


def fuse(layer: DecomposedAdapterLayer, x, lam_h, lam_l) -> np.ndarray:
    """Base output plus the two branch outputs scaled element-wise.

    ``lam_h`` / ``lam_l`` may be scalars, length-``d_out`` vectors, or one
    vector per row of a batched ``x``.
    """
    single = np.ndim(x) == 1
    lam_h = _check_lambda(lam_h, layer.d_out)
    lam_l = _check_lambda(lam_l, layer.d_out)
    f_h, f_l = branch_features(layer, np.atleast_2d(x))
    out = layer.base(x) + lam_h * f_h + lam_l * f_l
    return out[0] if single else out


@dataclass
class MergedLayer:
    W: np.ndarray
    b0: np.ndarray | None = field(default=None)

    def __call__(self, x) -> np.ndarray:
        single = np.ndim(x) == 1
        x = _check_input(x, self.W.shape[1])
        out = matmul(x, self.W.T)
        if self.b0 is not None:
            out = out + self.b0
        return out[0] if single else out


def reparameterize(layer: DecomposedAdapterLayer, lam_h, lam_l) -> MergedLayer:
    """Fold both branches into a single weight for a fixed pair of scales."""
    lam_h = _check_lambda(lam_h, layer.d_out)
    lam_l = _check_lambda(lam_l, layer.d_out)
    if lam_h.ndim != 1 or lam_l.ndim != 1:
        raise DimensionError("reparameterize needs one fixed lambda vector per branch")
    W = (layer.W0
         + lam_h[:, None] * matmul(layer.A2, layer.B2)
         + lam_l[:, None] * matmul(layer.A1, layer.B1))
    return MergedLayer(W=W, b0=None if layer.b0 is None else layer.b0.copy())
