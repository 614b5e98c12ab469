"""Frozen MLP backbone with dual-rank adapters on its two hidden layers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import DecomposedAdapterLayer, reparameterize
from .config import RunConfig
from .lifecycle import ortho_loss_tape
from .numerics import Tape, Var, backward, rng
from .weighting import (
    ComponentBank,
    attention_weights,
    attention_weights_tape,
    compose_lambda,
    lambda_tape,
    split_lambda,
    split_lambda_tape,
)


@dataclass
class Backbone:
    weights: list[np.ndarray]  # [(hidden, d_in), (hidden, hidden), (n_out, hidden)]
    biases: list[np.ndarray]

    def forward(self, X: np.ndarray) -> list[np.ndarray]:
        """Inputs to every linear layer, followed by the logits."""
        acts = [X]
        h = X
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts


def pretrain_backbone(d_in: int, hidden: int, n_out: int, seed: int, steps: int = 300,
                      lr: float = 1e-2, batch: int = 64) -> Backbone:
    """Fit a 3-layer ReLU classifier on a generic Gaussian-cluster problem.

    The generic problem is unrelated to any task stream; it only shapes the
    frozen features the adapters start from.
    """
    g = rng(seed, "pretrain")
    dims = [d_in, hidden, hidden, n_out]
    weights = [g.normal(0.0, np.sqrt(2.0 / dims[i]), (dims[i + 1], dims[i])) for i in range(3)]
    biases = [np.zeros(dims[i + 1]) for i in range(3)]
    centres = g.standard_normal((n_out, d_in))
    centres *= 5.0 / np.linalg.norm(centres, axis=1, keepdims=True)
    names = [f"{k}{i}" for i in range(3) for k in ("W", "b")]
    m = {n: 0.0 for n in names}
    v = {n: 0.0 for n in names}
    for step in range(1, steps + 1):
        y = g.integers(0, n_out, batch)
        X = centres[y] + g.standard_normal((batch, d_in))
        tape = Tape()
        h = tape.constant(X)
        for i in range(3):
            W = tape.param(weights[i], f"W{i}")
            b = tape.param(biases[i], f"b{i}")
            h = h @ W.T + b
            if i < 2:
                h = tape.relu(h)
        grads = backward(tape.cross_entropy(h, y))
        for n in names:
            arr = weights[int(n[1])] if n[0] == "W" else biases[int(n[1])]
            gr = grads[n]
            m[n] = 0.9 * m[n] + 0.1 * gr
            v[n] = 0.999 * v[n] + 0.001 * gr * gr
            mh = m[n] / (1 - 0.9**step)
            vh = v[n] / (1 - 0.999**step)
            arr -= lr * mh / (np.sqrt(vh) + 1e-8)
    for a in weights + biases:
        a.setflags(write=False)
    return Backbone(weights, biases)


BANK_KEYS_SHARED = ("hl",)
BANK_KEYS_DUAL = ("h", "l")


@dataclass
class ModelState:
    backbone: Backbone
    layers: list[DecomposedAdapterLayer]
    banks: list[dict[str, ComponentBank]]
    n_classes: int
    task_queries: dict[int, list[np.ndarray]] = field(default_factory=dict)

    # parameter naming ------------------------------------------------------

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every mutable array, by stable name."""
        out = {}
        for i, layer in enumerate(self.layers):
            for k in ("B1", "A1", "B2", "A2"):
                out[f"l{i}.{k}"] = getattr(layer, k)
            for bk, bank in self.banks[i].items():
                out[f"l{i}.{bk}.W"] = bank.W
                out[f"l{i}.{bk}.K"] = bank.K
                out[f"l{i}.{bk}.att"] = bank.A
        return out

    def set_array(self, name: str, value: np.ndarray) -> None:
        parts = name.split(".")
        layer = int(parts[0][1:])
        if len(parts) == 2:
            setattr(self.layers[layer], parts[1], value)
        else:
            bank = self.banks[layer][parts[1]]
            attr = {"W": "W", "K": "K", "att": "A"}[parts[2]]
            setattr(bank, attr, value)

    def frozen_mask(self, name: str) -> np.ndarray | None:
        """Boolean mask of frozen elements for bank arrays; None for adapters."""
        parts = name.split(".")
        if len(parts) == 2:
            return None
        bank = self.banks[int(parts[0][1:])][parts[1]]
        if parts[2] == "W":
            return np.broadcast_to(bank.frozen[:, None, None], bank.W.shape)
        return np.broadcast_to(bank.frozen[None, :], bank.K.shape)


def build_state(d_in: int, n_tasks: int, n_classes: int, cfg: RunConfig) -> ModelState:
    backbone = pretrain_backbone(d_in, cfg.hidden, n_tasks * n_classes, cfg.seed, cfg.pretrain_steps)
    g = rng(cfg.seed, "adapters")
    layers = [
        DecomposedAdapterLayer.init(backbone.weights[i], backbone.biases[i], cfg.d_l, cfg.d_h, g)
        for i in range(2)
    ]
    keys = BANK_KEYS_DUAL if cfg.dual_bank else BANK_KEYS_SHARED
    banks = [{k: ComponentBank.empty(layer.d_in, cfg.L_w, layer.d_out) for k in keys} for layer in layers]
    return ModelState(backbone, layers, banks, n_classes)


def trainable_names(state: ModelState, cfg: RunConfig) -> list[str]:
    names = []
    for i in range(len(state.layers)):
        if cfg.flag("low_branch"):
            names += [f"l{i}.B1", f"l{i}.A1"]
        if cfg.flag("high_branch"):
            names += [f"l{i}.B2", f"l{i}.A2"]
        if cfg.flag("weighting"):
            for bk in state.banks[i]:
                names += [f"l{i}.{bk}.W", f"l{i}.{bk}.K"]
                if cfg.flag("attention"):
                    names.append(f"l{i}.{bk}.att")
    return names


def _label_index(task_ids: np.ndarray, n_classes: int) -> np.ndarray:
    return task_ids[:, None] * n_classes + np.arange(n_classes)[None, :]


@dataclass
class Forward:
    tape: Tape
    logits: Var  # B x C, masked to each sample's task
    ortho: Var | None


def forward(state: ModelState, cfg: RunConfig, X: np.ndarray, task_ids: np.ndarray,
            values: dict[str, np.ndarray] | None = None) -> Forward:
    """Record the adapted forward pass on a fresh tape.

    ``values`` overrides stored arrays by name (used by gradient checks).
    Queries come from the frozen, un-adapted backbone, so they carry no
    gradient by construction.
    """
    tape = Tape()
    arrays = state.named_arrays()
    if values:
        arrays.update(values)
    train = set(trainable_names(state, cfg))

    def get(name):
        return tape.param(arrays[name], name) if name in train else tape.constant(arrays[name])

    source = state.backbone.forward(X)
    h = tape.constant(X)
    ortho_terms = []
    use_w = cfg.flag("weighting")
    use_att = cfg.flag("attention")
    for i, layer in enumerate(state.layers):
        z = h @ layer.W0.T + layer.b0
        lam_h = lam_l = None
        if use_w:
            lam_h, lam_l, terms = _lambda(tape, get, state, cfg, i, source[i], use_att)
            ortho_terms += terms
        if cfg.flag("high_branch"):
            f_h = (h @ get(f"l{i}.B2").T) @ get(f"l{i}.A2").T
            z = z + (f_h if lam_h is None else lam_h * f_h)
        if cfg.flag("low_branch"):
            f_l = (h @ get(f"l{i}.B1").T) @ get(f"l{i}.A1").T
            z = z + (f_l if lam_l is None else lam_l * f_l)
        h = tape.relu(z)
    W3, b3 = state.backbone.weights[2], state.backbone.biases[2]
    full = h @ W3.T + b3
    logits = tape.gather_cols(full, _label_index(task_ids, state.n_classes))
    ortho = None
    if ortho_terms:
        ortho = ortho_terms[0]
        for t in ortho_terms[1:]:
            ortho = ortho + t
    return Forward(tape, logits, ortho)


def _lambda(tape, get, state, cfg, i, Q, use_att):
    lams = {}
    terms = []
    for bk, bank in state.banks[i].items():
        W = get(f"l{i}.{bk}.W")
        K = get(f"l{i}.{bk}.K")
        A = get(f"l{i}.{bk}.att") if use_att else None
        if bank.M == 0:
            lams[bk] = tape.constant(np.zeros((Q.shape[0], cfg.L_w, bank.d)))
            continue
        alpha = attention_weights_tape(tape, Q, K, A)
        lams[bk] = lambda_tape(tape, alpha, W)
        if cfg.flag("ortho") and cfg.beta > 0:
            new = slice(int(bank.frozen.sum()), bank.M)
            n_new = bank.M - new.start
            if n_new:
                terms.append(ortho_loss_tape(W[new].reshape(n_new, bank.L_w * bank.d)))
                terms.append(ortho_loss_tape(K[:, new].T))
                if A is not None:
                    terms.append(ortho_loss_tape(A[:, new].T))
    if "hl" in lams:
        lam_h, lam_l = split_lambda_tape(lams["hl"])
    else:
        lam_h, lam_l = lams["h"].mean(axis=1), lams["l"].mean(axis=1)
    if cfg.scalar_lambda:
        d = lam_h.shape[1]
        lam_h = lam_h.mean(axis=1).reshape(-1, 1)
        lam_l = lam_l.mean(axis=1).reshape(-1, 1)
    return lam_h, lam_l, terms


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def predict(state: ModelState, cfg: RunConfig, X: np.ndarray, task_id: int) -> np.ndarray:
    """Per-input (dynamic) scales; returns predicted local class labels."""
    fw = forward(state, cfg, X, np.full(len(X), task_id))
    return fw.logits.value.argmax(axis=1)


def static_scales(state: ModelState, cfg: RunConfig, layer: int, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fixed (lam_h, lam_l) for one layer from a single stored query."""
    d = state.layers[layer].d_out
    if not cfg.flag("weighting"):
        return np.ones(d), np.ones(d)
    lams = {}
    for bk, bank in state.banks[layer].items():
        view = bank if cfg.flag("attention") else ComponentBank(bank.W, bank.K, np.ones_like(bank.A), bank.frozen)
        lams[bk] = compose_lambda(attention_weights(q, view), bank) if bank.M else np.zeros((cfg.L_w, d))
    if "hl" in lams:
        lam_h, lam_l = split_lambda(lams["hl"])
    else:
        lam_h, lam_l = lams["h"].mean(axis=0), lams["l"].mean(axis=0)
    if cfg.scalar_lambda:
        lam_h = np.full(d, lam_h.mean())
        lam_l = np.full(d, lam_l.mean())
    return lam_h, lam_l


def merged_layers(state: ModelState, cfg: RunConfig, task_id: int):
    """Reparameterized layers for a task, using that task's stored mean queries."""
    merged = []
    for i, layer in enumerate(state.layers):
        lam_h, lam_l = static_scales(state, cfg, i, state.task_queries[task_id][i])
        if not cfg.flag("high_branch"):
            lam_h = np.zeros_like(lam_h)
        if not cfg.flag("low_branch"):
            lam_l = np.zeros_like(lam_l)
        merged.append(reparameterize(layer, lam_h, lam_l))
    return merged


def predict_static(state: ModelState, cfg: RunConfig, X: np.ndarray, task_id: int) -> np.ndarray:
    h = X
    for m in merged_layers(state, cfg, task_id):
        h = np.maximum(m(h), 0.0)
    W3, b3 = state.backbone.weights[2], state.backbone.biases[2]
    full = h @ W3.T + b3
    C = state.n_classes
    return full[:, task_id * C:(task_id + 1) * C].argmax(axis=1)


def mean_queries(state: ModelState, X: np.ndarray) -> list[np.ndarray]:
    acts = state.backbone.forward(X)
    return [acts[i].mean(axis=0) for i in range(len(state.layers))]
