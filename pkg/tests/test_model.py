import numpy as np
import pytest

from datacl.adapter import fuse
from datacl.config import RunConfig
from datacl.model import forward, merged_layers, predict, static_scales
from datacl.numerics import rng
from datacl.tasks import StreamConfig, gen_task_stream
from datacl.trainer import begin_task, new_state
from datacl.weighting import attention_weights, compose_lambda, split_lambda

FAST = dict(hidden=16, pretrain_steps=50, per_task=2)


def prepared(cfg, seed=0):
    stream = gen_task_stream(StreamConfig(n_tasks=3, d_in=8, n_classes=3, n_train=20, n_val=4, n_test=10,
                                          seed=seed))
    state = new_state(stream, cfg)
    begin_task(state, cfg, 0)
    begin_task(state, cfg, 1)
    g = rng(seed, "perturb")
    for name, arr in state.named_arrays().items():
        state.set_array(name, arr + 0.3 * g.standard_normal(arr.shape))
    return stream, state


def reference_logits(state, cfg, x, task_id):
    """Per-sample loop through the plain numpy building blocks."""
    src = state.backbone.forward(x[None])
    h = x
    for i, layer in enumerate(state.layers):
        bank = state.banks[i]["hl"]
        lam_h, lam_l = split_lambda(compose_lambda(attention_weights(src[i][0], bank), bank))
        h = np.maximum(fuse(layer, h, lam_h, lam_l), 0.0)
    full = state.backbone.weights[2] @ h + state.backbone.biases[2]
    C = state.n_classes
    return full[task_id * C:(task_id + 1) * C]


@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_numpy_reference(seed):
    cfg = RunConfig(seed=seed, **FAST)
    stream, state = prepared(cfg, seed)
    X = stream[1].test.X
    tids = np.array([0, 1, 2, 1, 0, 2, 1, 1, 0, 2])
    got = forward(state, cfg, X, tids).logits.value
    for b in range(len(X)):
        assert np.allclose(got[b], reference_logits(state, cfg, X[b], tids[b]), atol=1e-12)


def test_static_scales_match_dynamic_for_that_query():
    cfg = RunConfig(**FAST)
    stream, state = prepared(cfg)
    x = stream[0].test.X[:1]
    src = state.backbone.forward(x)
    h = x[0]
    for i, layer in enumerate(state.layers):
        lam_h, lam_l = static_scales(state, cfg, i, src[i][0])
        h = np.maximum(fuse(layer, h, lam_h, lam_l), 0.0)
    full = state.backbone.weights[2] @ h + state.backbone.biases[2]
    dyn = forward(state, cfg, x, np.array([0])).logits.value[0]
    assert np.allclose(full[:3], dyn, atol=1e-12)


def test_merged_layers_reproduce_branched_static_pass():
    cfg = RunConfig(**FAST)
    stream, state = prepared(cfg)
    state.task_queries[0] = [q.mean(axis=0) for q in state.backbone.forward(stream[0].train.X)[:2]]
    X = stream[0].test.X
    merged = merged_layers(state, cfg, 0)
    h_m = h_b = X
    for i, layer in enumerate(state.layers):
        lam_h, lam_l = static_scales(state, cfg, i, state.task_queries[0][i])
        h_b = np.maximum(fuse(layer, h_b, lam_h, lam_l), 0.0)
        h_m = np.maximum(merged[i](h_m), 0.0)
    assert np.max(np.abs(h_m - h_b) / np.maximum(1.0, np.abs(h_b))) < 1e-9


def test_scalar_lambda_and_dual_bank_variants_run():
    for kw in (dict(scalar_lambda=True), dict(dual_bank=True)):
        cfg = RunConfig(**FAST, **kw)
        stream, state = prepared(cfg)
        pred = predict(state, cfg, stream[0].test.X, 0)
        assert pred.shape == (10,) and pred.max() < 3
    cfg = RunConfig(dual_bank=True, **FAST)
    _, state = prepared(cfg)
    assert set(state.banks[0]) == {"h", "l"}
