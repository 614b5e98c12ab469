import csv

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from datacl.tasks import StreamConfig, export_csv, gen_task_stream, order_shuffle, task_means


def small(**kw):
    base = dict(n_tasks=3, d_in=8, n_classes=3, n_train=60, n_val=30, n_test=30)
    base.update(kw)
    return StreamConfig(**base)


def test_zero_magnitude_gives_identical_distributions():
    for shift in ("rotation", "permutation", "cluster-drift"):
        means = task_means(small(shift=shift, magnitude=0.0))
        assert np.allclose(means, means[0], atol=1e-12)


def test_identity_permutation_equals_base_task():
    means = task_means(small(shift="permutation", magnitude=0.0, n_tasks=4))
    base = task_means(small(shift="permutation", magnitude=0.7, n_tasks=4))[0]
    for m in means:
        assert np.array_equal(m, base)


def test_first_task_is_untransformed_for_every_shift():
    ref = task_means(small(shift="rotation", magnitude=0.0))[0]
    for shift in ("rotation", "permutation", "cluster-drift"):
        assert np.allclose(task_means(small(shift=shift, magnitude=1.3))[0], ref, atol=1e-12)


def test_validation():
    with pytest.raises(ValueError):
        StreamConfig(n_tasks=1)
    with pytest.raises(ValueError):
        StreamConfig(shift="shear")
    with pytest.raises(ValueError):
        StreamConfig(magnitude=-0.1)
    with pytest.raises(ValueError):
        StreamConfig(d_in=2, n_classes=5)


def test_determinism_byte_identical():
    a, b = gen_task_stream(small(seed=4)), gen_task_stream(small(seed=4))
    for ta, tb in zip(a, b):
        for split in ("train", "val", "test"):
            assert getattr(ta, split).X.tobytes() == getattr(tb, split).X.tobytes()
            assert getattr(ta, split).y.tobytes() == getattr(tb, split).y.tobytes()
    c = gen_task_stream(small(seed=5))
    assert a[0].train.X.tobytes() != c[0].train.X.tobytes()


def test_splits_disjoint_and_balanced():
    stream = gen_task_stream(small(n_train=61, n_val=31, n_test=29))
    for task in stream:
        rows = [tuple(x) for s in (task.train, task.val, task.test) for x in s.X]
        assert len(rows) == len(set(rows))
        for split in (task.train, task.val, task.test):
            counts = np.bincount(split.y, minlength=3)
            assert counts.max() - counts.min() <= 1


def test_default_sizes():
    cfg = StreamConfig()
    assert (cfg.n_train, cfg.n_test, cfg.d_in, cfg.n_classes, cfg.n_tasks) == (1000, 500, 32, 4, 5)


def test_order_shuffle():
    stream = gen_task_stream(small(n_tasks=5))
    same = order_shuffle(stream, perm=range(5))
    assert same.order == stream.order and same[2] is stream[2]
    a, b = order_shuffle(stream, 1), order_shuffle(stream, 2)
    assert a.order != b.order
    assert sorted(a.order) == sorted(b.order) == [0, 1, 2, 3, 4]
    perm = [3, 0, 4, 1, 2]
    inv = list(np.argsort(perm))
    assert order_shuffle(order_shuffle(stream, perm=perm), perm=inv).order == stream.order
    assert order_shuffle(stream, perm=perm)[0] is stream[3]
    with pytest.raises(ValueError):
        order_shuffle(stream, perm=[0, 0, 1, 2, 3])


@pytest.mark.parametrize("seed", range(5))
def test_linear_probe_sees_shift(seed):
    stream = gen_task_stream(StreamConfig(n_tasks=5, shift="rotation", magnitude=np.pi / 6, d_in=32,
                                          n_classes=4, seed=seed))
    probe = LogisticRegression(max_iter=2000).fit(stream[0].train.X, stream[0].train.y)
    assert probe.score(stream[0].test.X, stream[0].test.y) >= 0.9
    assert probe.score(stream[4].test.X, stream[4].test.y) <= 0.7


def test_csv_export_layout(tmp_path):
    stream = gen_task_stream(small(n_tasks=2))
    path = export_csv(stream, tmp_path / "s.csv")
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == [f"feature_{i}" for i in range(8)] + ["label", "task_id", "split"]
    assert len(rows) == 1 + 2 * (60 + 30 + 30)
    first = rows[1]
    assert float(first[0]) == stream[0].train.X[0, 0]
    assert first[-3:] == [str(stream[0].train.y[0]), "0", "train"]
