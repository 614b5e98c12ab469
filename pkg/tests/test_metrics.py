import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datacl.metrics import (
    AccuracyMatrix,
    IncompleteMatrixError,
    ap,
    forget,
    fp,
    metrics_record,
    summary,
    write_csv,
    write_json,
)


def test_fp_examples():
    assert fp(np.ones((3, 3))) == 1.0
    assert 100 * fp(np.array([[0.9, 0.8], [0.0, 0.6]])) == pytest.approx(70.0, abs=1e-12)
    assert fp(np.full((4, 4), 0.37)) == pytest.approx(0.37, abs=1e-15)


def test_ap_examples():
    assert 100 * ap(np.array([[0.9, 0.1], [0.2, 0.7]])) == pytest.approx(80.0, abs=1e-12)
    assert ap(np.full((3, 3), 0.42)) == pytest.approx(0.42, abs=1e-15)
    assert ap(np.array([[0.55]])) == 0.55


def test_missing_entries_rejected():
    a = AccuracyMatrix.empty(3)
    with pytest.raises(IncompleteMatrixError):
        fp(a)
    a.a[np.arange(3), np.arange(3)] = 0.5
    assert ap(a) == 0.5
    with pytest.raises(IncompleteMatrixError):
        forget(a)


def test_reference_aggregates_roundtrip():
    # SeqLoRA row: FP 74.9, AP 80.7, Forget 5.8
    a = np.array([[0.807, 0.691], [0.0, 0.807]])
    s = summary(a)
    assert s["fp"] == pytest.approx(74.9, abs=1e-9)
    assert s["ap"] == pytest.approx(80.7, abs=1e-9)
    assert round(s["forget"], 1) == 5.8
    # DATA+Replay row: FP 81.8, AP 80.6, Forget -1.2 (negative forgetting is legal)
    b = np.array([[0.806, 0.830], [0.0, 0.806]])
    s = summary(b)
    assert s["fp"] == pytest.approx(81.8, abs=1e-9)
    assert s["ap"] == pytest.approx(80.6, abs=1e-9)
    assert round(s["forget"], 1) == -1.2


def test_no_shift_constant_matrix_has_zero_forget():
    assert forget(np.full((5, 5), 0.8)) == 0.0


@st.composite
def matrices(draw):
    n = draw(st.integers(1, 6))
    vals = draw(st.lists(st.floats(0, 1), min_size=n * n, max_size=n * n))
    return np.array(vals).reshape(n, n)


@given(matrices())
@settings(max_examples=60, deadline=None)
def test_forget_identity(a):
    assert forget(a) == ap(a) - fp(a)
    s = summary(a)
    assert s["forget"] == s["ap"] - s["fp"]


@given(matrices(), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_permutation_equivariance(a, seed):
    n = a.shape[0]
    if n < 2:
        return
    # relabel tasks: rows permuted, columns kept (column order is training time);
    # the diagonal follows the same relabelling when the training order is permuted too
    perm = np.random.default_rng(seed).permutation(n)
    assert fp(a[perm]) == pytest.approx(fp(a), abs=1e-12)
    b = a[np.ix_(perm, perm)]
    assert ap(b) == pytest.approx(ap(a), abs=1e-12)


@given(matrices(), st.integers(0, 5), st.floats(0, 0.5))
@settings(max_examples=60, deadline=None)
def test_monotone_in_final_column(a, q, delta):
    q = q % a.shape[0]
    b = a.copy()
    b[q, -1] += delta
    assert fp(b) >= fp(a)
    if q != a.shape[0] - 1:
        assert forget(b) <= forget(a)


def test_records_and_files(tmp_path):
    a = np.array([[0.9, 0.8], [0.1, 0.7]])
    rec = metrics_record(a, "data", [1, 0], 3)
    assert set(rec) >= {"method", "order", "seed", "fp", "ap", "forget"}
    p = write_json(rec, tmp_path / "m.json")
    assert json.loads(p.read_text())["fp"] == pytest.approx(75.0)
    c = write_csv([rec], tmp_path / "m.csv").read_text().splitlines()
    assert c[0] == "method,order,seed,fp,ap,forget"
    assert c[1].startswith("data,1-0,3,75.0000,80.0000,5.0000")


def test_to_list_scales_and_marks_missing():
    m = AccuracyMatrix.empty(2)
    m.a[0, 0] = 0.5
    assert m.to_list() == [[50.0, None], [None, None]]
