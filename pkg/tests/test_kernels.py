import importlib
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from clmpt import kernels
from clmpt.checks import naive_filtered_rank
from clmpt.kg import KnowledgeGraph

BACKENDS = kernels.backends()


def test_compiled_backend_selected():
    # The editable install builds the extension, so it is the active backend here.
    assert kernels.BACKEND == "cython" and set(BACKENDS) == {"cython", "python"}


def test_fallback_when_extension_missing(monkeypatch):
    # Hide the built module from both the import cache and the package namespace.
    monkeypatch.setitem(sys.modules, "clmpt._ckernels", None)
    monkeypatch.delattr(sys.modules["clmpt"], "_ckernels")
    try:
        importlib.reload(kernels)
        assert kernels.BACKEND == "python" and set(kernels.backends()) == {"python"}
        assert kernels.filtered_ranks(np.array([0.2, 0.9, 0.5]), np.array([2]), np.zeros(3, np.uint8)).tolist() == [2]
    finally:
        monkeypatch.undo()
        importlib.reload(kernels)
    assert kernels.BACKEND == "cython"


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_filtered_ranks_example(name):
    impl = BACKENDS[name]
    scores = np.array([0.9, 0.5, 0.7])
    mask = np.array([1, 0, 0], dtype=np.uint8)
    assert impl.filtered_ranks(scores, np.array([2], dtype=np.int64), mask).tolist() == [1]


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_filtered_ranks_range(name):
    impl = BACKENDS[name]
    with pytest.raises(IndexError):
        impl.filtered_ranks(np.zeros(3), np.array([3], dtype=np.int64), np.zeros(3, dtype=np.uint8))


@given(
    hnp.arrays(np.float64, st.integers(1, 40), elements=st.integers(0, 4).map(float)),
    st.data(),
)
def test_backends_agree_on_ranks(scores, data):
    n = scores.shape[0]
    targets = np.array(data.draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=5)), dtype=np.int64)
    mask = np.array(data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)), dtype=np.uint8)
    results = [impl.filtered_ranks(scores, targets, mask) for impl in BACKENDS.values()]
    for r in results[1:]:
        assert np.array_equal(results[0], r)
    others = set(np.flatnonzero(mask).tolist())
    expected = [naive_filtered_rank(scores, int(t), others - {int(t)}) for t in targets]
    assert results[0].tolist() == expected


@given(
    st.lists(st.tuples(st.integers(0, 9), st.integers(0, 1), st.integers(0, 9)), max_size=40),
    st.lists(st.integers(0, 1), min_size=10, max_size=10),
)
def test_backends_agree_on_counts(triples, src):
    kg = KnowledgeGraph(10, 2, triples)
    mask = np.array(src, dtype=np.uint8)
    fwd, rev = kg.csr
    for table in (fwd, rev):
        for r, (indptr, indices) in enumerate(table):
            outs = [impl.relation_counts(indptr, indices, mask, 10) for impl in BACKENDS.values()]
            for o in outs[1:]:
                assert np.array_equal(outs[0], o)
    # independent recount for the forward direction
    for r, (indptr, indices) in enumerate(fwd):
        expected = np.zeros(10, dtype=np.int64)
        for h, rr, t in kg.triples:
            if rr == r and mask[h]:
                expected[t] += 1
        assert np.array_equal(kernels.relation_counts(indptr, indices, mask, 10), expected)
