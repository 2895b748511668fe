"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy versions.
Both take contiguous int64 / float64 / uint8 arrays.
"""
import numpy as np

from . import _pykernels

try:
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:  # extension not built
    _impl = _pykernels
    BACKEND = "python"


def relation_counts(indptr, indices, src_mask, n_out):
    return _impl.relation_counts(
        indptr, indices, np.ascontiguousarray(src_mask, dtype=np.uint8), int(n_out)
    )


def filtered_ranks(scores, targets, answer_mask):
    return _impl.filtered_ranks(
        np.ascontiguousarray(scores, dtype=np.float64),
        np.ascontiguousarray(targets, dtype=np.int64),
        np.ascontiguousarray(answer_mask, dtype=np.uint8),
    )


def backends():
    """Every available implementation keyed by name (the compiled one only if built)."""
    found = {"python": _pykernels}
    if BACKEND == "cython":
        found["cython"] = _impl
    return found
