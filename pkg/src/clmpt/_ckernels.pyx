# cython: language_level=3
"""Compiled inner loops for adjacency images and filtered ranking.

Signatures mirror ``_pykernels`` exactly; ``clmpt.kernels`` picks one at import.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t i64


def relation_counts(const i64[::1] indptr, const i64[::1] indices,
                    const cnp.uint8_t[::1] src_mask, Py_ssize_t n_out):
    """For every target id, count the sources in ``src_mask`` linked to it."""
    cdef Py_ssize_t n_src = src_mask.shape[0]
    cdef Py_ssize_t s, j
    out = np.zeros(n_out, dtype=np.int64)
    cdef i64[::1] counts = out
    for s in range(n_src):
        if src_mask[s]:
            for j in range(indptr[s], indptr[s + 1]):
                counts[indices[j]] += 1
    return out


def filtered_ranks(const double[::1] scores, const i64[::1] targets,
                   const cnp.uint8_t[::1] answer_mask):
    """Rank of each target among non-answers; ties go to the lower id."""
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t m = targets.shape[0]
    cdef Py_ssize_t i, e, k = 0
    cdef i64 t, rank
    cdef double st
    cand_buf = np.empty(n, dtype=np.float64)
    id_buf = np.empty(n, dtype=np.int64)
    cdef double[::1] cand = cand_buf
    cdef i64[::1] cand_ids = id_buf
    for e in range(n):
        if not answer_mask[e]:
            cand[k] = scores[e]
            cand_ids[k] = e
            k += 1
    out = np.empty(m, dtype=np.int64)
    cdef i64[::1] ranks = out
    for i in range(m):
        t = targets[i]
        if t < 0 or t >= n:
            raise IndexError(f"target id {t} out of range for {n} entities")
        st = scores[t]
        rank = 1
        # Branch-free count; the target never beats itself under either test.
        for e in range(k):
            rank += (cand[e] > st) | ((cand[e] == st) & (cand_ids[e] < t))
        ranks[i] = rank
    return out
