"""numpy implementations of the hot kernels (fallback when the extension is not built)."""
import numpy as np


def relation_counts(indptr, indices, src_mask, n_out):
    """For every target id, count the sources in ``src_mask`` linked to it."""
    src = np.flatnonzero(src_mask)
    starts = indptr[src]
    lengths = indptr[src + 1] - starts
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(n_out, dtype=np.int64)
    # Expand each [start, start + length) range without a Python loop.
    offsets = np.repeat(starts - np.cumsum(lengths) + lengths, lengths)
    positions = offsets + np.arange(total)
    return np.bincount(indices[positions], minlength=n_out).astype(np.int64)


def filtered_ranks(scores, targets, answer_mask):
    """Rank of each target among non-answers; ties go to the lower id."""
    n = scores.shape[0]
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise IndexError(f"target id out of range for {n} entities")
    keep = ~answer_mask.astype(bool)
    cand = scores[keep]
    cand_ids = np.flatnonzero(keep)
    st = scores[targets][:, None]
    ids = targets[:, None]
    # The target never beats itself under either test, so it needs no exclusion.
    better = (cand[None, :] > st) | ((cand[None, :] == st) & (cand_ids[None, :] < ids))
    return 1 + better.sum(axis=1).astype(np.int64)
