# cython: boundscheck=False, wraparound=False, cdivision=True
"""Fused score + top-k selection over a contiguous embedding matrix.

One pass over the matrix: each row's dot product against the query feeds a
bounded selection buffer, so the full score vector is never materialized.
Tie order matches the numpy fallback: score descending, row index ascending.
"""

import numpy as np

cimport numpy as cnp
cimport cython

ctypedef fused floating:
    float
    double


@cython.boundscheck(False)
@cython.wraparound(False)
def topk_dot(floating[:, ::1] matrix, floating[::1] query, int k):
    """Return (indices, scores) of the top-k rows of ``matrix @ query``."""
    cdef Py_ssize_t n = matrix.shape[0]
    cdef Py_ssize_t d = matrix.shape[1]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if query.shape[0] != d:
        raise ValueError("query dimension does not match matrix columns")
    cdef Py_ssize_t kk = k if k < n else n

    cdef cnp.ndarray idx_arr = np.empty(kk, dtype=np.int64)
    cdef cnp.int64_t[::1] idx = idx_arr
    scores_arr = np.empty(kk, dtype=np.asarray(matrix).dtype)
    cdef floating[::1] scores = scores_arr

    cdef Py_ssize_t filled = 0
    cdef Py_ssize_t i, j, pos
    cdef Py_ssize_t d4 = d - (d % 4)
    cdef floating s, s0, s1, s2, s3, worst

    for i in range(n):
        # Four independent accumulator lanes so the compiler can vectorize;
        # lane order is fixed, so results stay deterministic per build.
        s0 = 0; s1 = 0; s2 = 0; s3 = 0
        for j in range(0, d4, 4):
            s0 += matrix[i, j] * query[j]
            s1 += matrix[i, j + 1] * query[j + 1]
            s2 += matrix[i, j + 2] * query[j + 2]
            s3 += matrix[i, j + 3] * query[j + 3]
        s = (s0 + s1) + (s2 + s3)
        for j in range(d4, d):
            s += matrix[i, j] * query[j]
        if filled == kk:
            worst = scores[kk - 1]
            # Equal scores keep the earlier row: strict > required to evict.
            if s <= worst:
                continue
        # Insertion point: after all entries that beat (s, i).
        pos = filled if filled < kk else kk - 1
        while pos > 0 and scores[pos - 1] < s:
            pos -= 1
        if filled < kk:
            filled += 1
        for j in range(filled - 1, pos, -1):
            scores[j] = scores[j - 1]
            idx[j] = idx[j - 1]
        scores[pos] = s
        idx[pos] = i

    return idx_arr, scores_arr
