"""Pure-numpy fallback for fused score + top-k selection.

Scores every row of the index matrix against the query and returns the k
best (score descending, row index ascending on exact ties). Ties at the
selection boundary are resolved the same way, so the result matches a
stable full sort exactly.
"""

from __future__ import annotations

import numpy as np


def topk_dot(matrix: np.ndarray, query: np.ndarray, k: int):
    """Return (indices, scores) of the top-k rows of ``matrix @ query``."""
    n = matrix.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = matrix @ query
    k = min(k, n)
    if k == n:
        chosen = np.arange(n)
    else:
        part = np.argpartition(-scores, k - 1)
        kth = scores[part[k - 1]]
        above = np.flatnonzero(scores > kth)
        at = np.flatnonzero(scores == kth)[: k - above.size]
        chosen = np.concatenate([above, at])
    order = np.lexsort((chosen, -scores[chosen]))
    idx = chosen[order]
    return idx.astype(np.int64), scores[idx]
