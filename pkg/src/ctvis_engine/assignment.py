"""Ground-truth assignment of decoded instances: matching cost and Hungarian solver."""
from __future__ import annotations

import itertools

import numpy as np

from .errors import InfeasibleShape, RasterMismatch

DEFAULT_W_CLS = 2.0
DEFAULT_W_MASK = 5.0


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise RasterMismatch(f"mask shapes {a.shape} and {b.shape} differ")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def pair_cost(pred_scores, pred_mask, gt_class: int, gt_mask,
              w_cls: float = DEFAULT_W_CLS, w_mask: float = DEFAULT_W_MASK) -> float:
    """Weighted class-score and mask-IoU mismatch between a prediction and a GT instance.

    ``w_cls * (1 - score of the GT class) + w_mask * (1 - IoU)``; zero only for a
    perfect class score and identical masks.
    """
    score = float(np.asarray(pred_scores, dtype=np.float64)[gt_class])
    return w_cls * (1.0 - score) + w_mask * (1.0 - mask_iou(pred_mask, gt_mask))


def cost_matrix(preds, gts, w_cls: float = DEFAULT_W_CLS, w_mask: float = DEFAULT_W_MASK) -> np.ndarray:
    """Costs for all (prediction, GT) pairs; ``preds`` are (scores, mask), ``gts`` (class, mask)."""
    out = np.empty((len(preds), len(gts)))
    for i, (scores, mask) in enumerate(preds):
        for j, (cls, gmask) in enumerate(gts):
            out[i, j] = pair_cost(scores, mask, cls, gmask, w_cls, w_mask)
    return out


def hungarian(costs) -> list[tuple[int, int]]:
    """Minimum-cost assignment covering every column of a ``rows >= cols`` matrix.

    Shortest augmenting paths with row/column potentials, O(cols^2 * rows).
    Returns ``(row, col)`` pairs sorted by column.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    n_rows, n_cols = c.shape
    if n_cols > n_rows:
        raise InfeasibleShape(f"{n_cols} columns cannot be covered by {n_rows} rows")
    if n_cols == 0:
        return []
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")

    # Work on the transpose: each GT column is an "agent" that must be placed on one row.
    a = c.T
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[j] = agent (1-based) holding slot j, 0 = free
    way = np.zeros(m + 1, dtype=int)
    for agent in range(1, n + 1):
        owner[0] = agent
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    pairs = [(j - 1, int(owner[j]) - 1) for j in range(1, m + 1) if owner[j]]
    return sorted(pairs, key=lambda p: p[1])


def assignment_cost(costs, pairs) -> float:
    c = np.asarray(costs, dtype=np.float64)
    return float(sum(c[r, k] for r, k in pairs))


def brute_force_assignment(costs) -> tuple[float, list[tuple[int, int]]]:
    """Exhaustive minimum over all injective column-to-row maps (reference oracle)."""
    c = np.asarray(costs, dtype=np.float64)
    n_rows, n_cols = c.shape
    if n_cols > n_rows:
        raise InfeasibleShape(f"{n_cols} columns cannot be covered by {n_rows} rows")
    best, best_rows = np.inf, ()
    cols = np.arange(n_cols)
    for rows in itertools.permutations(range(n_rows), n_cols):
        total = c[list(rows), cols].sum()
        if total < best:
            best, best_rows = total, rows
    return float(best), [(r, k) for k, r in enumerate(best_rows)]
