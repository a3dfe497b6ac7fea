"""Multi-stream training objectives.

HEAT pairs output stream i with the i-th reference in order of start time;
PIT takes the minimum over all stream/reference assignments.  Both work on a
pair-loss callable ``ctx(H, y) -> Tensor`` for single instances, and on a
precomputed pair-loss tensor for batched training.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, getitem, stack, sum_
from .transducer import InfeasibleAlignmentError

PairLoss = Callable[[Tensor, Sequence[int]], Tensor]

SENTINEL = 1e30
MAX_EXHAUSTIVE_STREAMS = 6


class InfeasibleAssignmentError(ValueError):
    """No finite-cost assignment exists."""


@dataclass
class LabelSet:
    """References ordered by start time (ties broken by corpus id)."""

    labels: list[list[int]]
    starts: list[float]
    ids: list[str]

    @classmethod
    def from_unordered(cls, labels, starts, ids=None) -> "LabelSet":
        ids = list(ids) if ids is not None else [str(i) for i in range(len(labels))]
        order = sorted(range(len(labels)), key=lambda i: (starts[i], ids[i]))
        return cls([list(labels[i]) for i in order], [starts[i] for i in order], [ids[i] for i in order])

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> list[int]:
        return self.labels[i]


def _as_label_list(labels) -> list:
    return labels.labels if isinstance(labels, LabelSet) else list(labels)


def _check_counts(streams, labels) -> None:
    if len(streams) != len(labels):
        raise ValueError(f"stream count {len(streams)} != label count {len(labels)}")
    if len(streams) < 2:
        raise ValueError("multi-talker losses need at least two streams")


def heat_loss(streams: Sequence[Tensor], labels, ctx: PairLoss) -> Tensor:
    """Sum of stream-i / reference-i losses; exactly S loss evaluations."""
    labels = _as_label_list(labels)
    _check_counts(streams, labels)
    return sum_(stack([ctx(h, y) for h, y in zip(streams, labels)]))


def assignment_cost_matrix(streams: Sequence[Tensor], labels, ctx: PairLoss):
    """Return (C, losses) with C[i, j] = loss(Y^j, H_i); every pair is scored
    once.  Infeasible pairs get cost +inf and a None loss."""
    labels = _as_label_list(labels)
    _check_counts(streams, labels)
    S = len(streams)
    C = np.empty((S, S))
    losses: list[list[Tensor | None]] = [[None] * S for _ in range(S)]
    for i in range(S):
        for j in range(S):
            try:
                losses[i][j] = ctx(streams[i], labels[j])
                C[i, j] = float(losses[i][j].data)
            except InfeasibleAlignmentError:
                C[i, j] = math.inf
    return C, losses


def pit_loss(streams: Sequence[Tensor], labels, ctx: PairLoss, use_hungarian: bool = False):
    """Minimum over assignments; returns (loss, perm) where stream i is scored
    against reference perm[i].  The gradient flows through the chosen
    assignment only."""
    S = len(streams)
    if S > MAX_EXHAUSTIVE_STREAMS and not use_hungarian:
        raise ValueError(f"exhaustive PIT over {S}! permutations refused; pass use_hungarian=True")
    C, losses = assignment_cost_matrix(streams, labels, ctx)
    perm, _ = hungarian_assign(C) if use_hungarian else best_permutation(C)
    return sum_(stack([losses[i][perm[i]] for i in range(S)])), perm


def best_permutation(C: np.ndarray) -> tuple[tuple[int, ...], float]:
    """Exhaustive search; the first (lexicographically smallest) minimiser wins."""
    S = C.shape[0]
    best, best_cost = None, math.inf
    for perm in itertools.permutations(range(S)):
        cost = sum(C[i, perm[i]] for i in range(S))
        if cost < best_cost:
            best, best_cost = perm, cost
    if best is None:
        raise InfeasibleAssignmentError("every assignment has infinite cost")
    return best, best_cost


# ---------------------------------------------------------------------------
# Hungarian algorithm
# ---------------------------------------------------------------------------


def _hungarian_min_cost(a: np.ndarray) -> tuple[list[int], float]:
    """Shortest augmenting path with row/column potentials, O(n^3).

    Returns (perm, cost) with row i assigned to column perm[i].
    """
    n = a.shape[0]
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j]: row matched to column j (1-based, 0 = none)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    perm = [0] * n
    for j in range(1, n + 1):
        perm[p[j] - 1] = j - 1
    return perm, float(sum(a[i, perm[i]] for i in range(n)))


def hungarian_assign(C) -> tuple[tuple[int, ...], float]:
    """Minimum-cost perfect matching of a square cost matrix.

    +inf entries are replaced by a large sentinel and the result is rejected
    if it uses one.  Among optimal matchings the lexicographically smallest
    permutation is returned: rows are fixed in order to the smallest column
    that keeps the remaining problem optimal.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"cost matrix must be square, got {C.shape}")
    n = C.shape[0]
    if n == 0:
        return (), 0.0
    if np.any(np.all(~np.isfinite(C), axis=1)):
        raise InfeasibleAssignmentError("a row has no finite cost")
    a = np.where(np.isfinite(C), C, SENTINEL)
    _, opt = _hungarian_min_cost(a)
    if opt >= SENTINEL:
        raise InfeasibleAssignmentError("every assignment uses an infinite cost")
    tol = 1e-12 * max(1.0, abs(opt))

    perm: list[int] = []
    rows = list(range(n))
    cols = list(range(n))
    fixed = 0.0
    for r in range(n):
        rest_rows = rows[r + 1 :]
        for c in sorted(cols):
            rest_cols = [k for k in cols if k != c]
            sub = a[np.ix_(rest_rows, rest_cols)]
            sub_cost = _hungarian_min_cost(sub)[1] if rest_rows else 0.0
            if fixed + a[r, c] + sub_cost <= opt + tol:
                perm.append(c)
                fixed += a[r, c]
                cols = rest_cols
                break
    total = float(sum(C[i, perm[i]] for i in range(n)))
    return tuple(perm), total


# ---------------------------------------------------------------------------
# batched objectives over precomputed pair losses
# ---------------------------------------------------------------------------


def heat_from_pair_losses(diag: Tensor) -> Tensor:
    """``diag`` [B, S] holds loss(Y^i, H_i); returns per-item losses [B]."""
    return sum_(diag, axis=1)


def pit_from_pair_losses(matrix: Tensor) -> tuple[Tensor, list[tuple[int, ...]]]:
    """``matrix`` [B, S, S] with entry [b, i, j] = loss(Y^j, H_i).  Returns
    the per-item minimum [B] and the chosen permutations."""
    B, S, _ = matrix.shape
    perms = [best_permutation(matrix.data[b])[0] for b in range(B)]
    rows = np.repeat(np.arange(B), S)
    streams = np.tile(np.arange(S), B)
    cols = np.array([p[i] for p in perms for i in range(S)])
    chosen = getitem(matrix, (rows, streams, cols)).reshape(B, S)
    return sum_(chosen, axis=1), perms
