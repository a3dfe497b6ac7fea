"""Edit-distance scoring with the best stream-to-reference pairing."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .multitalker import MAX_EXHAUSTIVE_STREAMS, hungarian_assign


def edit_distance(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of a minimum-error alignment.

    Among alignments with the fewest errors the one with the fewest
    insertions plus deletions is reported, which makes the split unique.
    """
    n, m = len(ref), len(hyp)
    # cost[i][j] = (errors, indels, subs) aligning ref[:i] with hyp[:j]
    cost = [[(0, 0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = (i, i, 0)
    for j in range(1, m + 1):
        cost[0][j] = (j, j, 0)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            e, d, s = cost[i - 1][j - 1]
            hit = ref[i - 1] == hyp[j - 1]
            diag = (e, d, s) if hit else (e + 1, d, s + 1)
            e, d, s = cost[i - 1][j]
            up = (e + 1, d + 1, s)
            e, d, s = cost[i][j - 1]
            left = (e + 1, d + 1, s)
            cost[i][j] = min(diag, up, left)
    errors, indels, subs = cost[n][m]
    # insertions - deletions is fixed by the lengths
    ins = (indels + (m - n)) // 2
    dels = indels - ins
    return subs, ins, dels


@dataclass
class ScoreReport:
    """Scores of one utterance under the chosen pairing: reference i is
    compared with hypothesis ``perm[i]``."""

    counts: list[tuple[int, int, int]]
    perm: tuple[int, ...]
    n_ref: int

    @property
    def errors(self) -> int:
        return int(sum(sum(c) for c in self.counts))

    @property
    def wer(self) -> float:
        if self.n_ref == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return self.errors / self.n_ref

    def to_dict(self) -> dict:
        return {
            "counts": [{"sub": s, "ins": i, "del": d} for s, i, d in self.counts],
            "perm": list(self.perm),
            "errors": self.errors,
            "n_ref": self.n_ref,
            "wer": self.wer,
        }


def _normalise(hyps) -> list[list]:
    return [[] if h is None else list(h) for h in hyps]


def permutation_wer(refs: Sequence[Sequence], hyps: Sequence[Sequence | None]) -> ScoreReport:
    """Pair references with hypothesis streams so that the total number of
    edit errors is minimal.  Missing streams must be passed as empty (or
    None) sequences; a count mismatch is an error."""
    hyps = _normalise(hyps)
    refs = [list(r) for r in refs]
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypothesis streams")
    S = len(refs)
    triples = [[edit_distance(r, h) for h in hyps] for r in refs]
    E = np.array([[sum(t) for t in row] for row in triples], dtype=float).reshape(S, S)
    if S <= MAX_EXHAUSTIVE_STREAMS:
        perm, best = (), None
        for p in itertools.permutations(range(S)):
            c = sum(E[i, p[i]] for i in range(S))
            if best is None or c < best:
                perm, best = p, c
    else:
        perm, _ = hungarian_assign(E)
    counts = [triples[i][perm[i]] for i in range(S)]
    return ScoreReport(counts, tuple(int(p) for p in perm), sum(len(r) for r in refs))


@dataclass
class CorpusScore:
    """Aggregate over utterances, each with its own best pairing."""

    reports: list[ScoreReport] = field(default_factory=list)

    def add(self, report: ScoreReport) -> None:
        self.reports.append(report)

    @property
    def errors(self) -> int:
        return sum(r.errors for r in self.reports)

    @property
    def n_ref(self) -> int:
        return sum(r.n_ref for r in self.reports)

    def totals(self) -> tuple[int, int, int]:
        s = i = d = 0
        for r in self.reports:
            for a, b, c in r.counts:
                s, i, d = s + a, i + b, d + c
        return s, i, d

    @property
    def wer(self) -> float:
        return self.errors / self.n_ref if self.n_ref else 0.0
