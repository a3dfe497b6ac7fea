"""RNN transducer joint network and loss.

The blank symbol is always the last index of the output distribution, so a
lattice of logits has shape [T, U+1, V+1] with blank at index V.  Forward and
backward variables are computed in the log domain.  Within one time row the
label-advance recurrence is a scan, which is evaluated in closed form with
prefix sums and ``np.logaddexp.accumulate``; only the time axis is looped.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .functional import linear
from .tensor import DTYPE, Tensor, add, as_tensor, reshape, tanh

NEG_INF = -np.inf


class InfeasibleAlignmentError(ValueError):
    """No alignment path exists (e.g. zero acoustic frames)."""


class LossCounter:
    """Counts transducer-loss evaluations (one per lattice)."""

    def __init__(self) -> None:
        self.count = 0


LOSS_CALLS = LossCounter()


class _Window:
    def __init__(self) -> None:
        self.start = LOSS_CALLS.count
        self.stop: int | None = None

    @property
    def count(self) -> int:
        end = LOSS_CALLS.count if self.stop is None else self.stop
        return end - self.start


@contextlib.contextmanager
def count_loss_calls():
    """Yield an object whose ``count`` is the number of lattices scored
    inside the block (frozen once the block exits)."""
    w = _Window()
    try:
        yield w
    finally:
        w.stop = LOSS_CALLS.count


@dataclass
class JointLattice:
    """Logits of one utterance, [T, U+1, V+1]; blank is index V."""

    logits: Tensor

    @property
    def blank_index(self) -> int:
        return self.logits.shape[-1] - 1

    @property
    def T(self) -> int:
        return self.logits.shape[0]

    @property
    def U(self) -> int:
        return self.logits.shape[1] - 1


# ---------------------------------------------------------------------------
# joint network
# ---------------------------------------------------------------------------


def init_joint(rng: np.random.Generator, d_audio: int, d_label: int, d_joint: int, vocab_size: int) -> dict:
    from .nn import uniform_param

    return {
        "W_f": uniform_param(rng, (d_audio, d_joint), d_audio),
        "b_f": uniform_param(rng, (d_joint,), d_audio),
        "W_g": uniform_param(rng, (d_label, d_joint), d_label),
        "W_out": uniform_param(rng, (d_joint, vocab_size + 1), d_joint),
        "b_out": uniform_param(rng, (vocab_size + 1,), d_joint),
    }


def joint_compute(f, g, params: dict) -> Tensor:
    """logits[..., t, u, :] = W_out tanh(W_f f_t + b_f + W_g g_u) + b_out.

    ``f`` is [..., T, D_audio] and ``g`` is [..., U+1, D_label]; each side is
    projected once and the two are combined additively.
    """
    f, g = as_tensor(f), as_tensor(g)
    fp = linear(f, params["W_f"], params["b_f"])
    gp = linear(g, params["W_g"])
    fp = reshape(fp, fp.shape[:-1] + (1, fp.shape[-1]))
    gp = reshape(gp, gp.shape[:-2] + (1,) + gp.shape[-2:])
    return linear(tanh(add(fp, gp)), params["W_out"], params["b_out"])


# ---------------------------------------------------------------------------
# log-domain kernels (batched)
# ---------------------------------------------------------------------------


def _log_softmax(x: np.ndarray) -> np.ndarray:
    s = x - x.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _prepare(logits, labels, T_lens=None, U_lens=None):
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=DTYPE)
    if z.ndim != 4:
        raise ValueError(f"expected batched logits [B, T, U+1, K], got {z.shape}")
    B, T, U1, K = z.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(B, -1)
    T_lens = np.full(B, T, dtype=np.int64) if T_lens is None else np.asarray(T_lens, dtype=np.int64)
    U_lens = np.full(B, labels.shape[1], dtype=np.int64) if U_lens is None else np.asarray(U_lens, dtype=np.int64)
    if np.any(T_lens < 1):
        raise InfeasibleAlignmentError("transducer alignment needs at least one acoustic frame")
    if np.any(T_lens > T) or np.any(U_lens > U1 - 1) or np.any(U_lens < 0):
        raise ValueError(f"lengths exceed lattice shape {z.shape}")
    for b in range(B):
        y = labels[b, : U_lens[b]]
        if y.size and (y.min() < 0 or y.max() >= K - 1):
            raise ValueError(f"label out of vocabulary [0, {K - 1}) (blank excluded): {y.tolist()}")
    lab = np.zeros((B, max(U1 - 1, 0)), dtype=np.int64)
    for b in range(B):
        lab[b, : U_lens[b]] = labels[b, : U_lens[b]]
    lp = _log_softmax(z)
    blank = lp[..., K - 1]
    emit = np.take_along_axis(lp[:, :, : U1 - 1, :], lab[:, None, :, None], axis=-1)[..., 0]
    return lp, blank, emit, lab, T_lens, U_lens


def _alpha(blank: np.ndarray, emit: np.ndarray) -> np.ndarray:
    B, T, U1 = blank.shape
    alpha = np.empty((B, T, U1), dtype=DTYPE)
    E = np.zeros((B, T, U1), dtype=DTYPE)
    np.cumsum(emit, axis=2, out=E[:, :, 1:])
    start = np.full((B, U1), NEG_INF)
    start[:, 0] = 0.0
    for t in range(T):
        a = start if t == 0 else alpha[:, t - 1] + blank[:, t - 1]
        alpha[:, t] = E[:, t] + np.logaddexp.accumulate(a - E[:, t], axis=1)
    return alpha


def _beta(blank: np.ndarray, emit: np.ndarray, T_lens, U_lens) -> np.ndarray:
    """Extended backward variables [B, T+1, U+1]; row T_b holds the virtual
    post-termination state (log 1 at U_b)."""
    B, T, U1 = blank.shape
    beta = np.full((B, T + 1, U1), NEG_INF)
    beta[np.arange(B), T_lens, U_lens] = 0.0
    R = np.zeros((B, T, U1), dtype=DTYPE)
    np.cumsum(emit, axis=2, out=R[:, :, 1:])
    for t in range(T - 1, -1, -1):
        bb = beta[:, t + 1] + blank[:, t] + R[:, t]
        acc = np.logaddexp.accumulate(bb[:, ::-1], axis=1)[:, ::-1]
        beta[:, t] = acc - R[:, t]
        ends = np.nonzero(T_lens == t)[0]
        if ends.size:
            beta[ends, t] = NEG_INF
            beta[ends, t, U_lens[ends]] = 0.0
    return beta


def _batch_log_prob(blank, alpha, T_lens, U_lens) -> np.ndarray:
    idx = np.arange(blank.shape[0])
    return alpha[idx, T_lens - 1, U_lens] + blank[idx, T_lens - 1, U_lens]


def rnnt_batch_forward(logits, labels, T_lens=None, U_lens=None):
    """Return (log_alpha [B,T,U+1], log P [B]) for padded batched lattices."""
    _, blank, emit, _, T_lens, U_lens = _prepare(logits, labels, T_lens, U_lens)
    alpha = _alpha(blank, emit)
    return alpha, _batch_log_prob(blank, alpha, T_lens, U_lens)


def rnnt_batch_grad(logits, labels, T_lens=None, U_lens=None):
    """Return (loss [B], d loss_b / d logits_b [B,T,U+1,K])."""
    lp, blank, emit, lab, T_lens, U_lens = _prepare(logits, labels, T_lens, U_lens)
    alpha = _alpha(blank, emit)
    beta = _beta(blank, emit, T_lens, U_lens)
    logp = _batch_log_prob(blank, alpha, T_lens, U_lens)
    B, T, U1, K = lp.shape
    # mask alpha outside each utterance so garbage rows never contribute
    valid = (np.arange(T)[None, :, None] < T_lens[:, None, None]) & (
        np.arange(U1)[None, None, :] <= U_lens[:, None, None]
    )
    a = np.where(valid, alpha, NEG_INF)
    lpn = logp[:, None, None]
    with np.errstate(invalid="ignore"):
        occ = np.exp(a + beta[:, :T] - lpn)
        g_blank = np.exp(a + blank + beta[:, 1:] - lpn)
        g_emit = np.exp(a[:, :, :-1] + emit + beta[:, :T, 1:] - lpn)
    occ = np.nan_to_num(occ)
    g_blank = np.nan_to_num(g_blank)
    g_emit = np.nan_to_num(g_emit)
    glp = np.zeros_like(lp)
    glp[..., K - 1] = -g_blank
    if U1 > 1:
        # each (t, u) has exactly one label target, distinct from blank
        idx = np.broadcast_to(lab[:, None, :, None], (B, T, U1 - 1, 1))
        np.put_along_axis(glp[:, :, : U1 - 1, :], idx, -g_emit[..., None], axis=-1)
    grad = glp + np.exp(lp) * occ[..., None]
    return -logp, grad


def rnnt_loss_batch(logits: Tensor, labels, T_lens=None, U_lens=None) -> Tensor:
    """Differentiable per-utterance losses [B] for a padded lattice batch."""
    logits = as_tensor(logits)
    loss, grad = rnnt_batch_grad(logits, labels, T_lens, U_lens)
    LOSS_CALLS.count += logits.shape[0]
    return Tensor.from_op(loss, (logits,), lambda g: (g[:, None, None, None] * grad,), "rnnt_loss")


# ---------------------------------------------------------------------------
# single-utterance API
# ---------------------------------------------------------------------------


def _single(lattice):
    if isinstance(lattice, JointLattice):
        lattice = lattice.logits
    z = lattice.data if isinstance(lattice, Tensor) else np.asarray(lattice, dtype=DTYPE)
    if z.ndim != 3:
        raise ValueError(f"expected lattice [T, U+1, V+1], got {z.shape}")
    if z.shape[0] == 0:
        raise InfeasibleAlignmentError("transducer alignment needs at least one acoustic frame")
    return z


def _check_labels(z: np.ndarray, y: Sequence[int]) -> np.ndarray:
    y = np.asarray(list(y), dtype=np.int64)
    if len(y) != z.shape[1] - 1:
        raise ValueError(f"label length {len(y)} does not match lattice U+1={z.shape[1]}")
    return y


def rnnt_forward(lattice, y: Sequence[int]) -> tuple[np.ndarray, float]:
    """Return (log_alpha [T, U+1], log P(Y|X)).  log_alpha[0, 0] = 0."""
    z = _single(lattice)
    y = _check_labels(z, y)
    alpha, logp = rnnt_batch_forward(z[None], y[None])
    return alpha[0], float(logp[0])


def rnnt_backward_vars(lattice, y: Sequence[int]) -> np.ndarray:
    """Return log_beta [T, U+1]; log_beta[T-1, U] = log P(blank | T, U) and
    log_beta[0, 0] = log P(Y|X)."""
    z = _single(lattice)
    y = _check_labels(z, y)
    _, blank, emit, _, T_lens, U_lens = _prepare(z[None], y[None])
    return _beta(blank, emit, T_lens, U_lens)[0, :-1]


def rnnt_loss(lattice, y: Sequence[int]) -> Tensor:
    """-log P(Y|X) as a scalar tensor, differentiable w.r.t. tensor logits."""
    if isinstance(lattice, JointLattice):
        lattice = lattice.logits
    logits = as_tensor(lattice)
    z = _single(logits)
    y = _check_labels(z, y)
    out = rnnt_loss_batch(reshape(logits, (1,) + z.shape), y[None])
    return reshape(out, ())


def rnnt_grad(lattice, y: Sequence[int]) -> np.ndarray:
    """Exact gradient of the loss w.r.t. raw logits, [T, U+1, V+1]."""
    z = _single(lattice)
    y = _check_labels(z, y)
    _, grad = rnnt_batch_grad(z[None], y[None])
    return grad[0]


ORACLE_MAX_STEPS = 12


def rnnt_loss_oracle(lattice, y: Sequence[int]) -> float:
    """Brute-force loss: enumerate every monotone alignment path explicitly.

    A path interleaves T-1 blank moves with U label moves and ends with the
    terminal blank at (T-1, U).
    """
    z = _single(lattice)
    y = _check_labels(z, y)
    T, U1, K = z.shape
    U = U1 - 1
    if T + U > ORACLE_MAX_STEPS:
        raise ValueError(f"oracle guard: T+U={T + U} exceeds {ORACLE_MAX_STEPS}")
    lp = _log_softmax(z)
    blank = K - 1
    path_scores = []
    for label_positions in itertools.combinations(range(T - 1 + U), U):
        t = u = 0
        score = 0.0
        chosen = set(label_positions)
        for step in range(T - 1 + U):
            if step in chosen:
                score += lp[t, u, y[u]]
                u += 1
            else:
                score += lp[t, u, blank]
                t += 1
        score += lp[T - 1, U, blank]
        path_scores.append(score)
    m = max(path_scores)
    return -(m + math.log(sum(math.exp(s - m) for s in path_scores)))


def count_paths(T: int, U: int) -> int:
    """Number of alignment paths in a T x (U+1) lattice."""
    return math.comb(T + U - 1, U)
