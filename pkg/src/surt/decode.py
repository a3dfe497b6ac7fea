"""Streaming time-synchronous greedy decoding of transducer output streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .functional import lstm_state_step


@dataclass
class Hypothesis:
    """Tokens emitted so far, the encoder frame each was emitted at, and the
    cumulative log-probability of the greedy path (blanks included)."""

    tokens: list[int] = field(default_factory=list)
    frames: list[int] = field(default_factory=list)
    score: float = 0.0

    def copy(self) -> "Hypothesis":
        return Hypothesis(list(self.tokens), list(self.frames), self.score)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max()
    return z - (m + np.log(np.exp(z - m).sum()))


class StreamingGreedyDecoder:
    """Greedy decoder for one output stream whose state persists across
    :meth:`push` calls, so frames may be fed in arbitrary chunks.

    Per frame the best symbol is taken repeatedly: a token is emitted and the
    label encoder advanced, a blank moves on to the next frame.  At most
    ``max_symbols_per_frame`` tokens are emitted per frame; hitting the cap
    forces a time step and is counted in ``incidents``.  When blank ties the
    best token, blank wins.
    """

    def __init__(self, embed: np.ndarray, label_layers: Sequence[dict], joint: dict, vocab_size: int, max_symbols_per_frame: int = 5):
        if max_symbols_per_frame < 1:
            raise ValueError("max_symbols_per_frame must be at least 1")
        self.embed = np.asarray(embed)
        self.label_layers = list(label_layers)
        self.W_f = joint["W_f"].data
        self.b_f = joint["b_f"].data
        self.W_g = joint["W_g"].data
        self.W_out = joint["W_out"].data
        self.b_out = joint["b_out"].data
        self.vocab_size = vocab_size
        self.blank = vocab_size
        self.max_symbols = max_symbols_per_frame
        self.reset()

    @classmethod
    def from_model(cls, model, max_symbols_per_frame: int = 5) -> "StreamingGreedyDecoder":
        t = model.tree
        return cls(t["embed"].data, t["label"], t["joint"], model.cfg.vocab_size, max_symbols_per_frame)

    def reset(self) -> None:
        self.hyp = Hypothesis()
        self.frame = 0
        self.incidents = 0
        self.state = [
            (np.zeros(p["W_h"].shape[0]), np.zeros(p["W_h"].shape[0])) for p in self.label_layers
        ]
        self._advance(self.vocab_size)  # start symbol

    def _advance(self, token: int) -> None:
        x = self.embed[token]
        new = []
        for p, (h, c) in zip(self.label_layers, self.state):
            h, c = lstm_state_step(x, h, c, p)
            new.append((h, c))
            x = h
        self.state = new
        self.g_proj = x @ self.W_g

    def push(self, frames: np.ndarray) -> Hypothesis:
        """Consume encoder frames [N, E]; returns the running hypothesis."""
        frames = np.asarray(frames, dtype=float)
        if frames.ndim == 1:
            frames = frames[None, :]
        for f in frames:
            fp = f @ self.W_f + self.b_f
            emitted = 0
            while True:
                logp = _log_softmax(np.tanh(fp + self.g_proj) @ self.W_out + self.b_out)
                best = int(np.argmax(logp[: self.blank]))
                if logp[self.blank] >= logp[best]:
                    self.hyp.score += float(logp[self.blank])
                    break
                if emitted == self.max_symbols:
                    self.incidents += 1
                    break
                self.hyp.score += float(logp[best])
                self.hyp.tokens.append(best)
                self.hyp.frames.append(self.frame)
                self._advance(best)
                emitted += 1
            self.frame += 1
        return self.hyp


def greedy_decode(stream_frames: Sequence[np.ndarray], model, max_symbols_per_frame: int = 5) -> tuple[list[Hypothesis], int]:
    """Decode each stream's encoder frames independently; returns the
    hypotheses and the total number of symbol-cap incidents."""
    hyps, incidents = [], 0
    for frames in stream_frames:
        dec = StreamingGreedyDecoder.from_model(model, max_symbols_per_frame)
        hyps.append(dec.push(frames).copy())
        incidents += dec.incidents
    return hyps, incidents
