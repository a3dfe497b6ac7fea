"""Parameter initialisation and the layer stacks used by the SURT model."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Tensor, mul


def uniform_param(rng: np.random.Generator, shape, fan_in: int, name: str | None = None) -> Tensor:
    """U[-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    r = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-r, r, size=shape), requires_grad=True, name=name)


def init_lstm(rng, d_in: int, hidden: int) -> dict:
    return {
        "W_x": uniform_param(rng, (d_in, 4 * hidden), hidden),
        "W_h": uniform_param(rng, (hidden, 4 * hidden), hidden),
        "b": uniform_param(rng, (4 * hidden,), hidden),
    }


def init_lstm_stack(rng, d_in: int, hidden: int, layers: int) -> list[dict]:
    return [init_lstm(rng, d_in if i == 0 else hidden, hidden) for i in range(layers)]


def lstm_stack(x: Tensor, layers: list[dict], dropout: float = 0.0, rng=None) -> Tensor:
    for i, p in enumerate(layers):
        x = F.lstm(x, p)
        if dropout > 0 and rng is not None and i < len(layers) - 1:
            x = F.dropout(x, dropout, rng)
    return x


def cnn_out_freq(n_freq: int, n_pools: int, window: int, stride: int) -> int:
    for _ in range(n_pools):
        n_freq = (n_freq - window) // stride + 1
    return n_freq


def he_uniform_param(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """U[-sqrt(6/fan_in), sqrt(6/fan_in)], variance-preserving under ReLU."""
    r = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-r, r, size=shape), requires_grad=True)


def init_cnn(rng, in_ch: int, channels: list[int], n_freq: int, pool_after: list[int], window: int, stride: int, d_out: int) -> dict:
    convs = []
    c_prev = in_ch
    for c in channels:
        convs.append({"k": he_uniform_param(rng, (c_prev, c, 3, 3), c_prev * 9), "b": Tensor(np.zeros(c), requires_grad=True)})
        c_prev = c
    f_last = cnn_out_freq(n_freq, len(pool_after), window, stride)
    if f_last < 1:
        raise F.ConfigError(f"frequency extent {n_freq} too small for {len(pool_after)} pools of window {window}")
    d_in = c_prev * f_last
    return {"convs": convs, "W": uniform_param(rng, (d_in, d_out), d_in), "b": uniform_param(rng, (d_out,), d_in)}


def cnn_forward(
    x: Tensor,
    params: dict,
    lookaheads: list[int],
    pool_after: list[int],
    window: int,
    stride: int,
    time_mask: np.ndarray | None = None,
) -> Tensor:
    """Table-I style CNN: conv+ReLU layers with frequency max-pools after the
    layers listed in ``pool_after`` (1-based), then a per-frame linear map.

    x is [B, C, T, F]; the result is [B, T, D].  Activations are kept
    channels-last internally.  ``time_mask`` [B, T] zeroes padded frames
    after every conv so batched and single-utterance outputs agree exactly.
    """
    x = x.transpose(0, 2, 3, 1)
    m4 = None if time_mask is None else time_mask[:, :, None, None]
    for i, (p, la) in enumerate(zip(params["convs"], lookaheads), start=1):
        x = F.conv2d_cl(x, p["k"], p["b"], F.PadSpec.causal(3, la)).relu()
        if m4 is not None:
            x = mul(x, m4)
        if i in pool_after:
            x = F.maxpool2d(x, window, stride, axis=-2)
    B, T, Fq, C = x.shape
    # flatten in (channel, frequency) order
    x = x.transpose(0, 1, 3, 2).reshape(B, T, C * Fq)
    return F.linear(x, params["W"], params["b"])
