"""Neural-network operations built on :mod:`surt.tensor`.

The convolution, pooling and LSTM sequence ops are fused: each is a single
graph node with a hand-written vector-Jacobian product, which keeps graph
size independent of the number of time steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, DimensionError, Tensor, _sigmoid, add, as_tensor, matmul, pad, reshape

__all__ = [
    "ConfigError",
    "PadSpec",
    "linear",
    "conv2d",
    "maxpool2d",
    "lstm_step",
    "lstm",
    "embedding",
    "time_reduce",
    "dropout",
]


class ConfigError(ValueError):
    """Invalid model or layer configuration."""


def linear(x, W: Tensor, b: Tensor | None = None) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {W.shape}")
    y = matmul(x, W)
    if b is not None:
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias shape {b.shape} incompatible with weight shape {W.shape}")
        y = add(y, b)
    return y


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PadSpec:
    """Padding of a 2-D convolution over (time, frequency).

    ``past + future`` must equal ``kernel_time - 1`` so the time extent is
    preserved; ``future`` is the number of future frames the output at frame
    t depends on.
    """

    past: int = 1
    future: int = 1
    freq: int = 1

    @classmethod
    def causal(cls, kernel_time: int = 3, lookahead: int = 0, freq: int = 1) -> "PadSpec":
        if not 0 <= lookahead <= kernel_time - 1:
            raise ConfigError(f"lookahead {lookahead} not realisable with time kernel {kernel_time}")
        return cls(past=kernel_time - 1 - lookahead, future=lookahead, freq=freq)


def conv2d(
    x: Tensor,
    k: Tensor,
    b: Tensor | None = None,
    pad_spec: PadSpec = PadSpec(),
    max_lookahead: int | None = None,
) -> Tensor:
    """Cross-correlation of ``x`` [B, C_in, T, F] (or [C_in, T, F]) with
    kernel ``k`` [C_in, C_out, kT, kF]."""
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4) or k.ndim != 4 or x.shape[-3] != k.shape[0]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {k.shape}")
    xt = x.transpose(1, 2, 0) if unbatched else x.transpose(0, 2, 3, 1)
    if unbatched:
        xt = xt.reshape((1,) + xt.shape)
    y = conv2d_cl(xt, k, b, pad_spec, max_lookahead)
    return y[0].transpose(2, 0, 1) if unbatched else y.transpose(0, 3, 1, 2)


def conv2d_cl(
    x: Tensor,
    k: Tensor,
    b: Tensor | None = None,
    pad_spec: PadSpec = PadSpec(),
    max_lookahead: int | None = None,
) -> Tensor:
    """Channels-last convolution: x [B, T, F, C_in] -> [B, T', F', C_out].

    Evaluated as a single im2col matrix product.
    """
    if max_lookahead is not None and pad_spec.future > max_lookahead:
        raise ConfigError(
            f"conv2d lookahead {pad_spec.future} exceeds latency budget {max_lookahead}"
        )
    xd, kd = x.data, k.data
    if xd.ndim != 4 or kd.ndim != 4 or xd.shape[3] != kd.shape[0]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {k.shape}")
    B, T, F, C_in = xd.shape
    _, C_out, kT, kF = kd.shape
    pt = (pad_spec.past, pad_spec.future)
    pf = (pad_spec.freq, pad_spec.freq)
    Tp, Fp = T + sum(pt), F + sum(pf)
    if kT > Tp or kF > Fp:
        raise DimensionError(f"conv2d: kernel {kd.shape[2:]} larger than padded input {(Tp, Fp)}")
    To, Fo = Tp - kT + 1, Fp - kF + 1
    xp = np.pad(xd, ((0, 0), pt, pf, (0, 0)))
    # im2col: rows are output positions, columns are (kT, kF, C_in)
    cols = sliding_window_view(xp, (kT, kF), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = np.ascontiguousarray(cols).reshape(B * To * Fo, kT * kF * C_in)
    kmat = kd.transpose(2, 3, 0, 1).reshape(kT * kF * C_in, C_out)
    y = (cols @ kmat).reshape(B, To, Fo, C_out)
    if b is not None:
        y += b.data
    need_x = x.requires_grad

    def vjp(g):
        g2 = g.reshape(-1, C_out)
        gk = (cols.T @ g2).reshape(kT, kF, C_in, C_out).transpose(2, 3, 0, 1)
        gx = None
        if need_x:
            # transposed convolution: im2col over the zero-padded gradient
            gp = np.pad(g, ((0, 0), (kT - 1, kT - 1), (kF - 1, kF - 1), (0, 0)))
            gp = gp[:, pt[0] : pt[0] + T + kT - 1, pf[0] : pf[0] + F + kF - 1, :]
            gcols = sliding_window_view(gp, (kT, kF), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
            gcols = np.ascontiguousarray(gcols).reshape(B * T * F, kT * kF * C_out)
            kflip = kd.transpose(2, 3, 1, 0)[::-1, ::-1].reshape(kT * kF * C_out, C_in)
            gx = (gcols @ kflip).reshape(B, T, F, C_in)
        if b is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    parents = (x, k, b) if b is not None else (x, k)
    return Tensor.from_op(y, parents, vjp, "conv2d")


def maxpool2d(x: Tensor, window: int = 3, stride: int = 3, axis: int = -1) -> Tensor:
    """Max pooling along the frequency axis only (the last axis by default;
    ``axis=-2`` for channels-last activations); time is untouched.  Ties
    route the gradient to the lowest index."""
    F = x.shape[axis]
    if window < 1 or window > F:
        raise DimensionError(f"maxpool2d: window {window} does not fit frequency extent {F}")
    xd = np.moveaxis(x.data, axis, -1)
    wins = sliding_window_view(xd, window, axis=-1)[..., ::stride, :]
    arg = wins.argmax(axis=-1)
    y = np.take_along_axis(wins, arg[..., None], axis=-1)[..., 0]
    Fo = y.shape[-1]
    shape = xd.shape

    def vjp(g):
        g = np.moveaxis(g, axis, -1)
        out = np.zeros(shape, dtype=DTYPE)
        for j in range(window):
            out[..., j : j + stride * (Fo - 1) + 1 : stride] += g * (arg == j)
        return (np.moveaxis(out, -1, axis),)

    return Tensor.from_op(np.ascontiguousarray(np.moveaxis(y, -1, axis)), (x,), vjp, "maxpool2d")


# ---------------------------------------------------------------------------
# recurrent
# ---------------------------------------------------------------------------


def lstm_step(x_t, h_prev, c_prev, params: dict) -> tuple[Tensor, Tensor]:
    """One LSTM cell update, composed from primitive ops.

    ``params`` holds ``W_x`` [D, 4H], ``W_h`` [H, 4H], ``b`` [4H]; gates are
    laid out as input, forget, candidate, output.  No peepholes.
    """
    x_t, h_prev, c_prev = as_tensor(x_t), as_tensor(h_prev), as_tensor(c_prev)
    H = params["W_h"].shape[0]
    if h_prev.shape[-1] != H or c_prev.shape[-1] != H or params["W_x"].shape[1] != 4 * H:
        raise DimensionError(
            f"lstm_step: hidden size mismatch h={h_prev.shape} c={c_prev.shape} W_h={params['W_h'].shape}"
        )
    z = linear(x_t, params["W_x"], params["b"]) + matmul(h_prev, params["W_h"])
    i = z[..., 0:H].sigmoid()
    f = z[..., H : 2 * H].sigmoid()
    g = z[..., 2 * H : 3 * H].tanh()
    o = z[..., 3 * H : 4 * H].sigmoid()
    c = f * c_prev + i * g
    h = o * c.tanh()
    return h, c


def _lstm_forward(xd, Wx, Wh, b):
    B, T, _ = xd.shape
    H = Wh.shape[0]
    zx = xd @ Wx + b
    hs = np.zeros((B, T + 1, H), dtype=DTYPE)
    cs = np.zeros((B, T + 1, H), dtype=DTYPE)
    gates = np.empty((B, T, 4 * H), dtype=DTYPE)
    for t in range(T):
        z = zx[:, t] + hs[:, t] @ Wh
        a = gates[:, t]
        a[:, : 2 * H] = _sigmoid(z[:, : 2 * H])
        a[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
        a[:, 3 * H :] = _sigmoid(z[:, 3 * H :])
        cs[:, t + 1] = a[:, H : 2 * H] * cs[:, t] + a[:, :H] * a[:, 2 * H : 3 * H]
        hs[:, t + 1] = a[:, 3 * H :] * np.tanh(cs[:, t + 1])
    return hs, cs, gates


def lstm(x: Tensor, params: dict) -> Tensor:
    """Unidirectional LSTM layer over x [B, T, D] from zero state; returns
    hidden outputs [B, T, H].  Mathematically identical to iterating
    :func:`lstm_step`, but recorded as one node with fused BPTT."""
    Wx, Wh, b = params["W_x"], params["W_h"], params["b"]
    if x.shape[-1] != Wx.shape[0]:
        raise DimensionError(f"lstm: input shape {x.shape} incompatible with W_x {Wx.shape}")
    xd = x.data
    hs, cs, gates = _lstm_forward(xd, Wx.data, Wh.data, b.data)
    B, T, D = xd.shape
    H = Wh.shape[0]

    def vjp(g):
        Whd = Wh.data
        dz = np.empty((B, T, 4 * H), dtype=DTYPE)
        dh_next = np.zeros((B, H), dtype=DTYPE)
        dc_next = np.zeros((B, H), dtype=DTYPE)
        for t in range(T - 1, -1, -1):
            a = gates[:, t]
            i, f, gg, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
            tc = np.tanh(cs[:, t + 1])
            dh = g[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            d = dz[:, t]
            d[:, :H] = dc * gg * i * (1.0 - i)
            d[:, H : 2 * H] = dc * cs[:, t] * f * (1.0 - f)
            d[:, 2 * H : 3 * H] = dc * i * (1.0 - gg * gg)
            d[:, 3 * H :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = d @ Whd.T
        dz2 = dz.reshape(B * T, 4 * H)
        gx = (dz2 @ Wx.data.T).reshape(B, T, D)
        gWx = xd.reshape(B * T, D).T @ dz2
        gWh = hs[:, :T].reshape(B * T, H).T @ dz2
        gb = dz2.sum(axis=0)
        return gx, gWx, gWh, gb

    return Tensor.from_op(hs[:, 1:].copy(), (x, Wx, Wh, b), vjp, "lstm")


def lstm_state_step(x_t: np.ndarray, h: np.ndarray, c: np.ndarray, params: dict):
    """Gradient-free single step on raw arrays, for incremental decoding."""
    H = params["W_h"].shape[0]
    z = x_t @ params["W_x"].data + params["b"].data + h @ params["W_h"].data
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H : 2 * H])
    g = np.tanh(z[..., 2 * H : 3 * H])
    o = _sigmoid(z[..., 3 * H :])
    c = f * c + i * g
    return o * np.tanh(c), c


# ---------------------------------------------------------------------------
# misc
# ---------------------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, ids, g)
        return (out,)

    return Tensor.from_op(table.data[ids], (table,), vjp, "embedding")


def time_reduce(x: Tensor, factor: int = 2) -> Tensor:
    """Concatenate each group of ``factor`` adjacent frames of x [B, T, D];
    the tail is zero-padded so the output has ceil(T / factor) frames."""
    if factor < 1:
        raise ConfigError("time-reduction factor must be >= 1")
    if factor == 1:
        return x
    B, T, D = x.shape
    Tr = -(-T // factor)
    if Tr * factor != T:
        x = pad(x, ((0, 0), (0, Tr * factor - T), (0, 0)))
    return reshape(x, (B, Tr, factor * D))


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep
