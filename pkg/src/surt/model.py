"""The SURT network: unmixing front-end, shared RNN-T encoders and joint.

Two unmixing variants are provided.  The speaker-differentiator variant runs
two LSTM stacks with separate parameters on the MixEnc output; the mask
variant multiplies the MixEnc output by a sigmoid mask M and its complement.
Both streams then go through one shared audio encoder, one shared label
encoder and one joint network.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import functional as F
from .functional import ConfigError
from .nn import cnn_forward, init_cnn, init_lstm_stack, lstm_stack, uniform_param
from .tensor import Tensor, as_tensor, concat, getitem, log1p, mul, no_grad, sigmoid
from .transducer import init_joint, joint_compute, rnnt_loss_batch

UNMIX_KINDS = ("sd", "mask", "none")


@dataclass
class ModelConfig:
    unmix: str = "mask"
    mixenc: bool = True
    in_channels: int = 3
    n_freq: int = 257
    conv_channels: list[int] = field(default_factory=lambda: [8, 8, 16, 16])
    conv_lookahead: list[int] = field(default_factory=lambda: [1, 1, 1, 2])
    pool_after: list[int] = field(default_factory=lambda: [2, 3, 4])
    pool_window: int = 3
    pool_stride: int = 3
    feat_dim: int = 128
    sd_layers: int = 1
    sd_hidden: int = 32
    enc_layers: int = 2
    enc_hidden: int = 32
    time_reduction: int = 2
    label_layers: int = 1
    label_hidden: int = 32
    embed_dim: int = 16
    joint_dim: int = 32
    vocab_size: int = 8
    lookahead_budget: int = 5
    frame_ms: float = 30.0
    latency_ms: float = 150.0
    input_compress: str = "log1p"
    dropout: float = 0.0
    init_seed: int = 0

    def validate(self) -> None:
        if self.unmix not in UNMIX_KINDS:
            raise ConfigError(f"unmix must be one of {UNMIX_KINDS}, got {self.unmix!r}")
        if self.time_reduction < 1:
            raise ConfigError("time_reduction must be >= 1")
        if len(self.conv_lookahead) != len(self.conv_channels):
            raise ConfigError("conv_lookahead needs one entry per conv layer")
        if abs(self.lookahead_budget * self.frame_ms - self.latency_ms) > 1e-9:
            raise ConfigError(
                f"lookahead_budget {self.lookahead_budget} x frame_ms {self.frame_ms} != latency_ms {self.latency_ms}"
            )
        if self.input_compress not in ("log1p", "none"):
            raise ConfigError(f"unknown input_compress {self.input_compress!r}")
        from .nn import cnn_out_freq

        if cnn_out_freq(self.n_freq, len(self.pool_after), self.pool_window, self.pool_stride) < 1:
            raise ConfigError(f"frequency extent {self.n_freq} too small for the pooling stack")

    # -- text format ------------------------------------------------------
    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            default = getattr(cls(), key)
            values[key] = _parse_value(val, default)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Path | str) -> "ModelConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                s = "on" if v else "off"
            elif isinstance(v, list):
                s = ",".join(str(x) for x in v)
            else:
                s = str(v)
            lines.append(f"{f.name} = {s}")
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


def _parse_value(val: str, default):
    if isinstance(default, bool):
        low = val.lower()
        if low in ("on", "true", "yes", "1"):
            return True
        if low in ("off", "false", "no", "0"):
            return False
        raise ConfigError(f"bad boolean {val!r}")
    if isinstance(default, int):
        return int(val)
    if isinstance(default, float):
        return float(val)
    if isinstance(default, list):
        return [int(x) for x in val.split(",") if x.strip()] if val.strip() else []
    return val


def flatten_params(tree, prefix: str = "") -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    if isinstance(tree, Tensor):
        out[prefix] = tree
    elif isinstance(tree, dict):
        for k, v in tree.items():
            out.update(flatten_params(v, f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(tree, (list, tuple)):
        for i, v in enumerate(tree):
            out.update(flatten_params(v, f"{prefix}.{i}" if prefix else str(i)))
    return out


def latency_budget_check(cfg: ModelConfig) -> float:
    """Total algorithmic latency in ms.  Each path through the front-end adds
    the lookahead of its conv layers; LSTMs and time reduction are causal.
    Raises ConfigError naming the first layer that exceeds the budget."""
    cfg.validate()
    branches = []
    if cfg.mixenc:
        branches.append("mixenc")
    if cfg.unmix == "mask":
        branches.append("maskenc")
    worst = 0
    for branch in branches:
        total = 0
        for i, la in enumerate(cfg.conv_lookahead):
            if la < 0 or la > 2:
                raise ConfigError(f"{branch}.conv{i}: lookahead {la} not realisable with a 3-tap kernel")
            total += la
            if total > cfg.lookahead_budget:
                raise ConfigError(
                    f"{branch}.conv{i}: cumulative lookahead {total} frames exceeds budget {cfg.lookahead_budget}"
                )
        worst = max(worst, total)
    return worst * cfg.frame_ms


def lookahead_frames(cfg: ModelConfig) -> int:
    return int(round(latency_budget_check(cfg) / cfg.frame_ms))


class SURTModel:
    """Parameters plus forward computations.  ``unmix='none'`` gives the
    single-talker transducer (MixEnc followed directly by the encoders)."""

    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
        self.dropout_rng = np.random.default_rng(rng.integers(2**63))
        flat_in = cfg.in_channels * cfg.n_freq
        cnn = dict(
            in_ch=cfg.in_channels,
            channels=cfg.conv_channels,
            n_freq=cfg.n_freq,
            pool_after=cfg.pool_after,
            window=cfg.pool_window,
            stride=cfg.pool_stride,
        )
        tree: dict = {}
        if cfg.mixenc:
            tree["mixenc"] = init_cnn(rng, d_out=cfg.feat_dim, **cnn)
            mix_dim = cfg.feat_dim
        else:
            mix_dim = flat_in
        if cfg.unmix == "sd":
            tree["sd1"] = init_lstm_stack(rng, mix_dim, cfg.sd_hidden, cfg.sd_layers)
            tree["sd2"] = init_lstm_stack(rng, mix_dim, cfg.sd_hidden, cfg.sd_layers)
            stream_dim = cfg.sd_hidden
        elif cfg.unmix == "mask":
            tree["maskenc"] = init_cnn(rng, d_out=mix_dim, **cnn)
            stream_dim = mix_dim
        else:
            stream_dim = mix_dim
        red = cfg.time_reduction * stream_dim
        tree["reduce"] = {"W": uniform_param(rng, (red, cfg.enc_hidden), red), "b": uniform_param(rng, (cfg.enc_hidden,), red)}
        tree["encoder"] = init_lstm_stack(rng, cfg.enc_hidden, cfg.enc_hidden, cfg.enc_layers)
        tree["embed"] = uniform_param(rng, (cfg.vocab_size + 1, cfg.embed_dim), cfg.embed_dim)
        tree["label"] = init_lstm_stack(rng, cfg.embed_dim, cfg.label_hidden, cfg.label_layers)
        tree["joint"] = init_joint(rng, cfg.enc_hidden, cfg.label_hidden, cfg.joint_dim, cfg.vocab_size)
        self.tree = tree
        self.params = flatten_params(tree)
        for name, p in self.params.items():
            p.name = name
        self.training = False

    @property
    def n_streams(self) -> int:
        return 1 if self.cfg.unmix == "none" else 2

    @property
    def sos(self) -> int:
        return self.cfg.vocab_size

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _cnn(self, x: Tensor, which: str, time_mask) -> Tensor:
        c = self.cfg
        return cnn_forward(x, self.tree[which], c.conv_lookahead, c.pool_after, c.pool_window, c.pool_stride, time_mask)

    def _lstms(self, x: Tensor, layers) -> Tensor:
        p = self.cfg.dropout if self.training else 0.0
        return lstm_stack(x, layers, p, self.dropout_rng)

    # -- front-end --------------------------------------------------------
    def prepare_input(self, feats) -> Tensor:
        x = as_tensor(feats)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if self.cfg.input_compress == "log1p":
            x = log1p(x)
        return x

    def mix_encode(self, x: Tensor, time_mask=None) -> Tensor:
        """X [B, 3, T, F] -> X-bar [B, T, D]."""
        if "mixenc" in self.tree:
            return self._cnn(x, "mixenc", time_mask)
        B, C, T, Fq = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, C * Fq)

    def sd_unmix(self, xbar: Tensor) -> list[Tensor]:
        return [self._lstms(xbar, self.tree["sd1"]), self._lstms(xbar, self.tree["sd2"])]

    def mask_logits(self, x: Tensor, time_mask=None) -> Tensor:
        return self._cnn(x, "maskenc", time_mask)

    def mask_unmix(self, x: Tensor, xbar: Tensor, time_mask=None) -> tuple[list[Tensor], Tensor]:
        m = sigmoid(self.mask_logits(x, time_mask))
        if m.shape != xbar.shape:
            raise F.DimensionError(f"mask shape {m.shape} does not match mixture encoding {xbar.shape}")
        return [mul(m, xbar), mul(1.0 - m, xbar)], m

    def unmix(self, x: Tensor, time_mask=None) -> dict:
        """Return {'xbar', 'streams': [H_1, ...], 'mask'} for input features."""
        xbar = self.mix_encode(x, time_mask)
        out = {"xbar": xbar, "mask": None}
        if self.cfg.unmix == "sd":
            out["streams"] = self.sd_unmix(xbar)
        elif self.cfg.unmix == "mask":
            out["streams"], out["mask"] = self.mask_unmix(x, xbar, time_mask)
        else:
            out["streams"] = [xbar]
        return out

    # -- shared RNN-T encoders -------------------------------------------
    def audio_encode(self, H: Tensor, time_mask=None) -> Tensor:
        """H [N, T', D] -> f [N, ceil(T'/r), E]; padded frames are zeroed
        before time reduction."""
        if time_mask is not None:
            H = mul(H, time_mask[:, :, None])
        z = F.time_reduce(H, self.cfg.time_reduction)
        z = F.linear(z, self.tree["reduce"]["W"], self.tree["reduce"]["b"])
        return self._lstms(z, self.tree["encoder"])

    def label_encode(self, labels: Sequence[Sequence[int]]) -> tuple[Tensor, np.ndarray]:
        """Start symbol followed by each label sequence -> g [N, U_max+1, L]."""
        V = self.cfg.vocab_size
        U = np.array([len(y) for y in labels], dtype=np.int64)
        ids = np.full((len(labels), int(U.max(initial=0)) + 1), self.sos, dtype=np.int64)
        for n, y in enumerate(labels):
            if any(t < 0 or t >= V for t in y):
                raise ValueError(f"token out of vocabulary [0, {V}): {list(y)}")
            ids[n, 1 : 1 + len(y)] = y
        emb = F.embedding(self.tree["embed"], ids)
        return self._lstms(emb, self.tree["label"]), U

    def joint(self, f, g) -> Tensor:
        return joint_compute(f, g, self.tree["joint"])

    # -- full forward -----------------------------------------------------
    def encode(self, feats, lengths=None) -> dict:
        """Run the acoustic side for a padded batch.

        Returns a dict with ``f`` [S*B, T'', E] (stream-major), ``f_lens``
        [B], and the unmixing outputs.
        """
        x = self.prepare_input(feats)
        B, _, T, _ = x.shape
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        time_mask = (np.arange(T)[None, :] < lengths[:, None]).astype(float)
        um = self.unmix(x, time_mask)
        S = len(um["streams"])
        H = um["streams"][0] if S == 1 else concat(um["streams"], axis=0)
        f = self.audio_encode(H, np.tile(time_mask, (S, 1)))
        r = self.cfg.time_reduction
        um.update(f=f, f_lens=-(-lengths // r), lengths=lengths, n_streams=S, batch=B)
        return um

    def surt_forward(self, feats, labels: Sequence[Sequence[int]]) -> list[Tensor]:
        """Single utterance: stream i scored against labels[i]; returns one
        lattice [T'', U_i+1, V+1] per stream."""
        enc = self.encode(feats)
        out = []
        for i, y in enumerate(labels):
            g, _ = self.label_encode([y])
            out.append(self.joint(enc["f"][i], g[0]))
        return out

    def pair_losses(self, enc: dict, labels: Sequence[Sequence[Sequence[int]]], pairs: Sequence[tuple[int, int]]) -> Tensor:
        """Transducer losses [B, P] for stream/reference pairs (i, j).

        ``labels[b][j]`` is reference j of batch item b.
        """
        B = enc["batch"]
        S = len(labels[0])
        flat_labels = [labels[b][j] for j in range(S) for b in range(B)]
        g, U = self.label_encode(flat_labels)
        f_idx = np.array([i * B + b for i, _ in pairs for b in range(B)])
        g_idx = np.array([j * B + b for _, j in pairs for b in range(B)])
        lattice = self.joint(getitem(enc["f"], f_idx), getitem(g, g_idx))
        U_sel = U[g_idx]
        lab = np.zeros((len(g_idx), max(int(U.max(initial=0)), 0)), dtype=np.int64)
        for n, gi in enumerate(g_idx):
            y = flat_labels[gi]
            lab[n, : len(y)] = y
        T_sel = np.tile(enc["f_lens"], len(pairs))
        losses = rnnt_loss_batch(lattice, lab, T_sel, U_sel)
        return losses.reshape(len(pairs), B).transpose(1, 0)

    def rnnt_context(self):
        """Pair-loss callable (H, y) -> loss for the single-instance
        multi-talker API; stream encodings are cached per H."""
        cache: dict[int, Tensor] = {}

        def ctx(H: Tensor, y: Sequence[int]) -> Tensor:
            key = id(H)
            if key not in cache:
                cache[key] = self.audio_encode(H.reshape((1,) + H.shape))
            f = cache[key]
            g, U = self.label_encode([y])
            lattice = self.joint(f, g)
            lab = np.asarray([list(y)], dtype=np.int64).reshape(1, -1)
            return rnnt_loss_batch(lattice, lab).reshape(())

        return ctx

    # -- utilities --------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for k, p in self.params.items():
            if arrays[k].shape != p.data.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arrays[k].shape} != model shape {p.data.shape}")
            p.data[...] = arrays[k]

    def infer_f(self, feats, lengths=None) -> tuple[np.ndarray, np.ndarray]:
        """Gradient-free encoder outputs [S, B, T'', E] and lengths [B]."""
        with no_grad():
            enc = self.encode(feats, lengths)
        S, B = enc["n_streams"], enc["batch"]
        f = enc["f"].data.reshape((S, B) + enc["f"].shape[1:])
        return f, enc["f_lens"]
