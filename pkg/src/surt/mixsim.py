"""Synthetic tone-sequence corpus, overlapped-mixture simulation and the
STFT feature pipeline.

Each token of the toy vocabulary is rendered as a narrowband tone whose
frequency depends on the token and, more finely, on the speaker.  Mixtures
delay the second utterance by d ~ U[tau, nu] seconds, nu being the length of
the first utterance, and sum the two waveforms.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SAMPLE_RATE = 16000
N_FFT = 512
N_BINS = N_FFT // 2 + 1
WIN_MS = 25.0
HOP_MS = 10.0
SPLICE = 3
FRAME_MS = HOP_MS * SPLICE

WAV_MAGIC = b"SURTWAV1"


class SimulationError(ValueError):
    """A mixture cannot be simulated with the requested parameters."""


@dataclass(frozen=True)
class CorpusConfig:
    sample_rate: int = SAMPLE_RATE
    vocab_size: int = 8
    n_speakers: int = 3
    min_dur: float = 0.3
    max_dur: float = 1.5
    token_dur: tuple[float, float] = (0.16, 0.24)
    f_lo: float = 400.0
    token_step: float = 900.0
    speaker_step: float = 150.0
    amplitude: float = 0.5
    noise: float = 0.01
    ramp: float = 0.015

    def tone_frequency(self, token: int, speaker: int) -> float:
        """Tokens sit ``token_step`` apart; each speaker shifts every token by
        a small speaker-specific offset, so token identity survives coarse
        frequency pooling while speakers stay separable at fine resolution."""
        return self.f_lo + token * self.token_step + (speaker % self.n_speakers) * self.speaker_step

    def validate(self) -> None:
        if self.vocab_size < 1:
            raise ValueError("vocabulary must be non-empty")
        if self.speaker_step * (self.n_speakers - 1) >= self.token_step:
            raise ValueError("speaker offsets must stay below the token spacing")
        top = self.tone_frequency(self.vocab_size - 1, self.n_speakers - 1)
        if top >= self.sample_rate / 2:
            raise ValueError(f"highest tone {top} Hz above Nyquist")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        if "token_dur" in d:
            d["token_dur"] = tuple(d["token_dur"])
        return cls(**d)


@dataclass
class Utterance:
    waveform: np.ndarray
    tokens: list[int]
    speaker: int
    sample_rate: int = SAMPLE_RATE
    spec: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return len(self.waveform)

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass
class MixtureSample:
    utt1: Utterance
    utt2: Utterance
    delay_samples: int
    tau: float
    mixed: np.ndarray
    gains: tuple[float, float] = (1.0, 1.0)

    @property
    def sample_rate(self) -> int:
        return self.utt1.sample_rate

    @property
    def delay(self) -> float:
        return self.delay_samples / self.sample_rate

    @property
    def labels(self) -> tuple[list[int], list[int]]:
        return self.utt1.tokens, self.utt2.tokens

    @property
    def starts(self) -> tuple[float, float]:
        return 0.0, self.delay

    @property
    def duration(self) -> float:
        return len(self.mixed) / self.sample_rate


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


def render_utterance(
    tokens: list[int], speaker: int, token_samples: list[int], noise_seed: int, cfg: CorpusConfig
) -> np.ndarray:
    """Deterministic waveform for a token sequence."""
    sr = cfg.sample_rate
    ramp = max(1, int(round(cfg.ramp * sr)))
    pieces = []
    for tok, n in zip(tokens, token_samples):
        t = np.arange(n) / sr
        env = np.ones(n)
        r = min(ramp, n // 2)
        if r > 0:
            edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
            env[:r] = edge
            env[n - r :] = edge[::-1]
        pieces.append(cfg.amplitude * env * np.sin(2 * np.pi * cfg.tone_frequency(tok, speaker) * t))
    wav = np.concatenate(pieces) if pieces else np.zeros(0)
    noise_rng = np.random.default_rng(noise_seed)
    return wav + cfg.noise * noise_rng.standard_normal(len(wav))


def synth_utterance(
    rng: np.random.Generator,
    cfg: CorpusConfig,
    speaker: int | None = None,
    tokens: list[int] | None = None,
    min_dur: float | None = None,
) -> Utterance:
    """Draw a random utterance whose duration lies in [min_dur, max_dur]."""
    cfg.validate()
    sr = cfg.sample_rate
    if speaker is None:
        speaker = int(rng.integers(cfg.n_speakers))
    lo, hi = cfg.token_dur
    if tokens is None:
        lo_dur = max(cfg.min_dur, min_dur or 0.0)
        if lo_dur > cfg.max_dur:
            raise SimulationError(f"minimum duration {lo_dur} exceeds max_dur {cfg.max_dur}")
        target = rng.uniform(lo_dur, cfg.max_dur)
        n_tok = max(1, int(round(target / (0.5 * (lo + hi)))))
        tokens = [int(x) for x in rng.integers(cfg.vocab_size, size=n_tok)]
        total = int(round(target * sr))
        weights = rng.uniform(lo, hi, size=n_tok)
        cuts = np.floor(np.cumsum(weights) / weights.sum() * total).astype(int)
        token_samples = np.diff(np.concatenate([[0], cuts])).tolist()
    else:
        token_samples = [int(round(rng.uniform(lo, hi) * sr)) for _ in tokens]
    noise_seed = int(rng.integers(2**31))
    wav = render_utterance(tokens, speaker, token_samples, noise_seed, cfg)
    spec = {"tokens": list(tokens), "speaker": int(speaker), "token_samples": [int(n) for n in token_samples], "noise_seed": noise_seed}
    return Utterance(wav, list(tokens), int(speaker), sr, spec)


def utterance_from_spec(spec: dict, cfg: CorpusConfig) -> Utterance:
    wav = render_utterance(spec["tokens"], spec["speaker"], spec["token_samples"], spec["noise_seed"], cfg)
    return Utterance(wav, list(spec["tokens"]), int(spec["speaker"]), cfg.sample_rate, dict(spec))


def mix_waveforms(w1: np.ndarray, w2: np.ndarray, delay_samples: int, gains=(1.0, 1.0)) -> np.ndarray:
    n = max(len(w1), delay_samples + len(w2))
    out = np.zeros(n)
    out[: len(w1)] += gains[0] * w1
    out[delay_samples : delay_samples + len(w2)] += gains[1] * w2
    return out


def simulate_mixture(
    utt1: Utterance,
    utt2: Utterance,
    tau: float,
    rng: np.random.Generator,
    gains: tuple[float, float] = (1.0, 1.0),
) -> MixtureSample:
    """Delay ``utt2`` by d ~ U[tau, nu], nu = duration(utt1), and add it to
    ``utt1``.  The delay is quantised to whole samples."""
    if utt1.speaker == utt2.speaker:
        raise SimulationError("mixture sources must come from different speakers")
    if tau < 0:
        raise SimulationError("tau must be non-negative")
    if tau > utt1.duration:
        raise SimulationError(f"tau={tau} exceeds first-utterance length {utt1.duration}")
    sr = utt1.sample_rate
    d = rng.uniform(tau, utt1.duration)
    lo = int(math.ceil(tau * sr - 1e-9))
    delay = int(min(max(round(d * sr), lo), utt1.n_samples))
    mixed = mix_waveforms(utt1.waveform, utt2.waveform, delay, gains)
    return MixtureSample(utt1, utt2, delay, tau, mixed, tuple(gains))


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def stft_features(
    waveform: np.ndarray,
    sample_rate: int = SAMPLE_RATE,
    n_fft: int = N_FFT,
    win_ms: float = WIN_MS,
    hop_ms: float = HOP_MS,
) -> np.ndarray:
    """Magnitude STFT [T10, n_fft/2 + 1] with a Hann window and 10 ms hop."""
    win = int(round(win_ms * sample_rate / 1000))
    hop = int(round(hop_ms * sample_rate / 1000))
    if win > n_fft:
        raise ValueError(f"window {win} longer than FFT size {n_fft}")
    x = np.asarray(waveform, dtype=np.float64)
    if len(x) < win:
        raise ValueError(f"waveform of {len(x)} samples is shorter than one {win}-sample window")
    frames = sliding_window_view(x, win)[::hop]
    return np.abs(np.fft.rfft(frames * np.hanning(win), n=n_fft, axis=-1))


def splice_downsample(feat: np.ndarray, context: int = SPLICE) -> np.ndarray:
    """Stack ``context`` consecutive frames and keep every ``context``-th
    stack: [T10, F] -> [context, ceil(T10/context), F].  Channel c of output
    frame t is input frame context*t + c; the tail is zero-padded."""
    T, F = feat.shape
    T3 = -(-T // context)
    padded = np.zeros((T3 * context, F))
    padded[:T] = feat
    return padded.reshape(T3, context, F).transpose(1, 0, 2).copy()


def unsplice(x: np.ndarray, n_frames: int | None = None) -> np.ndarray:
    C, T3, F = x.shape
    out = x.transpose(1, 0, 2).reshape(T3 * C, F)
    return out if n_frames is None else out[:n_frames]


def features_for(waveform: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Full pipeline: [3, T30, 257] at a 30 ms frame period."""
    return splice_downsample(stft_features(waveform, sample_rate))


def n_feature_frames(n_samples: int, sample_rate: int = SAMPLE_RATE) -> int:
    win = int(round(WIN_MS * sample_rate / 1000))
    hop = int(round(HOP_MS * sample_rate / 1000))
    t10 = 1 + (n_samples - win) // hop
    return -(-t10 // SPLICE)


# ---------------------------------------------------------------------------
# corpora and manifests
# ---------------------------------------------------------------------------


def child_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, sample index)."""
    return np.random.default_rng([int(seed), int(index)])


def make_mixture(seed: int, index: int, tau: float, cfg: CorpusConfig) -> MixtureSample:
    rng = child_rng(seed, index)
    s1 = int(rng.integers(cfg.n_speakers))
    s2 = int((s1 + 1 + rng.integers(cfg.n_speakers - 1)) % cfg.n_speakers)
    # the first utterance must be long enough to admit a delay of tau
    utt1 = synth_utterance(rng, cfg, speaker=s1, min_dur=tau)
    utt2 = synth_utterance(rng, cfg, speaker=s2)
    return simulate_mixture(utt1, utt2, tau, rng)


def mixture_record(sample: MixtureSample, sample_id: str, cfg: CorpusConfig) -> dict:
    return {
        "id": sample_id,
        "synth_spec": {
            "corpus": asdict(cfg),
            "utts": [sample.utt1.spec, sample.utt2.spec],
            "delay_samples": int(sample.delay_samples),
            "gains": [float(g) for g in sample.gains],
        },
        "delay_s": sample.delay,
        "tau": float(sample.tau),
        "speakers": [sample.utt1.speaker, sample.utt2.speaker],
        "transcripts": [list(sample.utt1.tokens), list(sample.utt2.tokens)],
        "starts_s": [0.0, sample.delay],
    }


def single_record(utt: Utterance, sample_id: str, cfg: CorpusConfig) -> dict:
    return {
        "id": sample_id,
        "synth_spec": {"corpus": asdict(cfg), "utts": [utt.spec], "delay_samples": 0, "gains": [1.0]},
        "delay_s": 0.0,
        "tau": 0.0,
        "speakers": [utt.speaker],
        "transcripts": [list(utt.tokens)],
        "starts_s": [0.0],
    }


def simulate_corpus(n: int, tau: float, seed: int, cfg: CorpusConfig, prefix: str = "mix") -> list[dict]:
    return [mixture_record(make_mixture(seed, i, tau, cfg), f"{prefix}-{i:06d}", cfg) for i in range(n)]


def single_talker_corpus(n: int, seed: int, cfg: CorpusConfig, prefix: str = "utt") -> list[dict]:
    out = []
    for i in range(n):
        rng = child_rng(seed, i)
        out.append(single_record(synth_utterance(rng, cfg), f"{prefix}-{i:06d}", cfg))
    return out


def waveform_from_record(rec: dict, root: Path | None = None) -> np.ndarray:
    """Regenerate (or load) the waveform a manifest record describes."""
    if "mixture_path" in rec:
        path = Path(rec["mixture_path"])
        if root is not None and not path.is_absolute():
            path = root / path
        return read_wav(path)
    spec = rec["synth_spec"]
    cfg = CorpusConfig.from_dict(spec["corpus"])
    utts = [utterance_from_spec(u, cfg) for u in spec["utts"]]
    if len(utts) == 1:
        return utts[0].waveform
    return mix_waveforms(utts[0].waveform, utts[1].waveform, spec["delay_samples"], spec["gains"])


def encode_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def write_manifest(path: Path | str, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(encode_record(rec) + "\n")


def read_manifest(path: Path | str) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def iter_manifest(path: Path | str) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def write_wav(path: Path | str, waveform: np.ndarray) -> None:
    data = np.asarray(waveform, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(WAV_MAGIC)
        fh.write(data)


def read_wav(path: Path | str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != WAV_MAGIC:
        raise ValueError(f"{path}: not a SURTWAV1 file")
    if (len(raw) - 8) % 4:
        raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(raw[8:], dtype="<f4").astype(np.float64)

