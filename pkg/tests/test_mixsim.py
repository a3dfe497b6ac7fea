import json

import numpy as np
import pytest

from surt.mixsim import (
    N_BINS,
    CorpusConfig,
    SimulationError,
    Utterance,
    features_for,
    make_mixture,
    mix_waveforms,
    read_manifest,
    read_wav,
    simulate_corpus,
    simulate_mixture,
    single_talker_corpus,
    splice_downsample,
    stft_features,
    synth_utterance,
    unsplice,
    waveform_from_record,
    write_manifest,
    write_wav,
)

CFG = CorpusConfig()


def const_utt(seconds, speaker, sr=16000):
    return Utterance(np.ones(int(seconds * sr)), [0], speaker, sr)


def test_single_token_peaks_in_its_band():
    utt = synth_utterance(np.random.default_rng(0), CFG, speaker=1, tokens=[3])
    spec = stft_features(utt.waveform).mean(0)
    peak_hz = spec.argmax() * CFG.sample_rate / 512
    assert abs(peak_hz - CFG.tone_frequency(3, 1)) < CFG.sample_rate / 512


def test_seeds_give_different_sequences():
    a = synth_utterance(np.random.default_rng(1), CFG)
    b = synth_utterance(np.random.default_rng(2), CFG)
    assert a.tokens != b.tokens


def test_duration_range_and_invariants():
    rng = np.random.default_rng(3)
    for _ in range(50):
        u = synth_utterance(rng, CFG)
        assert CFG.min_dur - 1e-3 <= u.duration <= CFG.max_dur + 1e-3
        assert u.tokens and u.duration == u.n_samples / u.sample_rate


def test_empty_vocab_is_config_error():
    with pytest.raises(ValueError):
        synth_utterance(np.random.default_rng(0), CorpusConfig(vocab_size=0))


def test_back_to_back_when_tau_equals_nu():
    u1, u2 = const_utt(1.0, 0), const_utt(0.5, 1)
    m = simulate_mixture(u1, u2, 1.0, np.random.default_rng(0))
    assert m.delay_samples == u1.n_samples
    assert len(m.mixed) == u1.n_samples + u2.n_samples
    assert np.max(m.mixed) == 1.0  # nothing overlaps


def test_mixed_length_hand_case():
    w = mix_waveforms(np.ones(32000), np.ones(16000), 24000)
    assert len(w) == 40000


def test_simulation_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(SimulationError):
        simulate_mixture(const_utt(1.0, 0), const_utt(1.0, 0), 0.0, rng)
    with pytest.raises(SimulationError):
        simulate_mixture(const_utt(0.4, 0), const_utt(1.0, 1), 0.5, rng)


@pytest.mark.parametrize("tau", [0.0, 0.5])
def test_mixture_laws(tau):
    for i in range(200):
        m = make_mixture(7, i, tau, CFG)
        assert tau - 1e-12 <= m.delay <= m.utt1.duration + 1e-12
        assert len(m.mixed) == max(m.utt1.n_samples, m.delay_samples + m.utt2.n_samples)
        assert m.utt1.speaker != m.utt2.speaker
        assert m.starts[0] <= m.starts[1]
        assert m.labels == (m.utt1.tokens, m.utt2.tokens)


def test_mixture_is_deterministic_per_index():
    a, b = make_mixture(3, 5, 0.0, CFG), make_mixture(3, 5, 0.0, CFG)
    assert np.array_equal(a.mixed, b.mixed)
    assert not np.array_equal(a.mixed[:100], make_mixture(3, 6, 0.0, CFG).mixed[:100])


def test_stft_constants():
    x = np.random.default_rng(0).standard_normal(16000)
    S = stft_features(x)
    assert S.shape == (1 + (16000 - 400) // 160, N_BINS) and N_BINS == 257
    with pytest.raises(ValueError):
        stft_features(np.zeros(100))


def test_stft_bin_centre_sine():
    k = 40
    t = np.arange(8000) / 16000
    S = stft_features(np.sin(2 * np.pi * k * 16000 / 512 * t))
    assert np.all(S.argmax(-1) == k)


def test_white_noise_energy_consistency():
    # Parseval per frame: sum |X_k|^2 over the full spectrum equals n_fft * sum (w x)^2
    x = np.random.default_rng(1).standard_normal(4000)
    S = stft_features(x)
    w = np.hanning(400)
    frames = np.lib.stride_tricks.sliding_window_view(x, 400)[::160]
    full = S[:, 0] ** 2 + S[:, -1] ** 2 + 2 * (S[:, 1:-1] ** 2).sum(-1)
    assert np.allclose(full, 512 * ((frames * w) ** 2).sum(-1), rtol=1e-10)


def test_splice_layout_and_round_trip():
    feat = np.arange(9 * 4, dtype=float).reshape(9, 4)
    x = splice_downsample(feat)
    assert x.shape == (3, 3, 4)
    for t in range(3):
        for c in range(3):
            assert np.array_equal(x[c, t], feat[3 * t + c])
    assert np.array_equal(unsplice(x), feat)
    odd = np.ones((10, 4))
    y = splice_downsample(odd)
    assert y.shape == (3, 4, 4) and np.array_equal(unsplice(y, 10), odd)


def test_feature_pipeline_shape_and_determinism():
    m = make_mixture(0, 0, 0.0, CFG)
    a, b = features_for(m.mixed), features_for(m.mixed)
    assert a.shape[0] == 3 and a.shape[2] == 257
    assert a.shape[0] * a.shape[2] == 771
    assert a.tobytes() == b.tobytes()


def test_manifest_round_trip_is_byte_identical(tmp_path):
    recs = simulate_corpus(5, 0.5, 1, CFG) + single_talker_corpus(2, 1, CFG)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_manifest(p1, recs)
    write_manifest(p2, read_manifest(p1))
    assert p1.read_bytes() == p2.read_bytes()
    first = json.loads(p1.read_text().splitlines()[0])
    assert {"id", "synth_spec", "delay_s", "tau", "speakers", "transcripts", "starts_s"} <= set(first)


def test_waveform_regenerates_from_spec():
    m = make_mixture(4, 2, 0.0, CFG)
    rec = simulate_corpus(3, 0.0, 4, CFG)[2]
    assert np.array_equal(waveform_from_record(rec), m.mixed)


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(2).standard_normal(100).astype(np.float32)
    write_wav(tmp_path / "x.wav", x)
    raw = (tmp_path / "x.wav").read_bytes()
    assert raw[:8] == b"SURTWAV1"
    assert np.array_equal(read_wav(tmp_path / "x.wav"), x)
