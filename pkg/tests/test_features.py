import numpy as np
import numpy.testing as npt
import pytest
import scipy.fft

from src.audio_core import Waveform
from src.errors import ConfigError, FeatureOverflowError, FormatError, TooShortError
from src.features import (
    FeatureMap,
    FeatureNormalizer,
    MfccConfig,
    export_spectrogram_csv,
    frame_count,
    hz_to_mel,
    load_feature_map,
    mel_filterbank,
    mel_to_hz,
    mfcc,
    mfcc_backward,
    mfcc_forward,
    network_input,
    pad_to,
    save_feature_map,
    t_max_for_duration,
)


def reference_mfcc(samples, cfg):
    """Straight-line MFCC: explicit loops, naive DFT, hand-built filters and DCT-II"""
    n_frames = (len(samples) - cfg.frame_length) // cfg.hop + 1
    n = np.arange(cfg.frame_length)
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / cfg.frame_length)
    n_bins = cfg.fft_size // 2 + 1
    dft = np.exp(-2j * np.pi * np.outer(np.arange(n_bins), np.arange(cfg.frame_length)) / cfg.fft_size)

    top = 2595.0 * np.log10(1.0 + (cfg.sample_rate / 2.0) / 700.0)
    edges = [700.0 * (10.0 ** (top * i / (cfg.n_mels + 1) / 2595.0) - 1.0) for i in range(cfg.n_mels + 2)]
    filters = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        for k in range(n_bins):
            hz = k * cfg.sample_rate / cfg.fft_size
            if lo <= hz <= mid:
                filters[m, k] = (hz - lo) / (mid - lo)
            elif mid < hz <= hi:
                filters[m, k] = (hi - hz) / (hi - mid)

    dct = np.zeros((cfg.n_coeffs, cfg.n_mels))
    for k in range(cfg.n_coeffs):
        scale = np.sqrt(1.0 / cfg.n_mels) if k == 0 else np.sqrt(2.0 / cfg.n_mels)
        for i in range(cfg.n_mels):
            dct[k, i] = scale * np.cos(np.pi * k * (2 * i + 1) / (2 * cfg.n_mels))

    out = np.zeros((n_frames, cfg.n_coeffs))
    for t in range(n_frames):
        frame = samples[t * cfg.hop:t * cfg.hop + cfg.frame_length] * window
        power = np.abs(dft @ frame) ** 2
        energy = filters @ power
        out[t] = dct @ np.log(np.maximum(energy, cfg.log_floor))
    return out


def test_matches_naive_reference(rng):
    cfg = MfccConfig()
    for _ in range(20):
        samples = rng.uniform(-0.5, 0.5, int(rng.integers(400, 2400)))
        got = mfcc(Waveform(samples), cfg).values
        want = reference_mfcc(samples, cfg)
        npt.assert_allclose(got, want, rtol=1e-6, atol=1e-6 * np.max(np.abs(want)))


def test_pure_tone_matches_reference(tone):
    cfg = MfccConfig()
    w = tone(1000.0, 0.2)
    want = reference_mfcc(w.samples, cfg)
    npt.assert_allclose(mfcc(w, cfg).values, want, rtol=1e-6, atol=1e-6 * np.max(np.abs(want)))


def test_silence():
    cfg = MfccConfig()
    fm = mfcc(Waveform(np.zeros(16000)), cfg)
    assert fm.values.shape == (98, 40)
    npt.assert_allclose(fm.values[:, 0], 8.0 * np.log(1e-10))
    npt.assert_allclose(fm.values[:, 1:], 0.0, atol=1e-9)
    npt.assert_array_equal(fm.values, np.repeat(fm.values[:1], 98, axis=0))


def test_frame_count_formula():
    cfg = MfccConfig()
    for length in range(400, 4001):
        assert frame_count(length, cfg) == (length - 400) // 160 + 1
    assert frame_count(399, cfg) == 0
    assert t_max_for_duration(7.0, cfg) == 698


def test_too_short():
    with pytest.raises(TooShortError):
        mfcc(Waveform(np.zeros(399)), MfccConfig())


def test_config_validation():
    with pytest.raises(ConfigError):
        MfccConfig(n_coeffs=65)
    with pytest.raises(ConfigError):
        MfccConfig(frame_length=600)
    with pytest.raises(ConfigError):
        MfccConfig(hop=0)
    assert MfccConfig.from_dict(MfccConfig().to_dict()) == MfccConfig()


def test_dct_orthonormal(rng):
    v = rng.normal(size=(5, 64))
    npt.assert_allclose(scipy.fft.idct(scipy.fft.dct(v, norm="ortho", axis=1), norm="ortho", axis=1), v, atol=1e-9)


def test_filterbank_partition():
    fb = mel_filterbank(64, 512, 16000)
    bin_hz = np.arange(257) * 16000 / 512
    centres = mel_to_hz(np.linspace(0, hz_to_mel(8000.0), 66))[1:-1]
    inside = (bin_hz >= centres[0]) & (bin_hz <= centres[-1])
    totals = fb[:, inside].sum(axis=0)
    assert np.all(totals > 0)
    assert np.all(totals <= 1.0001)


def test_scaling_moves_only_c0(rng):
    cfg = MfccConfig()
    x = rng.uniform(-0.3, 0.3, 4000)
    a = mfcc(Waveform(x), cfg).values
    b = mfcc(Waveform(0.5 * x), cfg).values
    shift = b[:, 0] - a[:, 0]
    npt.assert_allclose(shift, shift[0], atol=1e-6)
    npt.assert_allclose(b[:, 1:], a[:, 1:], atol=1e-6)


def test_deterministic(rng):
    w = Waveform(rng.uniform(-0.5, 0.5, 3000))
    npt.assert_array_equal(mfcc(w, MfccConfig()).values, mfcc(w, MfccConfig()).values)


def test_pad_to():
    fm = FeatureMap(np.ones((98, 40)), 98)
    padded = pad_to(fm, 698)
    assert padded.values.shape == (698, 40)
    assert padded.frame_count_unpadded == 98
    assert not np.any(padded.values[98:])
    assert pad_to(padded, 698) is padded
    with pytest.raises(FeatureOverflowError):
        pad_to(FeatureMap(np.ones((699, 40)), 699), 698)


def test_backward_matches_finite_differences(rng):
    cfg = MfccConfig(n_coeffs=13, frame_length=200, hop=80, n_mels=26, fft_size=256, sample_rate=8000)
    x = rng.uniform(-0.3, 0.3, 520)
    coeffs, cache = mfcc_forward(x, cfg)
    weights = rng.normal(size=coeffs.shape)
    grad = mfcc_backward(cache, weights)
    h = 1e-6
    for i in rng.choice(x.size, 12, replace=False):
        plus, minus = x.copy(), x.copy()
        plus[i] += h
        minus[i] -= h
        numeric = (np.sum(weights * mfcc_forward(plus, cfg)[0]) - np.sum(weights * mfcc_forward(minus, cfg)[0])) / (2 * h)
        assert grad[i] == pytest.approx(numeric, rel=1e-4, abs=1e-6)


def test_normalizer_and_network_input(rng):
    maps = [FeatureMap(rng.normal(3.0, 2.0, (n, 5)), n) for n in (7, 9)]
    norm = FeatureNormalizer.fit(maps)
    stacked = np.concatenate([m.values for m in maps])
    npt.assert_allclose(norm.apply(stacked).mean(axis=0), 0.0, atol=1e-12)
    x = network_input(maps[0], norm, 12)
    assert x.shape == (1, 12, 5, 1)
    assert not np.any(x[0, 7:])
    with pytest.raises(FeatureOverflowError):
        network_input(maps[1], norm, 8)
    again = FeatureNormalizer.from_dict(norm.to_dict())
    npt.assert_array_equal(again.mean, norm.mean)


def test_feature_map_dump(tmp_path, rng):
    fm = FeatureMap(rng.normal(size=(6, 4)).astype(np.float32), 6)
    path = tmp_path / "map.afm"
    save_feature_map(fm, path)
    assert path.read_bytes()[:4] == b"AFM1"
    npt.assert_array_equal(load_feature_map(path).values, fm.values)
    path.write_bytes(b"XXXX")
    with pytest.raises(FormatError):
        load_feature_map(path)


def test_spectrogram_export(tmp_path, tone):
    cfg = MfccConfig()
    path = tmp_path / "spec.csv"
    export_spectrogram_csv(tone(1000.0, 0.5), cfg, path)
    rows = path.read_text().splitlines()
    assert rows[0].startswith("time_s,")
    assert len(rows) == 1 + frame_count(8000, cfg)
    assert len(rows[1].split(",")) == 1 + 257
