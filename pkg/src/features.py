"""
Feature Extraction Component for advspeech
MFCC front-end (with its analytic gradient), zero padding to T_max and feature dumps
"""

import logging
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np
import scipy.fft
import scipy.signal

from .audio_core import Waveform
from .errors import ConfigError, FeatureOverflowError, FormatError, ShapeError, TooShortError

FEATURE_MAP_MAGIC = b"AFM1"
DEFAULT_T_MAX = 698

logger = logging.getLogger("Features")


@dataclass(frozen=True)
class MfccConfig:
    """MFCC framing and filterbank parameters (25 ms / 10 ms at 16 kHz by default)"""

    n_coeffs: int = 40
    frame_length: int = 400
    hop: int = 160
    n_mels: int = 64
    fft_size: int = 512
    t_max: int = DEFAULT_T_MAX
    log_floor: float = 1e-10
    sample_rate: int = 16000

    def __post_init__(self):
        if not 1 <= self.n_coeffs <= self.n_mels:
            raise ConfigError(f"n_coeffs ({self.n_coeffs}) must be in [1, n_mels={self.n_mels}]")
        if not 1 <= self.frame_length <= self.fft_size:
            raise ConfigError(f"frame_length ({self.frame_length}) must be in [1, fft_size={self.fft_size}]")
        if self.hop < 1:
            raise ConfigError(f"hop must be >= 1, got {self.hop}")
        if self.t_max < 1:
            raise ConfigError(f"t_max must be >= 1, got {self.t_max}")
        if self.log_floor <= 0:
            raise ConfigError(f"log_floor must be positive, got {self.log_floor}")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "MfccConfig":
        return cls(**data)

    def with_t_max(self, t_max: int) -> "MfccConfig":
        return MfccConfig(**{**asdict(self), "t_max": int(t_max)})


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Cepstral matrix, frames x coefficients"""

    values: np.ndarray
    frame_count_unpadded: int

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"FeatureMap values must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ShapeError("FeatureMap contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_coeffs(self) -> int:
        return int(self.values.shape[1])


# ---------------------------------------------------------------------------
# Mel filterbank

def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-mel filters from 0 Hz to Nyquist, shape (n_mels, fft_size//2 + 1)"""
    edges_hz = mel_to_hz(np.linspace(0.0, float(hz_to_mel(sample_rate / 2.0)), n_mels + 2))
    bin_hz = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lower = edges_hz[:-2, None]
    centre = edges_hz[1:-1, None]
    upper = edges_hz[2:, None]
    rising = (bin_hz[None, :] - lower) / (centre - lower)
    falling = (upper - bin_hz[None, :]) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=16)
def analysis_window(frame_length: int) -> np.ndarray:
    win = scipy.signal.get_window("hann", frame_length, fftbins=True)
    win.setflags(write=False)
    return win


def frame_count(n_samples: int, cfg: MfccConfig) -> int:
    if n_samples < cfg.frame_length:
        return 0
    return (n_samples - cfg.frame_length) // cfg.hop + 1


def t_max_for_duration(seconds: float, cfg: MfccConfig) -> int:
    """Frame count of the longest clip of the given duration"""
    return frame_count(int(round(seconds * cfg.sample_rate)), cfg)


def frame_signal(samples: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    """Overlapping frames, shape (n_frames, frame_length)"""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < cfg.frame_length:
        raise TooShortError(
            f"Waveform of {samples.size} samples is shorter than one frame ({cfg.frame_length})"
        )
    return np.lib.stride_tricks.sliding_window_view(samples, cfg.frame_length)[:: cfg.hop]


# ---------------------------------------------------------------------------
# MFCC forward / backward

@dataclass
class MfccCache:
    """Intermediates kept by mfcc_forward for mfcc_backward"""

    n_samples: int
    spectrum: np.ndarray
    mel_energy: np.ndarray
    active: np.ndarray
    cfg: MfccConfig


def mfcc_forward(samples: np.ndarray, cfg: MfccConfig) -> Tuple[np.ndarray, MfccCache]:
    frames = frame_signal(samples, cfg)
    spectrum = np.fft.rfft(frames * analysis_window(cfg.frame_length), n=cfg.fft_size, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    mel_energy = power @ mel_filterbank(cfg.n_mels, cfg.fft_size, cfg.sample_rate).T
    active = mel_energy > cfg.log_floor
    log_energy = np.log(np.where(active, mel_energy, cfg.log_floor))
    coeffs = scipy.fft.dct(log_energy, type=2, norm="ortho", axis=1)[:, : cfg.n_coeffs]
    cache = MfccCache(int(np.asarray(samples).size), spectrum, mel_energy, active, cfg)
    return coeffs, cache


def mfcc_backward(cache: MfccCache, grad_coeffs: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. waveform samples, given dLoss/dMFCC"""
    cfg = cache.cfg
    n_frames = cache.spectrum.shape[0]
    if grad_coeffs.shape != (n_frames, cfg.n_coeffs):
        raise ShapeError(f"Expected gradient of shape {(n_frames, cfg.n_coeffs)}, got {grad_coeffs.shape}")

    full = np.zeros((n_frames, cfg.n_mels))
    full[:, : cfg.n_coeffs] = grad_coeffs
    grad_log = scipy.fft.idct(full, type=2, norm="ortho", axis=1)
    grad_energy = np.where(cache.active, grad_log / np.where(cache.active, cache.mel_energy, 1.0), 0.0)
    grad_power = grad_energy @ mel_filterbank(cfg.n_mels, cfg.fft_size, cfg.sample_rate)

    # d|X_k|^2 / dx_n = 2 Re(conj(X_k) e^{-2 pi i k n / N}); the sum over k is a forward FFT
    weighted = np.zeros((n_frames, cfg.fft_size), dtype=np.complex128)
    weighted[:, : grad_power.shape[1]] = grad_power * np.conj(cache.spectrum)
    grad_windowed = 2.0 * np.fft.fft(weighted, axis=1).real[:, : cfg.frame_length]
    grad_frames = grad_windowed * analysis_window(cfg.frame_length)

    grad_samples = np.zeros(cache.n_samples)
    index = np.arange(n_frames)[:, None] * cfg.hop + np.arange(cfg.frame_length)[None, :]
    np.add.at(grad_samples, index, grad_frames)
    return grad_samples


def mfcc(w: Waveform, cfg: MfccConfig) -> FeatureMap:
    """MFCC matrix (frames x n_coeffs) of a waveform"""
    coeffs, _ = mfcc_forward(w.samples, cfg)
    return FeatureMap(coeffs, coeffs.shape[0])


def pad_to(fm: FeatureMap, t_max: int) -> FeatureMap:
    """Zero-pad a feature map to exactly t_max frames"""
    if fm.n_frames > t_max:
        raise FeatureOverflowError(f"Feature map has {fm.n_frames} frames, T_max is {t_max}")
    if fm.n_frames == t_max:
        return fm
    padded = np.zeros((t_max, fm.n_coeffs))
    padded[: fm.n_frames] = fm.values
    return FeatureMap(padded, fm.frame_count_unpadded)


# ---------------------------------------------------------------------------
# Normalisation

@dataclass(eq=False)
class FeatureNormalizer:
    """Per-coefficient standardisation, applied before zero padding"""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, n_coeffs: int) -> "FeatureNormalizer":
        return cls(np.zeros(n_coeffs), np.ones(n_coeffs))

    @classmethod
    def fit(cls, maps: Iterable[FeatureMap]) -> "FeatureNormalizer":
        rows = [fm.values[: fm.frame_count_unpadded] for fm in maps]
        if not rows:
            raise ShapeError("Cannot fit a normalizer on zero feature maps")
        stacked = np.concatenate(rows, axis=0)
        return cls(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), 1e-8))

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad / self.std

    def to_dict(self) -> Dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Dict) -> "FeatureNormalizer":
        return cls(np.asarray(data["mean"], dtype=np.float64), np.asarray(data["std"], dtype=np.float64))


def network_input(fm: FeatureMap, normalizer: FeatureNormalizer, t_max: Optional[int]) -> np.ndarray:
    """Normalised (and, if t_max is given, zero-padded) map shaped (1, T, F, 1)"""
    values = normalizer.apply(fm.values[: fm.frame_count_unpadded])
    if t_max is not None:
        if values.shape[0] > t_max:
            raise FeatureOverflowError(f"Feature map has {values.shape[0]} frames, T_max is {t_max}")
        padded = np.zeros((t_max, values.shape[1]))
        padded[: values.shape[0]] = values
        values = padded
    return values[None, :, :, None]


# ---------------------------------------------------------------------------
# Dumps and plot data

def save_feature_map(fm: FeatureMap, path: Union[str, Path]) -> None:
    """AFM1 dump: magic, t, f (uint32 LE), then row-major float32 values"""
    header = struct.pack("<4sII", FEATURE_MAP_MAGIC, fm.n_frames, fm.n_coeffs)
    Path(path).write_bytes(header + fm.values.astype("<f4").tobytes(order="C"))


def load_feature_map(path: Union[str, Path]) -> FeatureMap:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != FEATURE_MAP_MAGIC:
        raise FormatError(f"{path}: not an AFM1 feature dump")
    _, t, f = struct.unpack_from("<4sII", blob, 0)
    expected = 12 + 4 * t * f
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=12).astype(np.float64).reshape(t, f)
    return FeatureMap(values, t)


def log_spectrogram(w: Waveform, cfg: MfccConfig) -> np.ndarray:
    """Power spectrogram in dB, frames x (fft_size//2 + 1), same framing as mfcc"""
    frames = frame_signal(w.samples, cfg)
    spectrum = np.fft.rfft(frames * analysis_window(cfg.frame_length), n=cfg.fft_size, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    return 10.0 * np.log10(np.maximum(power, cfg.log_floor))


def export_spectrogram_csv(w: Waveform, cfg: MfccConfig, path: Union[str, Path]) -> None:
    """Write spectrogram plot data: first column frame time (s), one column per FFT bin"""
    spec = log_spectrogram(w, cfg)
    times = np.arange(spec.shape[0]) * cfg.hop / cfg.sample_rate
    freqs = np.arange(spec.shape[1]) * cfg.sample_rate / cfg.fft_size
    header = "time_s," + ",".join(f"{f:.1f}" for f in freqs)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.column_stack([times, spec]), delimiter=",", header=header, comments="", fmt="%.6g")
    logger.info(f"Wrote spectrogram plot data ({spec.shape[0]} frames) to {path}")
