"""
Audio Core Component for advspeech
Waveform values, RIFF/WAVE I/O, peak-decibel arithmetic and perturbation application
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import (
    AudioIOError,
    DomainError,
    FormatError,
    SampleRateError,
    ShapeError,
    UnsupportedEncodingError,
)

DEFAULT_SAMPLE_RATE = 16000
AMPLITUDE_FLOOR = 1e-9  # -180 dB
PCM16_SCALE = 32768.0

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE

logger = logging.getLogger("AudioCore")

PathLike = Union[str, Path]


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono audio samples in [-1, 1] with their sample rate"""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    label: Optional[str] = None

    def __post_init__(self):
        samples = _frozen_array(self.samples)
        if samples.ndim != 1:
            raise ShapeError(f"Waveform samples must be 1-D, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise DomainError(f"Sample rate must be positive, got {self.sample_rate}")
        if samples.size and not np.all(np.isfinite(samples)):
            raise DomainError("Waveform contains non-finite samples")
        if samples.size and np.max(np.abs(samples)) > 1.0:
            raise DomainError("Waveform samples must lie in [-1, 1]; clip first")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_seconds(self) -> float:
        return self.samples.size / self.sample_rate

    def with_label(self, label: Optional[str]) -> "Waveform":
        return Waveform(self.samples, self.sample_rate, label)


@dataclass(frozen=True, eq=False)
class Perturbation:
    """Additive perturbation, same length as its host waveform"""

    deltas: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        deltas = _frozen_array(self.deltas)
        if deltas.ndim != 1:
            raise ShapeError(f"Perturbation must be 1-D, got shape {deltas.shape}")
        object.__setattr__(self, "deltas", deltas)

    def __len__(self) -> int:
        return int(self.deltas.size)

    @classmethod
    def zeros_like(cls, host: Waveform) -> "Perturbation":
        return cls(np.zeros(len(host)))


# ---------------------------------------------------------------------------
# WAV reading

def _parse_fmt_chunk(body: bytes):
    if len(body) < 16:
        raise FormatError(f"fmt chunk too short ({len(body)} bytes)")
    fmt_tag, channels, rate, _byte_rate, block_align, bits = struct.unpack_from("<HHIIHH", body, 0)
    if fmt_tag == WAVE_FORMAT_EXTENSIBLE:
        if len(body) < 40:
            raise FormatError("WAVE_FORMAT_EXTENSIBLE fmt chunk too short")
        # sub-format GUID starts at offset 24; its first two bytes carry the format code
        (fmt_tag,) = struct.unpack_from("<H", body, 24)
    return fmt_tag, channels, rate, block_align, bits


def _decode_samples(data: bytes, fmt_tag: int, channels: int, bits: int) -> np.ndarray:
    if fmt_tag == WAVE_FORMAT_PCM and bits == 16:
        usable = len(data) - len(data) % (2 * channels)
        raw = np.frombuffer(data[:usable], dtype="<i2").astype(np.float64) / PCM16_SCALE
    elif fmt_tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        usable = len(data) - len(data) % (4 * channels)
        raw = np.frombuffer(data[:usable], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedEncodingError(f"Unsupported WAV encoding: format 0x{fmt_tag:04x}, {bits} bits")
    frames = raw.reshape(-1, channels)
    mono = frames.mean(axis=1) if channels > 1 else frames[:, 0]
    return np.clip(mono, -1.0, 1.0)


def read_wav(path: PathLike, expected_rate: Optional[int] = None, label: Optional[str] = None) -> Waveform:
    """Read a PCM16 or float32 RIFF/WAVE file into a mono Waveform"""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        logger.error(f"Cannot read {path}: {e}")
        raise AudioIOError(f"Cannot read {path}: {e}") from e

    if len(blob) < 12 or blob[0:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file (magic {blob[0:4]!r})")

    fmt = None
    data = None
    offset = 12
    while offset + 8 <= len(blob):
        chunk_id = blob[offset:offset + 4]
        (size,) = struct.unpack_from("<I", blob, offset + 4)
        body = blob[offset + 8:offset + 8 + size]
        if chunk_id == b"fmt ":
            fmt = _parse_fmt_chunk(body)
        elif chunk_id == b"data":
            data = body
        offset += 8 + size + (size & 1)  # chunks are word aligned

    if fmt is None:
        raise FormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise FormatError(f"{path}: missing data chunk")

    fmt_tag, channels, rate, _block_align, bits = fmt
    if channels not in (1, 2):
        raise UnsupportedEncodingError(f"{path}: {channels} channels (mono or stereo only)")
    if rate <= 0:
        raise FormatError(f"{path}: invalid sample rate {rate}")
    if expected_rate is not None and rate != expected_rate:
        raise SampleRateError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")

    samples = _decode_samples(data, fmt_tag, channels, bits)
    return Waveform(samples, rate, label)


# ---------------------------------------------------------------------------
# WAV writing

def encode_wav(w: Waveform, channels: int = 1) -> bytes:
    """Serialize a waveform as mono PCM16 RIFF/WAVE bytes"""
    if channels != 1:
        raise UnsupportedEncodingError("The WAV writer is mono-only")
    pcm = np.clip(np.round(w.samples * PCM16_SCALE), -32768, 32767).astype("<i2").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, WAVE_FORMAT_PCM, 1, w.sample_rate, w.sample_rate * 2, 2, 16,
        b"data", len(pcm),
    )
    return header + pcm


def write_wav(w: Waveform, path: PathLike, channels: int = 1) -> None:
    """Write a waveform as mono PCM16"""
    payload = encode_wav(w, channels)
    try:
        Path(path).write_bytes(payload)
    except OSError as e:
        logger.error(f"Cannot write {path}: {e}")
        raise AudioIOError(f"Cannot write {path}: {e}") from e


# ---------------------------------------------------------------------------
# Decibel arithmetic

def db_peak(x) -> float:
    """max_i 20*log10(|x_i|), amplitudes floored at 1e-9"""
    arr = np.abs(np.asarray(x, dtype=np.float64))
    if arr.size == 0:
        raise DomainError("db_peak of an empty sequence")
    return float(20.0 * np.log10(max(float(arr.max()), AMPLITUDE_FLOOR)))


def _samples_of(obj) -> np.ndarray:
    if isinstance(obj, Waveform):
        return obj.samples
    if isinstance(obj, Perturbation):
        return obj.deltas
    return np.asarray(obj, dtype=np.float64)


def db_relative(host, delta) -> float:
    """Peak level of the perturbation relative to the host, in dB"""
    h = _samples_of(host)
    d = _samples_of(delta)
    if h.shape != d.shape:
        raise ShapeError(f"Host length {h.size} != perturbation length {d.size}")
    return db_peak(d) - db_peak(h)


def amplitude_bound(host, tau_db: float) -> float:
    """Largest peak amplitude a perturbation may have while staying at tau_db relative"""
    return float(10.0 ** ((db_peak(_samples_of(host)) + tau_db) / 20.0))


def pcm16_grid(samples) -> np.ndarray:
    """The samples a PCM16 write/read round trip returns"""
    x = np.asarray(samples, dtype=np.float64)
    return np.clip(np.round(x * PCM16_SCALE), -32768, 32767) / PCM16_SCALE


def truncate_to_pcm16_step(delta) -> np.ndarray:
    """Round a perturbation toward zero onto the PCM16 step, so |result| <= |delta| element-wise"""
    return np.trunc(np.asarray(delta, dtype=np.float64) * PCM16_SCALE) / PCM16_SCALE


def apply_and_clip(host: Waveform, delta) -> Waveform:
    """host + delta, clipped to [-1, 1]"""
    d = _samples_of(delta)
    if host.samples.shape != d.shape:
        raise ShapeError(f"Host length {len(host)} != perturbation length {d.size}")
    return Waveform(np.clip(host.samples + d, -1.0, 1.0), host.sample_rate, host.label)
