"""
Voice Activity Detection Component for advspeech
Energy-percentile VAD: per-frame speech flags and the speech-ratio corpus filter
"""

import logging
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .audio_core import Waveform
from .errors import DomainError
from .features import MfccConfig, frame_signal

VAD_ALGORITHM_ID = "energy-percentile-v1"
DEFAULT_PERCENTILE = 10.0
DEFAULT_MARGIN_DB = 9.0
SPEECH_THRESHOLD = 0.68

logger = logging.getLogger("VAD")


@dataclass(frozen=True)
class VadParams:
    """VAD settings as recorded in manifests"""

    energy_percentile: float = DEFAULT_PERCENTILE
    margin_db: float = DEFAULT_MARGIN_DB
    threshold: float = SPEECH_THRESHOLD
    algorithm: str = VAD_ALGORITHM_ID

    def to_dict(self) -> Dict:
        return {
            "algorithm": self.algorithm,
            "energy_percentile": self.energy_percentile,
            "margin_db": self.margin_db,
            "threshold": self.threshold,
        }


@dataclass(frozen=True, eq=False)
class VadResult:
    frame_flags: np.ndarray
    speech_ratio: float


def frame_log_energies(w: Waveform, cfg: MfccConfig) -> np.ndarray:
    """Per-frame energy in dB, framed exactly like the MFCC front-end"""
    frames = frame_signal(w.samples, cfg)
    energy = np.sum(frames ** 2, axis=1)
    return 10.0 * np.log10(np.maximum(energy, cfg.log_floor))


def speech_ratio_from_energies(energies_db: np.ndarray, energy_percentile: float = DEFAULT_PERCENTILE,
                               margin_db: float = DEFAULT_MARGIN_DB) -> VadResult:
    """Flag frames louder than the given energy percentile plus a margin"""
    energies_db = np.asarray(energies_db, dtype=np.float64)
    if energies_db.size == 0:
        raise DomainError("No frames to classify")
    if not 0.0 <= energy_percentile <= 100.0:
        raise DomainError(f"energy_percentile must be in [0, 100], got {energy_percentile}")
    threshold = np.percentile(energies_db, energy_percentile) + margin_db
    flags = energies_db > threshold
    flags.setflags(write=False)
    return VadResult(flags, float(np.count_nonzero(flags)) / flags.size)


def speech_ratio(w: Waveform, cfg: MfccConfig, energy_percentile: float = DEFAULT_PERCENTILE,
                 margin_db: float = DEFAULT_MARGIN_DB) -> VadResult:
    """Speech/non-speech decision per frame and the speech ratio of the clip"""
    result = speech_ratio_from_energies(frame_log_energies(w, cfg), energy_percentile, margin_db)
    logger.debug(f"speech ratio {result.speech_ratio:.3f} over {result.frame_flags.size} frames")
    return result


def passes_speech_filter(v: VadResult, threshold: float = SPEECH_THRESHOLD) -> bool:
    """True iff strictly more than `threshold` of the frames are speech"""
    if not 0.0 <= threshold <= 1.0:
        raise DomainError(f"Speech threshold must be in [0, 1], got {threshold}")
    return v.speech_ratio > threshold
