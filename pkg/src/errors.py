"""
Error types for advspeech
Every failure a component can surface is an AdvSpeechError subclass
"""

from typing import Iterable, List, Optional


class AdvSpeechError(Exception):
    """Base class for all advspeech errors"""

    exit_code = 4


class FormatError(AdvSpeechError):
    """Malformed RIFF/WAVE container or binary dump"""


class UnsupportedEncodingError(AdvSpeechError):
    """Codec, bit depth or channel layout we do not handle"""


class SampleRateError(FormatError):
    """File sample rate differs from the expected corpus rate"""


class AudioIOError(AdvSpeechError):
    """Reading or writing an audio file failed at the OS level"""


class ShapeError(AdvSpeechError):
    """Array or layer shapes do not compose"""


class DomainError(AdvSpeechError):
    """Argument outside the domain of the operation"""


class TooShortError(AdvSpeechError):
    """Waveform shorter than one analysis frame"""


class FeatureOverflowError(AdvSpeechError):
    """Feature map longer than the configured T_max"""


class StateError(AdvSpeechError):
    """Operation called in the wrong lifecycle state"""


class DivergenceError(AdvSpeechError):
    """Non-finite loss or gradient"""


class InfeasibleTargetError(AdvSpeechError):
    """CTC target cannot be aligned within the available frames"""


class InsufficientDataError(AdvSpeechError):
    """Not enough clips or candidates to satisfy a request"""


class ManifestError(AdvSpeechError):
    """Manifest content is missing, inconsistent or violates an invariant"""

    def __init__(self, message: str, ids: Optional[Iterable[str]] = None):
        self.ids: List[str] = sorted(ids) if ids else []
        if self.ids:
            message = f"{message}: {', '.join(self.ids)}"
        super().__init__(message)


class LeakageError(ManifestError):
    """A source recording contributes to both train and test sides"""


class ConfigError(AdvSpeechError):
    """Invalid run configuration"""

    exit_code = 2


class StageError(AdvSpeechError):
    """A pipeline stage failed"""
