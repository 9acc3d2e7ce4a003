"""
Detector Component for advspeech
CNN over zero-padded MFCC maps that tells adversarial audio from normal audio
"""

import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .audio_core import Waveform
from .dataset_gen import ADVERSARIAL, NORMAL, DatasetManifest, ManifestEntry
from .errors import ConfigError, FormatError, ManifestError, ShapeError
from .features import FeatureMap, FeatureNormalizer, MfccConfig, mfcc, network_input
from .nn import (
    EpochStats,
    LayerSpec,
    Network,
    activation,
    checkpoint_bytes,
    conv2d,
    dense,
    fit_classifier,
    maxpool2d,
    network_from_bytes,
    quantize_weights,
)
from .seeding import hash_bytes

DETECTOR_CLASSES = (NORMAL, ADVERSARIAL)
THIRD_ACTIVATIONS = ("linear", "selu")
MIN_T_MAX = 8

logger = logging.getLogger("Detector")

PathLike = Union[str, Path]


def detector_layers(third_activation: str = "linear", third_pool: Tuple[int, int] = (2, 2)) -> List[LayerSpec]:
    """Three 2x2 convolutions with (1,3), (1,1) and third_pool pooling, then dense 128 and a 2-way softmax"""
    if third_activation not in THIRD_ACTIVATIONS:
        raise ConfigError(f"third_activation must be one of {THIRD_ACTIVATIONS}, got {third_activation!r}")
    return [
        conv2d(64, (2, 2)), activation("relu"), maxpool2d((1, 3)),
        conv2d(64, (2, 2)), activation("relu"), maxpool2d((1, 1)),
        conv2d(32, (2, 2)), activation(third_activation), maxpool2d(third_pool),
        LayerSpec("flatten"), dense(128), activation("relu"),
        dense(2), activation("softmax"),
    ]


@dataclass(frozen=True)
class DetectorSettings:
    """Architecture and training knobs shared by the CLI and the evaluation protocol"""

    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 16
    third_activation: str = "linear"
    third_pool: Tuple[int, int] = (2, 2)


@dataclass
class Verdict:
    label: str
    probability: float
    probabilities: Tuple[float, float]

    @property
    def is_adversarial(self) -> bool:
        return self.label == ADVERSARIAL

    def to_dict(self) -> Dict:
        return {"label": self.label, "probability": self.probability,
                "probabilities": dict(zip(DETECTOR_CLASSES, self.probabilities))}


@dataclass
class DetectorModel:
    network: Network
    mfcc_cfg: MfccConfig
    normalizer: FeatureNormalizer
    third_activation: str = "linear"
    third_pool: Tuple[int, int] = (2, 2)

    @property
    def t_max(self) -> int:
        return self.mfcc_cfg.t_max

    def inputs(self, maps: Sequence[FeatureMap]) -> np.ndarray:
        return np.concatenate([network_input(fm, self.normalizer, self.t_max) for fm in maps])

    def checkpoint_bytes(self) -> bytes:
        meta = {"kind": "detector", "mfcc": self.mfcc_cfg.to_dict(), "normalizer": self.normalizer.to_dict(),
                "third_activation": self.third_activation, "third_pool": list(self.third_pool),
                "classes": list(DETECTOR_CLASSES)}
        return checkpoint_bytes(self.network, meta)

    def checkpoint_hash(self) -> str:
        return hash_bytes(self.checkpoint_bytes())

    def save(self, path: PathLike) -> str:
        blob = self.checkpoint_bytes()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(blob)
        logger.info(f"Saved detector to {path}")
        return hash_bytes(blob)

    def clone(self) -> "DetectorModel":
        return DetectorModel(self.network.clone(), self.mfcc_cfg, self.normalizer, self.third_activation, self.third_pool)


def build_detector(cfg: MfccConfig, third_activation: str = "linear", seed: int = 0,
                   third_pool: Tuple[int, int] = (2, 2)) -> DetectorModel:
    if cfg.t_max < MIN_T_MAX:
        raise ShapeError(f"Detector needs T_max >= {MIN_T_MAX}, got {cfg.t_max}")
    layers = detector_layers(third_activation, tuple(third_pool))
    net = Network(layers, (cfg.t_max, cfg.n_coeffs, 1), seed)
    logger.info("Second pooling layer has pool size (1, 1) and acts as identity")
    logger.info(f"Built detector: T_max {cfg.t_max}, third activation {third_activation}, "
                f"{net.parameter_count()} parameters")
    return DetectorModel(net, cfg, FeatureNormalizer.identity(cfg.n_coeffs), third_activation, tuple(third_pool))


class FeatureBank:
    """Unpadded MFCC maps per audio file, shared across runs and threads"""

    def __init__(self, cfg: MfccConfig):
        self.cfg = cfg
        self._maps: Dict[Path, FeatureMap] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._maps)

    def get(self, manifest: DatasetManifest, entry: ManifestEntry) -> FeatureMap:
        path = manifest.resolve(entry)
        with self._lock:
            cached = self._maps.get(path)
        if cached is not None:
            return cached
        fm = mfcc(manifest.load_waveform(entry, self.cfg.sample_rate), self.cfg)
        with self._lock:
            self._maps[path] = fm
        return fm

    def maps(self, manifest: DatasetManifest, entries: Optional[Sequence[ManifestEntry]] = None) -> List[FeatureMap]:
        return [self.get(manifest, e) for e in (manifest.entries if entries is None else entries)]


def _labels(entries: Sequence[ManifestEntry]) -> np.ndarray:
    unknown = {e.id for e in entries if e.label not in DETECTOR_CLASSES}
    if unknown:
        raise ManifestError("Entries with unknown labels", unknown)
    return np.array([DETECTOR_CLASSES.index(e.label) for e in entries])


def train_detector(m: DetectorModel, train: DatasetManifest, epochs: int, seed: int, lr: float = 1e-3,
                   batch_size: int = 16, bank: Optional[FeatureBank] = None,
                   progress: bool = True) -> Tuple[DetectorModel, List[EpochStats]]:
    """Fit the normalizer and the network on a balanced manifest; trains m in place"""
    counts = train.counts()
    if counts.get(NORMAL, 0) != counts.get(ADVERSARIAL, 0) or not train.entries:
        logger.error(f"Refusing to train on an unbalanced manifest ({counts})")
        raise ManifestError(f"Training manifest is not balanced: {counts}")
    if bank is None:
        bank = FeatureBank(m.mfcc_cfg)
    maps = bank.maps(train)
    m.normalizer = FeatureNormalizer.fit(maps)
    inputs = m.inputs(maps)
    labels = _labels(train.entries)
    logger.info(f"Training detector on {len(labels)} clips for {epochs} epochs")
    curve = fit_classifier(m.network, inputs, labels, epochs, seed, lr=lr, batch_size=batch_size,
                           progress=progress, name="detector")
    quantize_weights(m.network)
    if curve:
        logger.info(f"Detector final epoch: loss {curve[-1].loss:.4f}, accuracy {curve[-1].accuracy:.3f}")
    return m, curve


def classify(m: DetectorModel, w: Waveform) -> Verdict:
    probs = m.network.forward(network_input(mfcc(w, m.mfcc_cfg), m.normalizer, m.t_max))[0]
    index = int(np.argmax(probs))
    return Verdict(DETECTOR_CLASSES[index], float(probs[index]), (float(probs[0]), float(probs[1])))


def predict_batch(m: DetectorModel, manifest: DatasetManifest, entries: Optional[Sequence[ManifestEntry]] = None,
                  bank: Optional[FeatureBank] = None, batch_size: int = 16) -> np.ndarray:
    """Predicted class index (0 normal, 1 adversarial) for each entry, in order"""
    entries = manifest.entries if entries is None else entries
    if bank is None:
        bank = FeatureBank(m.mfcc_cfg)
    out = np.zeros(len(entries), dtype=np.int64)
    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        probs = m.network.forward(m.inputs(bank.maps(manifest, chunk)))
        out[start:start + len(chunk)] = np.argmax(probs, axis=-1)
    return out


def true_labels(entries: Sequence[ManifestEntry]) -> np.ndarray:
    return _labels(entries)


def detector_from_bytes(blob: bytes) -> DetectorModel:
    net, meta = network_from_bytes(blob)
    if meta.get("kind") != "detector":
        raise FormatError(f"Checkpoint is not a detector (kind {meta.get('kind')!r})")
    return DetectorModel(net, MfccConfig.from_dict(meta["mfcc"]), FeatureNormalizer.from_dict(meta["normalizer"]),
                         meta["third_activation"], tuple(meta["third_pool"]))


def load_detector(path: PathLike) -> DetectorModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        logger.error(f"Cannot read detector checkpoint {path}: {e}")
        raise FormatError(f"Cannot read detector checkpoint {path}: {e}") from e
    return detector_from_bytes(blob)
