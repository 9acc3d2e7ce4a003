"""
Victim Models Component for advspeech
Keyword-spotting classifier and CTC sequence recognizer: the systems under attack
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm.auto import trange

from .audio_core import Waveform
from .ctc import DEFAULT_VOCAB, CtcInput, ctc_loss, ctc_min_frames, encode_target, greedy_decode
from .dataset_gen import KEYWORD_COLLECTION, UTTERANCE_COLLECTION, DatasetManifest, ManifestEntry
from .errors import (
    DivergenceError,
    DomainError,
    FeatureOverflowError,
    FormatError,
    InfeasibleTargetError,
    InsufficientDataError,
)
from .features import FeatureNormalizer, MfccConfig, frame_count, mfcc, mfcc_backward, mfcc_forward, network_input
from .nn import (
    AdamState,
    EpochStats,
    LayerSpec,
    Network,
    activation,
    checkpoint_bytes,
    conv2d,
    cross_entropy,
    dense,
    fit_classifier,
    log_softmax,
    log_softmax_backward,
    maxpool2d,
    network_from_bytes,
    quantize_weights,
    sgd_adam_step,
)
from .seeding import hash_bytes

logger = logging.getLogger("Victim")

PathLike = Union[str, Path]


def keyword_layers(n_classes: int) -> List[LayerSpec]:
    return [
        conv2d(8, (3, 3)), activation("relu"), maxpool2d((2, 2)),
        conv2d(16, (3, 3)), activation("relu"), maxpool2d((2, 2)),
        LayerSpec("flatten"), dense(64), activation("relu"),
        dense(n_classes), activation("softmax"),
    ]


def sequence_layers(vocab_size: int) -> List[LayerSpec]:
    return [
        conv2d(16, (3, 3)), activation("relu"),
        conv2d(16, (3, 3)), activation("relu"),
        LayerSpec("frame_flatten"), dense(vocab_size + 1), activation("softmax"),
    ]


def normalize_transcript(text: str, vocab: Sequence[str] = DEFAULT_VOCAB) -> str:
    """Lowercase, map characters outside the vocabulary to spaces, collapse whitespace"""
    kept = "".join(ch if ch in vocab else " " for ch in text.lower())
    return " ".join(kept.split())


@dataclass
class TrainingReport:
    train_accuracy: float
    heldout_accuracy: Optional[float]
    n_train: int
    n_heldout: int
    curve: List[EpochStats] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "train_accuracy": self.train_accuracy,
            "heldout_accuracy": self.heldout_accuracy,
            "n_train": self.n_train,
            "n_heldout": self.n_heldout,
            "curve": [vars(s) for s in self.curve],
        }


class _VictimBase:
    """Shared feature front-end, checkpointing and input checks"""

    kind = "victim"
    network: Network
    mfcc_cfg: MfccConfig
    normalizer: FeatureNormalizer

    def _features(self, samples: np.ndarray):
        coeffs, cache = mfcc_forward(samples, self.mfcc_cfg)
        if coeffs.shape[0] > self.mfcc_cfg.t_max:
            raise FeatureOverflowError(f"Input has {coeffs.shape[0]} frames, model T_max is {self.mfcc_cfg.t_max}")
        return coeffs, cache

    def _metadata(self) -> Dict:
        return {"kind": self.kind, "mfcc": self.mfcc_cfg.to_dict(), "normalizer": self.normalizer.to_dict()}

    def checkpoint_bytes(self) -> bytes:
        return checkpoint_bytes(self.network, self._metadata())

    def checkpoint_hash(self) -> str:
        return hash_bytes(self.checkpoint_bytes())

    def save(self, path: PathLike) -> str:
        blob = self.checkpoint_bytes()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(blob)
        logger.info(f"Saved {self.kind} victim to {path}")
        return hash_bytes(blob)


@dataclass
class KeywordModel(_VictimBase):
    """Conv classifier over K command classes; inputs are padded to T_max frames"""

    network: Network
    class_names: Tuple[str, ...]
    mfcc_cfg: MfccConfig
    normalizer: FeatureNormalizer
    label_only: bool = False

    kind = "keyword"

    def _input(self, samples: np.ndarray):
        coeffs, cache = self._features(samples)
        norm = self.normalizer.apply(coeffs)
        x = np.zeros((1, self.mfcc_cfg.t_max, coeffs.shape[1], 1))
        x[0, : coeffs.shape[0], :, 0] = norm
        return x, cache, coeffs.shape[0]

    def class_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError as e:
            raise DomainError(f"Unknown class {name!r}") from e

    def probabilities(self, samples: np.ndarray) -> np.ndarray:
        x, _, _ = self._input(samples)
        return self.network.forward(x)[0]

    def scores(self, samples: np.ndarray) -> np.ndarray:
        """What the black-box attacker observes: the probability vector, or a one-hot label in label-only mode"""
        probs = self.probabilities(samples)
        if self.label_only:
            return np.eye(probs.size)[int(np.argmax(probs))]
        return probs

    def output(self, samples: np.ndarray) -> int:
        return int(np.argmax(self.probabilities(samples)))

    def loss_and_grad(self, samples: np.ndarray, target: int) -> Tuple[float, np.ndarray]:
        """Cross-entropy toward target and its gradient w.r.t. the waveform samples"""
        x, cache, n_frames = self._input(samples)
        probs = self.network.forward(x)[0]
        loss, grad_logits = cross_entropy(probs, int(target))
        grads = self.network.backward(grad_logits[None, :], wrt="logits")
        grad_coeffs = self.normalizer.backward(grads.input[0, :n_frames, :, 0])
        return loss, mfcc_backward(cache, grad_coeffs)

    def clone(self) -> "KeywordModel":
        return KeywordModel(self.network.clone(), self.class_names, self.mfcc_cfg, self.normalizer, self.label_only)

    def _metadata(self) -> Dict:
        return dict(super()._metadata(), class_names=list(self.class_names))


@dataclass
class SequenceModel(_VictimBase):
    """Per-frame softmax over vocab + blank, decoded greedily"""

    network: Network
    vocab: Tuple[str, ...]
    mfcc_cfg: MfccConfig
    normalizer: FeatureNormalizer

    kind = "sequence"

    @property
    def blank(self) -> int:
        return len(self.vocab)

    def frames_out(self, n_frames: int) -> int:
        """Output frames for an input of n_frames (valid convolutions shrink the time axis)"""
        shrink = sum(s.kernel[0] - 1 for s in self.network.specs if s.kind == "conv2d")
        return n_frames - shrink

    def _logits(self, samples: np.ndarray):
        coeffs, cache = self._features(samples)
        fm_input = self.normalizer.apply(coeffs)[None, :, :, None]
        logits = self.network.forward_logits(fm_input)[0]
        return logits, cache, coeffs.shape[0]

    def log_probs(self, samples: np.ndarray) -> np.ndarray:
        logits, _, _ = self._logits(samples)
        return log_softmax(logits)

    def output(self, samples: np.ndarray) -> str:
        return greedy_decode(self.log_probs(samples), self.vocab)

    def encode(self, text: str) -> List[int]:
        return encode_target(normalize_transcript(text, self.vocab), self.vocab)

    def loss_and_grad(self, samples: np.ndarray, target: str) -> Tuple[float, np.ndarray]:
        """CTC loss toward target and its gradient w.r.t. the waveform samples"""
        logits, cache, n_frames = self._logits(samples)
        lp = log_softmax(logits)
        loss, grad_lp = ctc_loss(CtcInput(lp, tuple(self.encode(target))))
        grad_logits = log_softmax_backward(grad_lp, lp)
        grads = self.network.backward(grad_logits[None], wrt="logits")
        grad_coeffs = self.normalizer.backward(grads.input[0, :, :, 0])
        return loss, mfcc_backward(cache, grad_coeffs)

    def check_feasible(self, n_samples: int, target: str) -> None:
        available = self.frames_out(frame_count(n_samples, self.mfcc_cfg))
        needed = ctc_min_frames(self.encode(target))
        if available < needed:
            raise InfeasibleTargetError(f"Target {target!r} needs {needed} output frames, input gives {available}")

    def clone(self) -> "SequenceModel":
        return SequenceModel(self.network.clone(), self.vocab, self.mfcc_cfg, self.normalizer)

    def _metadata(self) -> Dict:
        return dict(super()._metadata(), vocab=list(self.vocab))


Victim = Union[KeywordModel, SequenceModel]


# ---------------------------------------------------------------------------
# Inference

def predict_keyword(m: KeywordModel, w: Waveform, label_only: Optional[bool] = None) -> Tuple[int, np.ndarray]:
    """Arg-max class and the probability vector (one-hot in label-only mode)"""
    probs = m.probabilities(w.samples)
    index = int(np.argmax(probs))
    if m.label_only if label_only is None else label_only:
        return index, np.eye(probs.size)[index]
    return index, probs


def transcribe(m: SequenceModel, w: Waveform) -> str:
    return m.output(w.samples)


# ---------------------------------------------------------------------------
# Training

def _holdout_split(groups: Dict[str, List[ManifestEntry]], fraction: float,
                   rng: np.random.Generator) -> Tuple[List[ManifestEntry], List[ManifestEntry]]:
    train: List[ManifestEntry] = []
    heldout: List[ManifestEntry] = []
    for name in sorted(groups):
        members = sorted(groups[name], key=lambda e: e.id)
        order = rng.permutation(len(members))
        n_hold = min(len(members) - 1, int(round(fraction * len(members)))) if fraction > 0 else 0
        heldout.extend(members[i] for i in order[:n_hold])
        train.extend(members[i] for i in order[n_hold:])
    return train, heldout


def train_keyword_model(corpus: DatasetManifest, epochs: int, seed: int,
                        mfcc_cfg: Optional[MfccConfig] = None, class_names: Optional[Sequence[str]] = None,
                        heldout_fraction: float = 0.2, lr: float = 1e-3, batch_size: int = 16,
                        progress: bool = True) -> Tuple[KeywordModel, TrainingReport]:
    """Train the keyword classifier on the keyword clips of a corpus manifest"""
    mfcc_cfg = mfcc_cfg or MfccConfig()
    by_class: Dict[str, List[ManifestEntry]] = {}
    for e in corpus.entries:
        if e.collection == KEYWORD_COLLECTION and (class_names is None or e.bucket in class_names):
            by_class.setdefault(e.bucket, []).append(e)
    names = tuple(class_names) if class_names is not None else tuple(sorted(by_class))
    thin = {n: len(by_class.get(n, [])) for n in names if len(by_class.get(n, [])) < 2}
    if len(names) < 2 or thin:
        logger.error(f"Keyword victim needs >= 2 classes with >= 2 clips each (short: {thin})")
        raise InsufficientDataError(f"Keyword victim needs >= 2 classes with >= 2 clips each (short: {thin})")

    rng = np.random.default_rng(seed)
    train, heldout = _holdout_split({n: by_class[n] for n in names}, heldout_fraction, rng)
    train_maps = [mfcc(corpus.load_waveform(e, mfcc_cfg.sample_rate), mfcc_cfg) for e in train]
    t_max = max(fm.n_frames for fm in train_maps)
    cfg = mfcc_cfg.with_t_max(t_max)
    normalizer = FeatureNormalizer.fit(train_maps)
    inputs = np.concatenate([network_input(fm, normalizer, t_max) for fm in train_maps])
    labels = np.array([names.index(e.bucket) for e in train])

    net = Network(keyword_layers(len(names)), (t_max, cfg.n_coeffs, 1), seed)
    logger.info(f"Training keyword victim: {len(names)} classes, {len(train)} clips, "
                f"{net.parameter_count()} parameters, {epochs} epochs")
    curve = fit_classifier(net, inputs, labels, epochs, seed, lr=lr, batch_size=batch_size,
                           progress=progress, name="keyword victim")
    model = KeywordModel(quantize_weights(net), names, cfg, normalizer)

    train_acc = float(np.mean(np.argmax(net.forward(inputs), axis=-1) == labels))
    heldout_acc = None
    if heldout:
        correct = 0
        for e in heldout:
            try:
                correct += int(model.output(corpus.load_waveform(e, cfg.sample_rate).samples) == names.index(e.bucket))
            except FeatureOverflowError:
                logger.warning(f"Held-out clip {e.id} is longer than the training clips; counted as wrong")
        heldout_acc = correct / len(heldout)
    report = TrainingReport(train_acc, heldout_acc, len(train), len(heldout), curve)
    logger.info(f"Keyword victim: train accuracy {train_acc:.3f}, held-out accuracy {heldout_acc}")
    return model, report


def train_sequence_model(corpus: DatasetManifest, epochs: int, seed: int,
                         mfcc_cfg: Optional[MfccConfig] = None, vocab: Sequence[str] = DEFAULT_VOCAB,
                         heldout_fraction: float = 0.1, lr: float = 1e-3,
                         progress: bool = True) -> Tuple[SequenceModel, TrainingReport]:
    """CTC training of the sequence recognizer on transcribed utterance clips, one utterance per step"""
    mfcc_cfg = mfcc_cfg or MfccConfig()
    vocab = tuple(vocab)
    clips = [e for e in corpus.entries if e.collection == UTTERANCE_COLLECTION and e.transcript]
    if len(clips) < 2:
        raise InsufficientDataError(f"Sequence victim needs >= 2 transcribed utterances, got {len(clips)}")

    rng = np.random.default_rng(seed)
    train, heldout = _holdout_split({"all": clips}, heldout_fraction, rng)
    data = []
    for e in train:
        fm = mfcc(corpus.load_waveform(e, mfcc_cfg.sample_rate), mfcc_cfg)
        data.append((e, fm, encode_target(normalize_transcript(e.transcript, vocab), vocab)))
    t_max = max(fm.n_frames for _, fm, _ in data)
    cfg = mfcc_cfg.with_t_max(max(t_max, mfcc_cfg.t_max))
    normalizer = FeatureNormalizer.fit([fm for _, fm, _ in data])
    inputs = [normalizer.apply(fm.values)[None, :, :, None] for _, fm, _ in data]

    net = Network(sequence_layers(len(vocab)), (None, cfg.n_coeffs, 1), seed)
    model = SequenceModel(net, vocab, cfg, normalizer)
    state = AdamState.for_network(net)
    logger.info(f"Training sequence victim: {len(data)} utterances, {net.parameter_count()} parameters, {epochs} epochs")
    curve: List[EpochStats] = []
    for epoch in trange(epochs, desc="train sequence victim", disable=not progress):
        total = 0.0
        used = 0
        for i in rng.permutation(len(data)):
            entry, _, target = data[i]
            logits = net.forward_logits(inputs[i])[0]
            lp = log_softmax(logits)
            try:
                loss, grad_lp = ctc_loss(CtcInput(lp, tuple(target)))
            except InfeasibleTargetError:
                if epoch == 0:
                    logger.warning(f"Skipping {entry.id}: transcript too long for its frame count")
                continue
            if not np.isfinite(loss):
                raise DivergenceError(f"Non-finite CTC loss on {entry.id}")
            grads = net.backward(log_softmax_backward(grad_lp, lp)[None], wrt="logits")
            sgd_adam_step(net, grads.params, lr, state)
            total += loss
            used += 1
        curve.append(EpochStats(epoch + 1, total / max(used, 1), float("nan")))
        logger.debug(f"sequence victim epoch {epoch + 1}: mean CTC loss {curve[-1].loss:.4f}")
    quantize_weights(net)

    def exact_rate(entries: List[ManifestEntry]) -> Optional[float]:
        if not entries:
            return None
        hits = 0
        for e in entries:
            w = corpus.load_waveform(e, cfg.sample_rate)
            if frame_count(len(w), cfg) <= cfg.t_max:
                hits += int(transcribe(model, w) == normalize_transcript(e.transcript, vocab))
        return hits / len(entries)

    report = TrainingReport(exact_rate(train) or 0.0, exact_rate(heldout), len(train), len(heldout), curve)
    logger.info(f"Sequence victim: exact transcripts {report.train_accuracy:.3f} (train), {report.heldout_accuracy} (held-out)")
    return model, report


# ---------------------------------------------------------------------------
# Persistence

def victim_from_bytes(blob: bytes) -> Victim:
    net, meta = network_from_bytes(blob)
    kind = meta.get("kind")
    if kind not in (KeywordModel.kind, SequenceModel.kind):
        raise DomainError(f"Checkpoint is not a victim model (kind {kind!r})")
    try:
        cfg = MfccConfig.from_dict(meta["mfcc"])
        normalizer = FeatureNormalizer.from_dict(meta["normalizer"])
        if kind == KeywordModel.kind:
            return KeywordModel(net, tuple(meta["class_names"]), cfg, normalizer)
        return SequenceModel(net, tuple(meta["vocab"]), cfg, normalizer)
    except KeyError as e:
        raise FormatError(f"Victim checkpoint metadata lacks {e}") from e


def load_victim(path: PathLike) -> Victim:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        logger.error(f"Cannot read victim checkpoint {path}: {e}")
        raise FormatError(f"Cannot read victim checkpoint {path}: {e}") from e
    return victim_from_bytes(blob)
