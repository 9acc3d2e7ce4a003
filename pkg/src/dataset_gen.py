"""
Dataset Generation Component for advspeech
Corpus synthesis and ingestion, duration buckets, balanced adversarial/normal manifests and splits
"""

import csv
import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm.auto import tqdm

from .audio_core import Waveform, read_wav, write_wav
from .errors import DomainError, FormatError, InsufficientDataError, ManifestError
from .features import MfccConfig
from .seeding import hash_file, substream_seed
from .vad import SPEECH_THRESHOLD, VadParams, speech_ratio

BUCKETS: Dict[str, Tuple[float, float]] = {"short": (1.0, 2.0), "medium": (3.0, 4.0), "long": (6.0, 7.0)}
BUCKET_ORDER = ("short", "medium", "long")
NORMAL = "normal"
ADVERSARIAL = "adversarial"
WHITE_BOX = "white_box"
BLACK_BOX = "black_box"
KEYWORD_COLLECTION = "keyword"
UTTERANCE_COLLECTION = "utterance"

DEFAULT_COMMANDS = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
UTTERANCE_WORDS = DEFAULT_COMMANDS + (
    "open", "all", "doors", "switch", "wifi", "connection", "i", "need", "a", "reservation", "for",
    "sixteen", "people", "at", "the", "seafood", "restaurant", "street", "quick", "brown", "fox",
    "jumps", "over", "lazy", "dog", "king", "jam", "zero",
)
PHONE_SYMBOLS = "abcdefghijklmnopqrstuvwxyz "

logger = logging.getLogger("DatasetGen")

PathLike = Union[str, Path]


@dataclass(frozen=True)
class TargetSpec:
    target_class: str
    text: str


DEFAULT_TARGETS = (
    TargetSpec("short", "open all doors"),
    TargetSpec("medium", "switch off wifi connection"),
    TargetSpec("long", "i need a reservation for sixteen people at the seafood restaurant down the street"),
)


# ---------------------------------------------------------------------------
# Manifest

@dataclass
class ManifestEntry:
    """One clip of a manifest; wav paths are relative to the manifest root"""

    id: str
    wav_path: str
    label: str = NORMAL
    bucket: Optional[str] = None
    target_class: Optional[str] = None
    split: Optional[str] = None
    source_id: Optional[str] = None
    attack_kind: Optional[str] = None
    duration_s: float = 0.0
    speech_ratio: Optional[float] = None
    transcript: Optional[str] = None
    collection: Optional[str] = None
    target_text: Optional[str] = None
    source_wav: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ManifestEntry":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise FormatError(f"Unknown manifest fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    root: Path
    meta: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        return (self.root / entry.wav_path).resolve()

    def load_waveform(self, entry: ManifestEntry, expected_rate: Optional[int] = None) -> Waveform:
        return read_wav(self.resolve(entry), expected_rate=expected_rate, label=entry.transcript)

    def by_id(self) -> Dict[str, ManifestEntry]:
        return {e.id: e for e in self.entries}

    def filter(self, predicate: Callable[[ManifestEntry], bool]) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if predicate(e)], self.root, dict(self.meta))

    def split_view(self, split: str) -> "DatasetManifest":
        return self.filter(lambda e: e.split == split)

    def relative_path(self, path: PathLike) -> str:
        return Path(os.path.relpath(Path(path).resolve(), self.root.resolve())).as_posix()

    def rebase(self, new_root: PathLike) -> "DatasetManifest":
        """Same entries with paths re-expressed relative to another root"""
        target = DatasetManifest([], Path(new_root), dict(self.meta))
        for e in self.entries:
            moved = replace(e, wav_path=target.relative_path(self.resolve(e)))
            if e.source_wav:
                moved.source_wav = target.relative_path((self.root / e.source_wav).resolve())
            target.entries.append(moved)
        return target

    def counts(self) -> Dict[str, int]:
        out: Dict[str, int] = defaultdict(int)
        for e in self.entries:
            out[e.label] += 1
        return dict(out)

    def save(self, path: PathLike) -> Path:
        """JSON-lines entries plus a sidecar <name>.meta.json holding the root and builder parameters"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        root_rel = os.path.relpath(self.root.resolve(), path.parent.resolve())
        with open(path, "w", encoding="utf-8") as f:
            for e in self.entries:
                f.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
        meta = dict(self.meta, root=Path(root_rel).as_posix(), entry_count=len(self.entries))
        with open(meta_path_for(path), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
        logger.info(f"Saved manifest {path} ({len(self.entries)} entries)")
        return path

    @classmethod
    def load(cls, path: PathLike) -> "DatasetManifest":
        path = Path(path)
        try:
            with open(meta_path_for(path), "r", encoding="utf-8") as f:
                meta = json.load(f)
            with open(path, "r", encoding="utf-8") as f:
                entries = [ManifestEntry.from_dict(json.loads(line)) for line in f if line.strip()]
        except FileNotFoundError as e:
            logger.error(f"Manifest file missing: {e.filename}")
            raise ManifestError(f"Manifest file missing: {e.filename}") from e
        except json.JSONDecodeError as e:
            logger.error(f"Corrupt manifest {path}: {e}")
            raise FormatError(f"Corrupt manifest {path}: {e}") from e
        root = (path.parent / meta.pop("root", ".")).resolve()
        meta.pop("entry_count", None)
        return cls(entries, root, meta)


def meta_path_for(manifest_path: PathLike) -> Path:
    manifest_path = Path(manifest_path)
    return manifest_path.with_name(manifest_path.stem + ".meta.json")


# ---------------------------------------------------------------------------
# Buckets and speech filter

def bucket_for_duration(duration_s: float) -> Optional[str]:
    """short [1, 2] s, medium [3, 4] s, long [6, 7] s, inclusive; None in the gaps"""
    for name in BUCKET_ORDER:
        lo, hi = BUCKETS[name]
        if lo <= duration_s <= hi:
            return name
    return None


class BucketPartition(NamedTuple):
    buckets: Dict[str, List[ManifestEntry]]
    excluded: List[ManifestEntry]


def bucket_by_duration(files: Iterable[ManifestEntry]) -> BucketPartition:
    buckets: Dict[str, List[ManifestEntry]] = {name: [] for name in BUCKET_ORDER}
    excluded: List[ManifestEntry] = []
    for entry in files:
        name = bucket_for_duration(entry.duration_s)
        if name is None:
            excluded.append(entry)
        else:
            buckets[name].append(entry)
    if excluded:
        logger.info(f"{len(excluded)} files fall outside every duration bucket and were excluded")
    return BucketPartition(buckets, excluded)


def passes_filter(entry: ManifestEntry, threshold: Optional[float]) -> bool:
    if threshold is None:
        return True
    return entry.speech_ratio is not None and entry.speech_ratio > threshold


def describe_clip(w: Waveform, mfcc_cfg: MfccConfig, vad: VadParams) -> Tuple[float, float]:
    """Duration and speech ratio of a clip"""
    ratio = speech_ratio(w, mfcc_cfg, vad.energy_percentile, vad.margin_db).speech_ratio
    return w.duration_seconds, ratio


# ---------------------------------------------------------------------------
# Dataset A / dataset B

class AttackRequest(NamedTuple):
    source: ManifestEntry
    target_class: str


# an attack runner maps requests to outcomes in the same order; outcomes expose
# success, adversarial_path, attack_kind and final_db_relative
AttackRunner = Callable[[Sequence[AttackRequest]], Sequence[Any]]


def _shortfall_error(what: str, shortfalls: Dict[str, Tuple[int, int]]) -> InsufficientDataError:
    detail = ", ".join(f"{k}: have {have}, need {need}" for k, (have, need) in sorted(shortfalls.items()))
    logger.error(f"Not enough {what} ({detail})")
    return InsufficientDataError(f"Not enough {what} ({detail})")


def _pick(entries: List[ManifestEntry], rng: np.random.Generator) -> List[ManifestEntry]:
    ordered = sorted(entries, key=lambda e: e.id)
    return [ordered[i] for i in rng.permutation(len(ordered))]


def _adversarial_entries(out: DatasetManifest, requests: Sequence[AttackRequest], outcomes: Sequence[Any],
                         sources: DatasetManifest, group_key: Callable[[ManifestEntry], str],
                         target_texts: Dict[str, str]) -> Tuple[List[ManifestEntry], Dict[str, int]]:
    if len(outcomes) != len(requests):
        raise ManifestError(f"Attack runner returned {len(outcomes)} outcomes for {len(requests)} requests")
    adversarial: List[ManifestEntry] = []
    failures: Dict[str, int] = defaultdict(int)
    for request, outcome in zip(requests, outcomes):
        src = request.source
        if not outcome.success:
            failures[group_key(src)] += 1
            continue
        adversarial.append(ManifestEntry(
            id=f"{src.id}__to_{request.target_class}",
            wav_path=out.relative_path(outcome.adversarial_path),
            label=ADVERSARIAL,
            bucket=src.bucket,
            target_class=request.target_class,
            source_id=src.id,
            attack_kind=outcome.attack_kind,
            duration_s=src.duration_s,
            speech_ratio=src.speech_ratio,
            transcript=src.transcript,
            collection=src.collection,
            target_text=target_texts.get(request.target_class),
            source_wav=out.relative_path(sources.resolve(src)),
        ))
    return adversarial, dict(failures)


def _normal_entry(out: DatasetManifest, sources: DatasetManifest, e: ManifestEntry) -> ManifestEntry:
    return replace(e, wav_path=out.relative_path(sources.resolve(e)), label=NORMAL, split=None,
                   source_id=e.id, target_class=None, attack_kind=None, source_wav=None)


def _rebalance(normals: Dict[str, List[ManifestEntry]], failures: Dict[str, int]) -> None:
    for group, n_failed in failures.items():
        logger.warning(f"{n_failed} failed attacks in {group}; dropping {n_failed} normal clips to stay balanced")
        del normals[group][len(normals[group]) - n_failed:]


def build_dataset_A(sources: DatasetManifest, targets: Sequence[TargetSpec], n_per_bucket: int,
                    attack: AttackRunner, seed: int, out_root: PathLike,
                    speech_threshold: Optional[float] = SPEECH_THRESHOLD) -> DatasetManifest:
    """Attack n sources per duration bucket with every target and add 3n distinct normals per bucket"""
    if n_per_bucket < 1:
        raise DomainError(f"n_per_bucket must be >= 1, got {n_per_bucket}")
    rng = np.random.default_rng(seed)
    candidates = [e for e in sources.entries if e.collection != KEYWORD_COLLECTION and passes_filter(e, speech_threshold)]
    partition = bucket_by_duration(candidates)
    per_bucket_normals = len(targets) * n_per_bucket
    need = n_per_bucket + per_bucket_normals
    shortfalls = {b: (len(partition.buckets[b]), need) for b in BUCKET_ORDER if len(partition.buckets[b]) < need}
    if shortfalls:
        raise _shortfall_error("dataset A candidates", shortfalls)

    out = DatasetManifest([], Path(out_root))
    requests: List[AttackRequest] = []
    normals: Dict[str, List[ManifestEntry]] = {}
    for bucket in BUCKET_ORDER:
        picked = _pick(partition.buckets[bucket], rng)
        attacked = picked[:n_per_bucket]
        normals[bucket] = [_normal_entry(out, sources, e) for e in picked[n_per_bucket:need]]
        requests.extend(AttackRequest(src, t.target_class) for src in attacked for t in targets)
    logger.info(f"Dataset A: attacking {len(requests)} (source, target) pairs")

    outcomes = attack(requests)
    adversarial, failures = _adversarial_entries(out, requests, outcomes, sources, lambda e: e.bucket,
                                                 {t.target_class: t.text for t in targets})
    _rebalance(normals, failures)
    out.entries = adversarial + [e for b in BUCKET_ORDER for e in normals[b]]
    out.meta = {
        "dataset": "A",
        "seed": seed,
        "n_per_bucket": n_per_bucket,
        "targets": [asdict(t) for t in targets],
        "speech_threshold": speech_threshold,
        "attack_failures": sum(failures.values()),
        "vad": sources.meta.get("vad"),
    }
    logger.info(f"Dataset A: {len(adversarial)} adversarial + {len(out.entries) - len(adversarial)} normal entries")
    return out


def build_dataset_B(sources: DatasetManifest, commands: Sequence[str], n_per_command: int,
                    attack: AttackRunner, seed: int, out_root: PathLike,
                    speech_threshold: Optional[float] = None) -> DatasetManifest:
    """Mutual targeting: n clips per command attacked toward each other command, plus (K-1)n normals per command"""
    if n_per_command < 1:
        raise DomainError(f"n_per_command must be >= 1, got {n_per_command}")
    if len(commands) < 2:
        raise InsufficientDataError("Mutual targeting needs at least 2 commands")
    rng = np.random.default_rng(seed)
    by_command: Dict[str, List[ManifestEntry]] = {c: [] for c in commands}
    for e in sources.entries:
        if e.collection == KEYWORD_COLLECTION and e.bucket in by_command and passes_filter(e, speech_threshold):
            by_command[e.bucket].append(e)
    n_normals = (len(commands) - 1) * n_per_command
    need = n_per_command + n_normals
    shortfalls = {c: (len(by_command[c]), need) for c in commands if len(by_command[c]) < need}
    if shortfalls:
        raise _shortfall_error("dataset B clips", shortfalls)

    out = DatasetManifest([], Path(out_root))
    requests: List[AttackRequest] = []
    normals: Dict[str, List[ManifestEntry]] = {}
    for command in commands:
        picked = _pick(by_command[command], rng)
        normals[command] = [_normal_entry(out, sources, e) for e in picked[n_per_command:need]]
        for src in picked[:n_per_command]:
            requests.extend(AttackRequest(src, other) for other in commands if other != command)
    logger.info(f"Dataset B: attacking {len(requests)} (source, target) pairs")

    outcomes = attack(requests)
    adversarial, failures = _adversarial_entries(out, requests, outcomes, sources, lambda e: e.bucket, {})
    _rebalance(normals, failures)
    out.entries = adversarial + [e for c in commands for e in normals[c]]
    out.meta = {
        "dataset": "B",
        "seed": seed,
        "commands": list(commands),
        "n_per_command": n_per_command,
        "speech_threshold": speech_threshold,
        "attack_failures": sum(failures.values()),
        "vad": sources.meta.get("vad"),
    }
    logger.info(f"Dataset B: {len(adversarial)} adversarial + {len(out.entries) - len(adversarial)} normal entries")
    return out


# ---------------------------------------------------------------------------
# Train/test split

def _split_groups(groups: List[str], n_train: int, rng: np.random.Generator) -> List[str]:
    ordered = sorted(groups)
    shuffled = [ordered[i] for i in rng.permutation(len(ordered))]
    return shuffled[:n_train]


def _too_small(n: int, fraction: float) -> bool:
    """A stratum that cannot keep a source on both sides at this fraction"""
    return n < 2 or math.floor(fraction * n) < 1 or n - math.ceil(fraction * n) < 1


def allocate_train_counts(sizes: Dict[str, int], fraction: float) -> Dict[str, int]:
    """Largest-remainder share of round(fraction * total) train groups, at least one per side where possible"""
    total = sum(sizes.values())
    target = int(round(fraction * total))
    if total >= 2:
        target = min(max(target, 1), total - 1)
    lo = {k: 1 if n >= 2 else 0 for k, n in sizes.items()}
    hi = {k: n - 1 if n >= 2 else n for k, n in sizes.items()}
    quota = {k: fraction * n for k, n in sizes.items()}
    alloc = {k: min(max(math.floor(quota[k]), lo[k]), hi[k]) for k in sizes}
    keys = sorted(sizes, key=str)
    while sum(alloc.values()) < target:
        room = [k for k in keys if alloc[k] < hi[k]]
        if not room:
            break
        alloc[max(room, key=lambda k: quota[k] - alloc[k])] += 1
    while sum(alloc.values()) > target:
        room = [k for k in keys if alloc[k] > lo[k]]
        if not room:
            break
        alloc[min(room, key=lambda k: quota[k] - alloc[k])] -= 1
    return alloc


def split_train_test(m: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    """Source-disjoint split, stratified by bucket, with each side kept balanced per bucket"""
    if not 0.0 < train_fraction < 1.0:
        raise DomainError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)

    adv_groups: Dict[str, List[ManifestEntry]] = defaultdict(list)
    for e in m.entries:
        if e.label == ADVERSARIAL:
            adv_groups[e.source_id].append(e)
    strata: Dict[str, List[str]] = defaultdict(list)
    for source_id, members in adv_groups.items():
        strata[str(members[0].bucket)].append(source_id)

    units: Dict[str, List[str]] = {}
    pooled: List[str] = []
    for stratum in sorted(strata):
        if _too_small(len(strata[stratum]), train_fraction):
            pooled.extend(strata[stratum])
        else:
            units[stratum] = strata[stratum]
    if pooled:
        logger.warning(f"{len(strata) - len(units)} strata are too small to split at {train_fraction:.2f}; "
                       f"falling back to a global split for their {len(pooled)} sources")
        units[""] = pooled

    counts = allocate_train_counts({k: len(v) for k, v in units.items()}, train_fraction)
    train_sources = set()
    for key in sorted(units):
        train_sources.update(_split_groups(units[key], counts[key], rng))

    adv_train_per_bucket: Dict[str, int] = defaultdict(int)
    for source_id in train_sources:
        adv_train_per_bucket[adv_groups[source_id][0].bucket] += len(adv_groups[source_id])

    normals_by_bucket: Dict[str, List[ManifestEntry]] = defaultdict(list)
    for e in m.entries:
        if e.label == NORMAL:
            normals_by_bucket[e.bucket].append(e)
    normal_train_ids = set()
    for bucket in sorted(normals_by_bucket, key=str):
        picked = _pick(normals_by_bucket[bucket], rng)
        normal_train_ids.update(e.id for e in picked[: adv_train_per_bucket.get(bucket, 0)])

    entries = []
    for e in m.entries:
        in_train = e.source_id in train_sources if e.label == ADVERSARIAL else e.id in normal_train_ids
        entries.append(replace(e, split="train" if in_train else "test"))
    out = DatasetManifest(entries, m.root, dict(m.meta, split={"train_fraction": train_fraction, "seed": seed}))
    n_train = sum(1 for e in entries if e.split == "train")
    logger.info(f"Split: {n_train} train / {len(entries) - n_train} test "
                f"(requested {train_fraction:.2f}, achieved {n_train / max(len(entries), 1):.3f})")
    return out


# ---------------------------------------------------------------------------
# Validation

def find_leakage(train: Iterable[ManifestEntry], test: Iterable[ManifestEntry]) -> List[str]:
    """Source ids contributing to both sides"""
    train_sources = {e.source_id or e.id for e in train}
    test_sources = {e.source_id or e.id for e in test}
    return sorted(train_sources & test_sources)


def validate_manifest(m: DatasetManifest, speech_threshold: Optional[float] = None,
                      check_files: bool = False) -> List[str]:
    """Every invariant violation of a finalized manifest, as human-readable lines"""
    violations: List[str] = []
    counts = m.counts()
    if counts.get(NORMAL, 0) != counts.get(ADVERSARIAL, 0):
        violations.append(f"unbalanced: {counts.get(NORMAL, 0)} normal vs {counts.get(ADVERSARIAL, 0)} adversarial")
    if set(counts) - {NORMAL, ADVERSARIAL}:
        violations.append(f"unknown labels: {sorted(set(counts) - {NORMAL, ADVERSARIAL})}")

    seen = set()
    for e in m.entries:
        if e.id in seen:
            violations.append(f"duplicate id: {e.id}")
        seen.add(e.id)
        if e.label == ADVERSARIAL and not e.source_id:
            violations.append(f"adversarial entry without source: {e.id}")
        if speech_threshold is not None and not passes_filter(e, speech_threshold):
            violations.append(f"speech ratio {e.speech_ratio} not above {speech_threshold}: {e.id}")

    attack_sources = {e.source_id for e in m.entries if e.label == ADVERSARIAL}
    for e in m.entries:
        if e.label == NORMAL and (e.source_id or e.id) in attack_sources:
            violations.append(f"normal clip is also an attack source: {e.id}")

    splits = {e.split for e in m.entries}
    if splits - {None}:
        if None in splits:
            violations.append("some entries have no split")
        violations.extend(f"empty {side} split" for side in ("train", "test") if side not in splits)
        leaked = find_leakage([e for e in m.entries if e.split == "train"],
                              [e for e in m.entries if e.split == "test"])
        violations.extend(f"source in both train and test: {s}" for s in leaked)

    if check_files:
        for e in m.entries:
            path = m.resolve(e)
            if not path.is_file():
                violations.append(f"missing file: {e.id}")
            elif e.label == ADVERSARIAL and e.source_wav:
                source = (m.root / e.source_wav).resolve()
                if source.is_file() and hash_file(source) == hash_file(path):
                    violations.append(f"adversarial audio identical to its source: {e.id}")
    return violations


def ensure_valid(m: DatasetManifest, speech_threshold: Optional[float] = None, what: str = "manifest") -> None:
    violations = validate_manifest(m, speech_threshold)
    if violations:
        for v in violations:
            logger.error(f"{what}: {v}")
        raise ManifestError(f"{what} violates {len(violations)} invariant(s); first: {violations[0]}")


# ---------------------------------------------------------------------------
# Synthetic corpus

@dataclass
class CorpusSpec:
    """Recipe for the desk-scale synthetic corpus"""

    commands: Tuple[str, ...] = DEFAULT_COMMANDS
    clips_per_command: int = 200
    keyword_duration_s: float = 1.0
    utterances_per_bucket: int = 40
    words: Tuple[str, ...] = UTTERANCE_WORDS
    sample_rate: int = 16000
    noise_std: float = 0.002
    silence_fraction: Tuple[float, float] = (0.10, 0.12)
    peak_range: Tuple[float, float] = (0.3, 0.7)
    phone_seconds: float = 0.08

    def __post_init__(self):
        self.commands = tuple(self.commands)
        self.words = tuple(self.words)
        self.silence_fraction = tuple(self.silence_fraction)
        self.peak_range = tuple(self.peak_range)
        bad = sorted({ch for w in self.commands + self.words for ch in w if ch not in PHONE_SYMBOLS})
        if bad:
            raise DomainError(f"Characters {bad} have no phone recipe")

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CorpusSpec":
        return cls(**data)

    @classmethod
    def load(cls, path: PathLike) -> "CorpusSpec":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def phone_recipe(symbol: str) -> Tuple[float, float, float, float]:
    """(f0, first formant, second formant, gain) of a character phone"""
    i = PHONE_SYMBOLS.index(symbol)
    f0 = 100.0 + 7.0 * i
    f1 = 300.0 + 90.0 * (i % 9)
    f2 = 1000.0 + 450.0 * (i // 9) + 40.0 * (i % 3)
    gain = 0.35 if symbol == " " else 1.0
    return f0, f1, f2, gain


def render_phones(text: str, n_samples: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Concatenated harmonic phones, one per character, unit-ish peak"""
    weights = rng.uniform(0.8, 1.2, size=len(text))
    bounds = np.round(np.concatenate([[0.0], np.cumsum(weights) / weights.sum()]) * n_samples).astype(int)
    f0_jitter = rng.uniform(0.97, 1.03)
    out = np.zeros(n_samples)
    ramp = max(1, int(0.005 * sample_rate))
    for symbol, start, stop in zip(text, bounds[:-1], bounds[1:]):
        length = stop - start
        if length <= 0:
            continue
        f0, f1, f2, gain = phone_recipe(symbol)
        f0 *= f0_jitter
        t = np.arange(length) / sample_rate
        harmonics = np.arange(1, int(4000.0 // f0) + 1) * f0
        amps = np.exp(-((harmonics - f1) / 150.0) ** 2) + 0.6 * np.exp(-((harmonics - f2) / 250.0) ** 2) + 0.05
        phases = rng.uniform(0.0, 2.0 * np.pi, size=harmonics.size)
        segment = np.sin(2.0 * np.pi * np.outer(t, harmonics) + phases) @ amps
        envelope = np.ones(length)
        r = min(ramp, length // 2)
        if r > 0:
            shape = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
            envelope[:r] = shape
            envelope[length - r:] = shape[::-1]
        out[start:stop] = gain * segment * envelope
    peak = np.max(np.abs(out))
    return out / peak if peak > 0 else out


def synth_clip(text: str, duration_s: float, spec: CorpusSpec, rng: np.random.Generator) -> Waveform:
    """Silence-padded phone rendering of text with background noise"""
    n_total = int(round(duration_s * spec.sample_rate))
    lead = int(round(rng.uniform(*spec.silence_fraction) * n_total))
    trail = int(round(rng.uniform(*spec.silence_fraction) * n_total))
    speech = render_phones(text, n_total - lead - trail, spec.sample_rate, rng) * rng.uniform(*spec.peak_range)
    samples = rng.normal(0.0, spec.noise_std, size=n_total)
    samples[lead:n_total - trail] += speech
    return Waveform(np.clip(samples, -1.0, 1.0), spec.sample_rate, text)


def _utterance_text(words: Sequence[str], n_chars: int, rng: np.random.Generator) -> str:
    chosen: List[str] = []
    while len(" ".join(chosen)) < n_chars:
        chosen.append(words[int(rng.integers(len(words)))])
    return " ".join(chosen)


def synth_corpus(spec: CorpusSpec, seed: int, out_dir: PathLike,
                 mfcc_cfg: Optional[MfccConfig] = None, vad: Optional[VadParams] = None,
                 progress: bool = True) -> DatasetManifest:
    """Deterministic keyword + utterance corpus under out_dir, with corpus.jsonl manifest"""
    out_dir = Path(out_dir)
    mfcc_cfg = mfcc_cfg or MfccConfig(sample_rate=spec.sample_rate)
    vad = vad or VadParams()
    manifest = DatasetManifest([], out_dir)

    jobs: List[Tuple[str, str, str, str, float]] = []
    for command in spec.commands:
        for i in range(spec.clips_per_command):
            jobs.append((f"kw-{command}-{i:04d}", f"keyword/{command}/{command}_{i:04d}.wav",
                         KEYWORD_COLLECTION, command, spec.keyword_duration_s))
    for bucket in BUCKET_ORDER:
        for i in range(spec.utterances_per_bucket):
            jobs.append((f"utt-{bucket}-{i:04d}", f"utterance/{bucket}/{bucket}_{i:04d}.wav",
                         UTTERANCE_COLLECTION, bucket, 0.0))

    for clip_id, rel_path, collection, group, duration in tqdm(jobs, desc="synthesize corpus", disable=not progress):
        rng = np.random.default_rng(substream_seed(seed, "corpus", clip_id))
        if collection == KEYWORD_COLLECTION:
            text = group
        else:
            lo, hi = BUCKETS[group]
            duration = float(rng.uniform(lo, hi))
            speech_s = duration * (1.0 - 2.0 * np.mean(spec.silence_fraction))
            text = _utterance_text(spec.words, max(1, int(speech_s / spec.phone_seconds)), rng)
        w = synth_clip(text, duration, spec, rng)
        path = out_dir / rel_path
        path.parent.mkdir(parents=True, exist_ok=True)
        write_wav(w, path)
        _, ratio = describe_clip(w, mfcc_cfg, vad)
        manifest.entries.append(ManifestEntry(
            id=clip_id, wav_path=rel_path, bucket=group if collection == KEYWORD_COLLECTION else bucket_for_duration(duration),
            source_id=clip_id, duration_s=w.duration_seconds, speech_ratio=ratio, transcript=text,
            collection=collection,
        ))

    manifest.meta = {"corpus": spec.to_dict(), "seed": seed, "vad": vad.to_dict(), "synthetic": True}
    passing = sum(1 for e in manifest.entries if passes_filter(e, vad.threshold))
    logger.info(f"Synthesized {len(manifest)} clips under {out_dir} "
                f"({passing / max(len(manifest), 1):.1%} pass the speech filter)")
    return manifest


# ---------------------------------------------------------------------------
# Ingestion of real corpora

def _ingest_clip(manifest: DatasetManifest, path: Path, clip_id: str, collection: str, bucket: Optional[str],
                 transcript: str, mfcc_cfg: MfccConfig, vad: VadParams, expected_rate: int) -> None:
    w = read_wav(path, expected_rate=expected_rate)
    duration, ratio = describe_clip(w, mfcc_cfg, vad)
    manifest.entries.append(ManifestEntry(
        id=clip_id, wav_path=manifest.relative_path(path), bucket=bucket or bucket_for_duration(duration),
        source_id=clip_id, duration_s=duration, speech_ratio=ratio, transcript=transcript, collection=collection,
    ))


def ingest_speech_commands(root: PathLike, commands: Sequence[str], mfcc_cfg: Optional[MfccConfig] = None,
                           vad: Optional[VadParams] = None, expected_rate: int = 16000) -> DatasetManifest:
    """Class-named folders of 1 s WAVs (the Speech Commands layout)"""
    root = Path(root)
    mfcc_cfg = mfcc_cfg or MfccConfig()
    vad = vad or VadParams()
    manifest = DatasetManifest([], root, {"vad": vad.to_dict(), "ingested": "speech_commands"})
    for command in commands:
        folder = root / command
        if not folder.is_dir():
            raise ManifestError(f"Speech Commands folder missing for {command!r}", [command])
        for path in sorted(folder.glob("*.wav")):
            _ingest_clip(manifest, path, f"sc-{command}-{path.stem}", KEYWORD_COLLECTION, command, command,
                         mfcc_cfg, vad, expected_rate)
    logger.info(f"Ingested {len(manifest)} Speech Commands clips from {root}")
    return manifest


def normalize_text(text: str) -> str:
    kept = "".join(ch if ch in PHONE_SYMBOLS else " " for ch in text.lower())
    return " ".join(kept.split())


def ingest_common_voice(folder: PathLike, transcript_csv: PathLike, mfcc_cfg: Optional[MfccConfig] = None,
                        vad: Optional[VadParams] = None, expected_rate: int = 16000) -> DatasetManifest:
    """Flat folder of WAVs plus a CSV/TSV with `path` and `sentence` columns"""
    folder = Path(folder)
    transcript_csv = Path(transcript_csv)
    mfcc_cfg = mfcc_cfg or MfccConfig()
    vad = vad or VadParams()
    manifest = DatasetManifest([], folder, {"vad": vad.to_dict(), "ingested": "common_voice"})
    delimiter = "\t" if transcript_csv.suffix == ".tsv" else ","
    missing = []
    with open(transcript_csv, "r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f, delimiter=delimiter):
            path = folder / row["path"]
            if path.suffix != ".wav":
                path = path.with_suffix(".wav")
            if not path.is_file():
                missing.append(row["path"])
                continue
            _ingest_clip(manifest, path, f"cv-{path.stem}", UTTERANCE_COLLECTION, None,
                         normalize_text(row["sentence"]), mfcc_cfg, vad, expected_rate)
    if missing:
        logger.warning(f"{len(missing)} transcript rows reference missing WAVs")
    logger.info(f"Ingested {len(manifest)} Common Voice clips from {folder}")
    return manifest
