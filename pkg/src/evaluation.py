"""
Evaluation Component for advspeech
Train/test scenarios, per-cell breakdowns, unknown-target runs and confidence intervals
"""

import csv
import logging
import math
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .dataset_gen import ADVERSARIAL, BUCKET_ORDER, NORMAL, DatasetManifest, ManifestEntry, find_leakage
from .detector import DetectorSettings, FeatureBank, build_detector, predict_batch, train_detector, true_labels
from .errors import DomainError, FormatError, LeakageError, ManifestError
from .features import MfccConfig

logger = logging.getLogger("Evaluation")

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ScenarioSpec:
    id: int
    train_sets: Tuple[str, ...]
    test_set: str

    @property
    def name(self) -> str:
        return f"Train {'&'.join(self.train_sets)}, Test {self.test_set}"


SCENARIOS: Tuple[ScenarioSpec, ...] = (
    ScenarioSpec(1, ("A",), "A"),
    ScenarioSpec(2, ("A",), "B"),
    ScenarioSpec(3, ("B",), "A"),
    ScenarioSpec(4, ("B",), "B"),
    ScenarioSpec(5, ("A", "B"), "A"),
    ScenarioSpec(6, ("A", "B"), "B"),
)

UNKNOWN_TARGET_HOLDOUTS = ("long", "medium", "short")


def scenario_by_id(scenario_id: int) -> ScenarioSpec:
    for spec in SCENARIOS:
        if spec.id == scenario_id:
            return spec
    raise DomainError(f"Unknown scenario {scenario_id}; valid ids are 1..{len(SCENARIOS)}")


# ---------------------------------------------------------------------------
# Report schema

class Breakdown(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: str
    rows: List[str]
    cols: List[str]
    accuracy: List[List[Optional[float]]]
    counts: List[List[int]]

    @model_validator(mode="after")
    def _check_dims(self) -> "Breakdown":
        for grid in (self.accuracy, self.counts):
            if len(grid) != len(self.rows) or any(len(row) != len(self.cols) for row in grid):
                raise ValueError("breakdown grid does not match its row/column labels")
        return self

    def cell(self, row: str, col: str) -> Optional[float]:
        return self.accuracy[self.rows.index(row)][self.cols.index(col)]


class ScenarioReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: int
    name: str
    train_sets: List[str]
    test_set: str
    runs: int = Field(ge=1)
    seeds: List[int]
    accuracies: List[float]
    mean_accuracy: float
    ci95_halfwidth: Optional[float] = None
    n_train: int
    n_test: int
    checkpoint_hashes: List[str] = Field(default_factory=list)
    breakdown: Optional[Breakdown] = None

    @model_validator(mode="after")
    def _check_runs(self) -> "ScenarioReport":
        if len(self.accuracies) != self.runs or len(self.seeds) != self.runs:
            raise ValueError(f"{self.runs} runs but {len(self.accuracies)} accuracies / {len(self.seeds)} seeds")
        if any(not 0.0 <= a <= 1.0 for a in self.accuracies):
            raise ValueError("accuracies must lie in [0, 1]")
        return self


def write_report(report: BaseModel, path: PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote report {path}")


def read_report(path: PathLike) -> ScenarioReport:
    try:
        return ScenarioReport.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValidationError) as e:
        logger.error(f"Invalid report {path}: {e}")
        raise FormatError(f"Invalid report {path}: {e}") from e


# ---------------------------------------------------------------------------
# Statistics

def accuracy(predicted: Sequence[int], truth: Sequence[int]) -> float:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape or predicted.size == 0:
        raise DomainError(f"Cannot score {predicted.size} predictions against {truth.size} labels")
    return float(np.mean(predicted == truth))


def ci95(accuracies: Sequence[float]) -> Tuple[float, float]:
    """Mean and 1.96 * s / sqrt(n) with the sample standard deviation"""
    values = np.asarray(accuracies, dtype=np.float64)
    if values.size < 2:
        raise DomainError(f"ci95 needs at least 2 values, got {values.size}")
    return float(values.mean()), float(1.96 * values.std(ddof=1) / math.sqrt(values.size))


def scenario_ordering_holds(mean_by_id: Mapping[int, float], margin: float = 0.05) -> bool:
    """Matched >= multi-condition - margin >= train-B/test-A"""
    matched = min(mean_by_id[1], mean_by_id[4])
    multi = max(mean_by_id[5], mean_by_id[6]) - margin
    return matched >= multi >= mean_by_id[3]


# ---------------------------------------------------------------------------
# Scenario runs

def combine(manifests: Sequence[DatasetManifest], split: str) -> DatasetManifest:
    """One manifest holding the given split of every input, paths rebased onto the first root"""
    if not manifests:
        raise ManifestError("No manifests to combine")
    root = manifests[0].root
    entries: List[ManifestEntry] = []
    for m in manifests:
        entries.extend(m.split_view(split).rebase(root).entries)
    duplicates = {i for i, n in Counter(e.id for e in entries).items() if n > 1}
    if duplicates:
        raise ManifestError("Entry ids collide across manifests", duplicates)
    return DatasetManifest(entries, root, {"combined": [m.meta.get("dataset") for m in manifests], "split": split})


def check_leakage(train: DatasetManifest, test: DatasetManifest) -> None:
    leaked = find_leakage(train.entries, test.entries)
    if leaked:
        logger.error(f"{len(leaked)} sources appear in both train and test")
        raise LeakageError("Train/test leakage", leaked)


@dataclass
class RunOutcome:
    run: int
    seed: int
    accuracy: float
    correct: np.ndarray
    checkpoint_hash: str


def _run_detector(run: int, seed: int, train: DatasetManifest, test: DatasetManifest, mfcc_cfg: MfccConfig,
                  settings: DetectorSettings, bank: FeatureBank) -> RunOutcome:
    model = build_detector(mfcc_cfg, settings.third_activation, seed, settings.third_pool)
    train_detector(model, train, settings.epochs, seed, settings.lr, settings.batch_size, bank, progress=False)
    predicted = predict_batch(model, test, bank=bank)
    truth = true_labels(test.entries)
    acc = accuracy(predicted, truth)
    logger.info(f"run {run} (seed {seed}): accuracy {acc:.4f}")
    return RunOutcome(run, seed, acc, predicted == truth, model.checkpoint_hash())


def run_detector_runs(train: DatasetManifest, test: DatasetManifest, runs: int, base_seed: int,
                      mfcc_cfg: MfccConfig, settings: DetectorSettings, jobs: int = 1,
                      bank: Optional[FeatureBank] = None) -> List[RunOutcome]:
    """Independent detectors seeded base_seed + r, trained on train and scored on test; sorted by run"""
    if runs < 1:
        raise DomainError(f"runs must be >= 1, got {runs}")
    check_leakage(train, test)
    if bank is None:
        bank = FeatureBank(mfcc_cfg)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        futures = [pool.submit(_run_detector, r, base_seed + r, train, test, mfcc_cfg, settings, bank)
                   for r in range(runs)]
        outcomes = [f.result() for f in futures]
    return sorted(outcomes, key=lambda o: o.run)


def _summary_stats(outcomes: Sequence[RunOutcome]) -> Tuple[float, Optional[float]]:
    accs = [o.accuracy for o in outcomes]
    if len(accs) < 2:
        return accs[0], None
    return ci95(accs)


def run_scenario(spec: ScenarioSpec, datasets: Mapping[str, DatasetManifest], runs: int, base_seed: int,
                 mfcc_cfg: MfccConfig, settings: DetectorSettings, jobs: int = 1,
                 bank: Optional[FeatureBank] = None) -> ScenarioReport:
    missing = sorted({*spec.train_sets, spec.test_set} - set(datasets))
    if missing:
        raise ManifestError(f"Scenario {spec.id} needs datasets", missing)
    train = combine([datasets[name] for name in spec.train_sets], "train")
    test = combine([datasets[spec.test_set]], "test")
    logger.info(f"Scenario {spec.id} ({spec.name}): {len(train)} train / {len(test)} test entries, {runs} runs")
    outcomes = run_detector_runs(train, test, runs, base_seed, mfcc_cfg, settings, jobs, bank)

    breakdown_fn = breakdown_A if spec.test_set == "A" else breakdown_B
    breakdown = breakdown_fn(test.entries, [o.correct for o in outcomes])
    mean, half = _summary_stats(outcomes)
    report = ScenarioReport(
        id=spec.id, name=spec.name, train_sets=list(spec.train_sets), test_set=spec.test_set, runs=runs,
        seeds=[o.seed for o in outcomes], accuracies=[o.accuracy for o in outcomes], mean_accuracy=mean,
        ci95_halfwidth=half, n_train=len(train), n_test=len(test),
        checkpoint_hashes=[o.checkpoint_hash for o in outcomes], breakdown=breakdown,
    )
    logger.info(f"Scenario {spec.id}: mean accuracy {mean:.4f}" + (f" +/- {half:.4f}" if half is not None else ""))
    return report


# ---------------------------------------------------------------------------
# Breakdowns

def pair_normals(entries: Sequence[ManifestEntry]) -> Dict[str, Optional[str]]:
    """Adversarial id -> normal id: sorted adversarial and sorted normal entries zipped within each bucket"""
    by_bucket: Dict[str, Dict[str, List[str]]] = defaultdict(lambda: {ADVERSARIAL: [], NORMAL: []})
    for e in entries:
        by_bucket[e.bucket][e.label].append(e.id)
    pairs: Dict[str, Optional[str]] = {}
    for groups in by_bucket.values():
        adv = sorted(groups[ADVERSARIAL])
        normals = sorted(groups[NORMAL])
        for i, adv_id in enumerate(adv):
            pairs[adv_id] = normals[i] if i < len(normals) else None
    return pairs


def _breakdown(kind: str, entries: Sequence[ManifestEntry], correct_per_run: Sequence[np.ndarray],
               rows: Sequence[str], cols: Sequence[str],
               cell_of: Callable[[ManifestEntry], Optional[Tuple[str, str]]]) -> Breakdown:
    index = {e.id: i for i, e in enumerate(entries)}
    pairs = pair_normals(entries)
    hits = np.zeros((len(rows), len(cols)))
    totals = np.zeros((len(rows), len(cols)), dtype=np.int64)
    adversarial_counts = np.zeros((len(rows), len(cols)), dtype=np.int64)
    for e in entries:
        if e.label != ADVERSARIAL:
            continue
        cell = cell_of(e)
        if cell is None or cell[0] not in rows or cell[1] not in cols:
            continue
        r, c = rows.index(cell[0]), cols.index(cell[1])
        adversarial_counts[r, c] += 1
        members = [index[e.id]] + ([index[pairs[e.id]]] if pairs.get(e.id) else [])
        for correct in correct_per_run:
            hits[r, c] += sum(bool(correct[i]) for i in members)
            totals[r, c] += len(members)
    grid = [[(hits[r, c] / totals[r, c]) if totals[r, c] else None for c in range(len(cols))]
            for r in range(len(rows))]
    return Breakdown(kind=kind, rows=list(rows), cols=list(cols), accuracy=grid,
                     counts=adversarial_counts.tolist())


def breakdown_A(entries: Sequence[ManifestEntry], correct_per_run: Sequence[np.ndarray]) -> Breakdown:
    """Bucket x target-class accuracy; each cell holds its adversarial entries plus their paired normals"""
    return _breakdown("bucket_target", entries, correct_per_run, BUCKET_ORDER, BUCKET_ORDER,
                      lambda e: (e.bucket, e.target_class))


def breakdown_B(entries: Sequence[ManifestEntry], correct_per_run: Sequence[np.ndarray],
                commands: Optional[Sequence[str]] = None) -> Breakdown:
    """Source-command x target-command accuracy; the diagonal stays empty"""
    if commands is None:
        commands = sorted({e.bucket for e in entries if e.bucket is not None})
    return _breakdown("command_target", entries, correct_per_run, list(commands), list(commands),
                      lambda e: (e.bucket, e.target_class))


def export_breakdown_csv(breakdown: Breakdown, path: PathLike) -> None:
    """Plot data: one row per source bucket/command, one column per target, empty cells blank"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["source"] + breakdown.cols)
        for name, row in zip(breakdown.rows, breakdown.accuracy):
            writer.writerow([name] + ["" if v is None else f"{100.0 * v:.2f}" for v in row])
    logger.info(f"Wrote breakdown plot data to {path}")


# ---------------------------------------------------------------------------
# Unknown targets

class UnknownTargetReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    held_out: str
    train_targets: List[str]
    runs: int = Field(ge=1)
    accuracies: List[float]
    mean_accuracy: float
    ci95_halfwidth: Optional[float] = None
    n_train: int
    n_test: int


def _with_matched_normals(entries: Sequence[ManifestEntry], keep_adversarial: Callable[[ManifestEntry], bool]
                          ) -> List[ManifestEntry]:
    adversarial = [e for e in entries if e.label == ADVERSARIAL and keep_adversarial(e)]
    need: Dict[str, int] = defaultdict(int)
    for e in adversarial:
        need[e.bucket] += 1
    normals = sorted((e for e in entries if e.label == NORMAL), key=lambda e: e.id)
    chosen: List[ManifestEntry] = []
    for e in normals:
        if need.get(e.bucket, 0) > 0:
            chosen.append(e)
            need[e.bucket] -= 1
    short = {b: n for b, n in need.items() if n > 0}
    if short:
        logger.warning(f"Not enough normal clips to match adversarial counts: {short}")
    return adversarial + chosen


def unknown_target_experiment(dataset_a: DatasetManifest, held_out: str, runs: int, seed: int,
                              mfcc_cfg: MfccConfig, settings: DetectorSettings, jobs: int = 1,
                              bank: Optional[FeatureBank] = None) -> UnknownTargetReport:
    """Train on two target classes of dataset A, test on adversarial examples of the third"""
    if held_out not in BUCKET_ORDER:
        raise DomainError(f"held_out must be one of {BUCKET_ORDER}, got {held_out!r}")
    train_targets = [t for t in BUCKET_ORDER if t != held_out]
    train = dataset_a.filter(lambda e: e.split == "train")
    test = dataset_a.filter(lambda e: e.split == "test")
    train.entries = _with_matched_normals(train.entries, lambda e: e.target_class != held_out)
    test.entries = _with_matched_normals(test.entries, lambda e: e.target_class == held_out)
    logger.info(f"Unknown target {held_out}: {len(train)} train / {len(test)} test entries")
    outcomes = run_detector_runs(train, test, runs, seed, mfcc_cfg, settings, jobs, bank)
    mean, half = _summary_stats(outcomes)
    return UnknownTargetReport(held_out=held_out, train_targets=train_targets, runs=runs,
                               accuracies=[o.accuracy for o in outcomes], mean_accuracy=mean,
                               ci95_halfwidth=half, n_train=len(train), n_test=len(test))
