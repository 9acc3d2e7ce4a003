"""
Attacks Component for advspeech
Gradient-based white-box attack under a peak-dB bound and genetic black-box attack
"""

import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
from tqdm.auto import tqdm

from .audio_core import (
    AMPLITUDE_FLOOR,
    Perturbation,
    Waveform,
    amplitude_bound,
    apply_and_clip,
    db_peak,
    db_relative,
    pcm16_grid,
    truncate_to_pcm16_step,
    write_wav,
)
from .dataset_gen import AttackRequest, DatasetManifest
from .errors import ConfigError, DivergenceError, DomainError, FormatError, ManifestError
from .seeding import substream_seed
from .victim import KeywordModel, SequenceModel, Victim, normalize_transcript

WHITE_BOX = "white_box"
BLACK_BOX = "black_box"
LOG_FLOOR = 1e-12

logger = logging.getLogger("Attacks")
wb_logger = logging.getLogger("WhiteBox")
bb_logger = logging.getLogger("BlackBox")

Target = Union[str, int]


@dataclass(frozen=True)
class WhiteBoxConfig:
    max_iters: int = 1000
    lr: float = 0.01
    c: float = 1.0
    tau_db: float = -20.0
    tau_decay_db: float = 2.0
    early_stop: bool = False
    # consecutive iterations without success before c doubles; None means max_iters // 5
    c_patience: Optional[int] = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.lr <= 0 or self.c <= 0:
            raise ConfigError("lr and c must be positive")
        if self.tau_decay_db < 0:
            raise ConfigError(f"tau_decay_db must be >= 0, got {self.tau_decay_db}")

    @property
    def patience(self) -> int:
        return self.c_patience if self.c_patience is not None else max(1, self.max_iters // 5)


@dataclass(frozen=True)
class BlackBoxConfig:
    population: int = 100
    max_generations: int = 500
    elite_count: int = 10
    mutation_prob: float = 0.005
    mutation_std: float = 0.005
    noise_bound: float = 0.02
    l2_penalty: float = 1e-3
    jobs: int = 1

    def __post_init__(self):
        if self.population < 2 or not 0 < self.elite_count < self.population:
            raise ConfigError(f"Need 0 < elite_count ({self.elite_count}) < population ({self.population})")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ConfigError(f"mutation_prob must be in [0, 1], got {self.mutation_prob}")
        if self.mutation_std < 0 or self.noise_bound <= 0 or self.max_generations < 0:
            raise ConfigError("mutation_std >= 0, noise_bound > 0 and max_generations >= 0 are required")


@dataclass
class AdversarialRecord:
    source_id: str
    source_label: Optional[str]
    target: str
    perturbation: Optional[Perturbation]
    success: bool
    iterations_used: int
    final_db_relative: float
    attack_kind: str
    victim_checkpoint_hash: str
    tau_db: Optional[float] = None
    seed: Optional[int] = None
    peak_abs_delta: float = 0.0
    history: List[float] = field(default_factory=list)
    target_class: Optional[str] = None
    adversarial_path: Optional[str] = None

    def adversarial_waveform(self, source: Waveform) -> Waveform:
        """x + delta as it is written to disk"""
        if self.perturbation is None:
            raise DomainError(f"Record {self.source_id} -> {self.target} carries no perturbation")
        w = apply_and_clip(source, self.perturbation)
        return Waveform(pcm16_grid(w.samples), w.sample_rate, self.target)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "source_id": self.source_id,
            "source_label": self.source_label,
            "target": self.target,
            "target_class": self.target_class,
            "success": self.success,
            "iterations_used": self.iterations_used,
            "final_db_relative": self.final_db_relative,
            "attack_kind": self.attack_kind,
            "victim_checkpoint_hash": self.victim_checkpoint_hash,
            "tau_db": self.tau_db,
            "seed": self.seed,
            "peak_abs_delta": self.peak_abs_delta,
            "history": self.history,
            "adversarial_path": self.adversarial_path,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AdversarialRecord":
        return cls(perturbation=None, **data)


def _record(kind: str, victim: Victim, x: Waveform, target: str, delta: np.ndarray, success: bool,
            iterations: int, history: List[float], seed: Optional[int], source_id: str,
            tau_db: Optional[float] = None) -> AdversarialRecord:
    return AdversarialRecord(
        source_id=source_id,
        source_label=x.label,
        target=target,
        perturbation=Perturbation(delta),
        success=success,
        iterations_used=iterations,
        final_db_relative=db_relative(x, delta),
        attack_kind=kind,
        victim_checkpoint_hash=victim.checkpoint_hash(),
        tau_db=tau_db,
        seed=seed,
        peak_abs_delta=float(np.max(np.abs(delta))) if delta.size else 0.0,
        history=history,
    )


def _resolve_target(victim: Victim, x: Waveform, target: Target):
    """Victim-native target value, its display string, and the source label in the same space"""
    if isinstance(victim, KeywordModel):
        index = victim.class_index(target) if isinstance(target, str) else int(target)
        if not 0 <= index < len(victim.class_names):
            raise DomainError(f"Target class {index} out of range")
        source = victim.class_index(x.label) if x.label in victim.class_names else None
        return index, victim.class_names[index], source
    text = normalize_transcript(str(target), victim.vocab)
    source = normalize_transcript(x.label, victim.vocab) if x.label is not None else None
    return text, text, source


def _hits(victim: Victim, x: Waveform, delta: np.ndarray, target) -> bool:
    """Success as observed on the PCM16 audio that will be stored"""
    return victim.output(pcm16_grid(np.clip(x.samples + delta, -1.0, 1.0))) == target


# ---------------------------------------------------------------------------
# White-box

def attack_white_box(victim: Victim, x: Waveform, target: Target, cfg: WhiteBoxConfig,
                     seed: Optional[int] = None, source_id: str = "", progress: bool = False) -> AdversarialRecord:
    """Adam on delta for ||delta||^2 + c * loss(x + delta, target), projected to db_relative < tau after every step"""
    goal, target_str, source = _resolve_target(victim, x, target)
    if source is not None and source == goal:
        raise DomainError(f"Target {target_str!r} equals the source label")
    if isinstance(victim, SequenceModel):
        victim.check_feasible(len(x), goal)

    n = len(x)
    zero = np.zeros(n)
    if _hits(victim, x, zero, goal):
        wb_logger.info(f"{source_id}: victim already outputs {target_str!r}")
        return _record(WHITE_BOX, victim, x, target_str, zero, True, 0, [], seed, source_id, cfg.tau_db)

    tau = cfg.tau_db
    c = cfg.c
    bound = amplitude_bound(x, tau) * (1.0 - 1e-9)
    delta = np.zeros(n)
    m = np.zeros(n)
    v = np.zeros(n)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best: Optional[np.ndarray] = None
    best_tau: Optional[float] = None
    since_success = 0
    history: List[float] = []
    iterations = 0

    for it in tqdm(range(1, cfg.max_iters + 1), desc=f"white-box {source_id}", disable=not progress):
        iterations = it
        adv = x.samples + delta
        inside = np.abs(adv) < 1.0
        loss, grad_adv = victim.loss_and_grad(np.clip(adv, -1.0, 1.0), goal)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad_adv)):
            wb_logger.error(f"{source_id}: non-finite loss at iteration {it}")
            raise DivergenceError(f"Non-finite attack loss at iteration {it}")
        history.append(float(np.dot(delta, delta) + c * loss))

        grad = 2.0 * delta + c * grad_adv * inside
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        delta = delta - cfg.lr * (m / (1.0 - b1 ** it)) / (np.sqrt(v / (1.0 - b2 ** it)) + eps)
        delta = np.clip(delta, -bound, bound)

        candidate = truncate_to_pcm16_step(delta)
        if _hits(victim, x, candidate, goal) and db_relative(x, candidate) < tau:
            level = db_relative(x, candidate)
            best, best_tau = candidate, tau
            wb_logger.debug(f"{source_id}: success at iteration {it}, {level:.2f} dB (tau {tau:.2f})")
            tau = min(tau, level) - cfg.tau_decay_db
            bound = amplitude_bound(x, tau) * (1.0 - 1e-9)
            delta = np.clip(delta, -bound, bound)
            c /= 2.0
            since_success = 0
            if cfg.early_stop:
                break
        else:
            since_success += 1
            if since_success >= cfg.patience:
                c *= 2.0
                since_success = 0

    success = best is not None
    delta_out = best if success else truncate_to_pcm16_step(delta)
    record = _record(WHITE_BOX, victim, x, target_str, delta_out, success, iterations, history, seed, source_id,
                     best_tau if success else tau)
    wb_logger.info(f"{source_id} -> {target_str!r}: {'success' if success else 'failure'} after {iterations} "
                   f"iterations, {record.final_db_relative:.2f} dB")
    return record


# ---------------------------------------------------------------------------
# Black-box

def _score_population(workers: Sequence[KeywordModel], x: Waveform, population: np.ndarray,
                      pool: Optional[ThreadPoolExecutor]) -> np.ndarray:
    def score_rows(args):
        worker, rows = args
        return [worker.scores(np.clip(x.samples + row, -1.0, 1.0)) for row in rows]

    if pool is None or len(workers) == 1:
        return np.array(score_rows((workers[0], population)))
    chunks = np.array_split(np.arange(population.shape[0]), len(workers))
    parts = pool.map(score_rows, [(w, population[idx]) for w, idx in zip(workers, chunks)])
    return np.array([s for part in parts for s in part])


def attack_black_box(victim: KeywordModel, x: Waveform, target: Target, cfg: BlackBoxConfig,
                     seed: int = 0, source_id: str = "", progress: bool = False) -> AdversarialRecord:
    """Genetic search over perturbations bounded by noise_bound, using only the victim's output scores"""
    goal, target_str, source = _resolve_target(victim, x, target)
    n = len(x)
    if source is None:
        source = victim.output(x.samples)
    if source == goal:
        return _record(BLACK_BOX, victim, x, target_str, np.zeros(n), True, 0, [], seed, source_id)

    rng = np.random.default_rng(seed)
    bound = cfg.noise_bound
    population = rng.uniform(-bound, bound, size=(cfg.population, n))
    workers = [victim.clone() for _ in range(max(1, cfg.jobs))]
    history: List[float] = []
    found: Optional[np.ndarray] = None
    generation = 0

    pool = ThreadPoolExecutor(max_workers=len(workers)) if len(workers) > 1 else None
    try:
        for generation in tqdm(range(cfg.max_generations + 1), desc=f"black-box {source_id}", disable=not progress):
            scores = _score_population(workers, x, population, pool)
            fitness = (np.log(np.maximum(scores[:, goal], LOG_FLOOR))
                       - cfg.l2_penalty * np.sum(population ** 2, axis=1))
            order = np.argsort(-fitness, kind="stable")
            history.append(float(fitness[order[0]]))

            for i in order:
                if int(np.argmax(scores[i])) != goal:
                    continue
                candidate = truncate_to_pcm16_step(population[i])
                if _hits(workers[0], x, candidate, goal):
                    found = candidate
                    break
            if found is not None or generation == cfg.max_generations:
                break

            elites = population[order[: cfg.elite_count]]
            weights = fitness - fitness.min() + 1e-12
            parents = rng.choice(cfg.population, size=(cfg.population - cfg.elite_count, 2), p=weights / weights.sum())
            take_first = rng.random((parents.shape[0], n)) < 0.5
            children = np.where(take_first, population[parents[:, 0]], population[parents[:, 1]])
            mutate = rng.random(children.shape) < cfg.mutation_prob
            children = children + mutate * rng.normal(0.0, cfg.mutation_std, size=children.shape)
            population = np.vstack([elites, np.clip(children, -bound, bound)])
    finally:
        if pool is not None:
            pool.shutdown()

    success = found is not None
    delta = found if success else truncate_to_pcm16_step(population[0])
    record = _record(BLACK_BOX, victim, x, target_str, delta, success, generation, history, seed, source_id)
    bb_logger.info(f"{source_id} -> {target_str!r}: {'success' if success else 'failure'} at generation {generation}")
    return record


# ---------------------------------------------------------------------------
# Batches

class AttackJob(NamedTuple):
    source_id: str
    target_class: str
    target: Target


# runner(victim, x, target, seed=..., source_id=...) -> AdversarialRecord
AttackFn = Callable[..., AdversarialRecord]


@dataclass
class BatchResult:
    records: List[AdversarialRecord]
    summary: Dict[str, Any]


def job_seed(master_seed: int, source_id: str, target_class: str) -> int:
    return substream_seed(master_seed, "attack", source_id, target_class)


def batch_attack(manifest: DatasetManifest, plan: Sequence[AttackJob], runner: AttackFn, victim: Victim,
                 master_seed: int, out_dir: Union[str, Path], jobs: int = 1, progress: bool = True) -> BatchResult:
    """Run every job of the plan; records come back in plan order and failures are kept"""
    entries = manifest.by_id()
    missing = {j.source_id for j in plan if j.source_id not in entries or not manifest.resolve(entries[j.source_id]).is_file()}
    if missing:
        logger.error(f"{len(missing)} attack sources are missing")
        raise ManifestError("Missing attack sources", missing)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rate = victim.mfcc_cfg.sample_rate

    def run(job: AttackJob) -> AdversarialRecord:
        entry = entries[job.source_id]
        x = manifest.load_waveform(entry, rate)
        x = x.with_label(entry.bucket if isinstance(victim, KeywordModel) else entry.transcript)
        record = runner(victim.clone(), x, job.target, seed=job_seed(master_seed, job.source_id, job.target_class),
                        source_id=job.source_id)
        record.target_class = job.target_class
        if record.success:
            path = out_dir / f"{job.source_id}__to_{job.target_class}.wav"
            write_wav(record.adversarial_waveform(x), path)
            record.adversarial_path = str(path)
        return record

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        records = list(tqdm(pool.map(run, plan), total=len(plan), desc="attacks", disable=not progress))

    summary = summarize(records, {j.source_id: entries[j.source_id].bucket for j in plan})
    logger.info(f"Batch attack: {summary['successes']}/{summary['total']} successful")
    return BatchResult(records, summary)


def summarize(records: Sequence[AdversarialRecord], buckets: Dict[str, Optional[str]]) -> Dict[str, Any]:
    """Success rate per (bucket, target class) cell and overall"""
    cells: Dict[str, List[int]] = defaultdict(lambda: [0, 0])
    for r in records:
        key = f"{buckets.get(r.source_id)}|{r.target_class or r.target}"
        cells[key][0] += int(r.success)
        cells[key][1] += 1
    successes = sum(int(r.success) for r in records)
    return {
        "total": len(records),
        "successes": successes,
        "success_rate": successes / len(records) if records else None,
        "cells": {k: {"successes": s, "total": t, "success_rate": s / t} for k, (s, t) in sorted(cells.items())},
    }


def dataset_runner(sources: DatasetManifest, victim: Victim, runner: AttackFn,
                   target_of: Callable[[str], Target], master_seed: int, out_dir: Union[str, Path],
                   jobs: int = 1, records_path: Optional[Union[str, Path]] = None,
                   progress: bool = True) -> Callable[[Sequence[AttackRequest]], List[AdversarialRecord]]:
    """Adapt batch_attack to the request/outcome contract of the dataset builders"""

    def run(requests: Sequence[AttackRequest]) -> List[AdversarialRecord]:
        plan = [AttackJob(r.source.id, r.target_class, target_of(r.target_class)) for r in requests]
        result = batch_attack(sources, plan, runner, victim, master_seed, out_dir, jobs, progress)
        if records_path is not None:
            save_records(result.records, records_path, result.summary)
        return result.records

    return run


# ---------------------------------------------------------------------------
# Persistence

def save_records(records: Sequence[AdversarialRecord], path: Union[str, Path],
                 summary: Optional[Dict[str, Any]] = None) -> None:
    """JSON-lines records; the summary goes to <name>.summary.json"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    if summary is not None:
        with open(path.with_name(path.stem + ".summary.json"), "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
    logger.info(f"Saved {len(records)} attack records to {path}")


def load_records(path: Union[str, Path]) -> List[AdversarialRecord]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [AdversarialRecord.from_dict(json.loads(line)) for line in f if line.strip()]
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Cannot read attack records {path}: {e}")
        raise FormatError(f"Cannot read attack records {path}: {e}") from e


def zero_perturbation_db(x: Waveform) -> float:
    """db_relative of an all-zero perturbation: the amplitude floor minus the host peak"""
    return 20.0 * np.log10(AMPLITUDE_FLOOR) - db_peak(x.samples)
