"""
Pipeline Coordinator for advspeech
Runs gen-corpus -> train-victims -> build-a -> build-b -> eval with hash-keyed stage caching
"""

import json
import logging
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from .attacks import attack_black_box, attack_white_box, dataset_runner
from .config_manager import ConfigManager
from .dataset_gen import (
    DEFAULT_TARGETS,
    DatasetManifest,
    build_dataset_A,
    build_dataset_B,
    ensure_valid,
    ingest_common_voice,
    ingest_speech_commands,
    split_train_test,
    synth_corpus,
)
from .detector import FeatureBank
from .errors import AdvSpeechError, ConfigError, StageError
from .evaluation import (
    UNKNOWN_TARGET_HOLDOUTS,
    export_breakdown_csv,
    run_scenario,
    scenario_by_id,
    scenario_ordering_holds,
    unknown_target_experiment,
    write_report,
)
from .seeding import hash_file, hash_json
from .victim import load_victim, train_keyword_model, train_sequence_model

STAGES = ("gen-corpus", "train-victims", "build-a", "build-b", "eval")
STAGE_FILE = ".stage.json"
FAILURE_MARKER = "FAILED"


class Pipeline:
    """Stage coordinator; each stage owns one directory under the work root"""

    def __init__(self, manager: ConfigManager, progress: bool = True, force: bool = False):
        self.logger = logging.getLogger("Pipeline")
        self.manager = manager
        self.config = manager.config
        self.progress = progress
        self.force = force
        work = manager.work_root
        self.dirs: Dict[str, Path] = {
            "gen-corpus": manager.corpus_dir,
            "train-victims": work / "victims",
            "build-a": work / "dataset_a",
            "build-b": work / "dataset_b",
            "eval": work / "reports",
        }
        self._handlers: Dict[str, Callable[[Path], List[Path]]] = {
            "gen-corpus": self._gen_corpus,
            "train-victims": self._train_victims,
            "build-a": self._build_a,
            "build-b": self._build_b,
            "eval": self._evaluate,
        }

    # -- artifact locations -------------------------------------------------

    @property
    def corpus_manifest(self) -> Path:
        return self.dirs["gen-corpus"] / "corpus.jsonl"

    @property
    def keyword_victim(self) -> Path:
        return self.dirs["train-victims"] / "keyword.ann"

    @property
    def sequence_victim(self) -> Path:
        return self.dirs["train-victims"] / "sequence.ann"

    def dataset_manifest(self, name: str) -> Path:
        return self.dirs[f"build-{name.lower()}"] / "manifest.jsonl"

    # -- stage keys ----------------------------------------------------------

    def _inputs(self, stage: str) -> Dict[str, Path]:
        return {
            "gen-corpus": {},
            "train-victims": {"corpus": self.corpus_manifest},
            "build-a": {"corpus": self.corpus_manifest, "victim": self.sequence_victim},
            "build-b": {"corpus": self.corpus_manifest, "victim": self.keyword_victim},
            "eval": {"dataset_a": self.dataset_manifest("A"), "dataset_b": self.dataset_manifest("B")},
        }[stage]

    def _sections(self, stage: str) -> Sequence[str]:
        return {
            "gen-corpus": ("paths", "corpus", "mfcc", "vad"),
            "train-victims": ("victim", "mfcc"),
            "build-a": ("white_box", "dataset", "vad"),
            "build-b": ("black_box", "dataset", "vad"),
            "eval": ("detector", "evaluation", "mfcc"),
        }[stage]

    def stage_key(self, stage: str) -> Dict:
        inputs = {}
        for name, path in self._inputs(stage).items():
            if not path.is_file():
                raise StageError(f"Stage {stage} needs {path}; run the earlier stages first")
            inputs[name] = hash_file(path)
        return {"stage": stage, "config": self.manager.section_hash(*self._sections(stage)), "inputs": inputs}

    def is_cached(self, stage: str, key: Dict) -> bool:
        record_path = self.dirs[stage] / STAGE_FILE
        if self.force or not record_path.is_file():
            return False
        try:
            record = json.loads(record_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            self.logger.warning(f"Unreadable stage record for {stage}; re-running")
            return False
        if record.get("key") != key:
            self.logger.info(f"Stage {stage}: configuration or inputs changed")
            return False
        for rel, digest in record.get("outputs", {}).items():
            path = self.dirs[stage] / rel
            if not path.is_file() or hash_file(path) != digest:
                self.logger.warning(f"Stage {stage}: output {rel} is missing or modified; re-running")
                return False
        return True

    def _record(self, stage: str, key: Dict, outputs: List[Path]) -> None:
        directory = self.dirs[stage]
        record = {
            "key": key,
            "key_hash": hash_json(key),
            "outputs": {p.relative_to(directory).as_posix(): hash_file(p) for p in outputs},
        }
        (directory / STAGE_FILE).write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")

    # -- driver --------------------------------------------------------------

    def run_stage(self, stage: str) -> bool:
        """Run one stage unless cached; returns True when work was done"""
        if stage not in self._handlers:
            raise ConfigError(f"Unknown stage {stage!r}; stages are {', '.join(STAGES)}")
        directory = self.dirs[stage]
        key = self.stage_key(stage)
        if self.is_cached(stage, key):
            self.logger.info(f"Stage {stage}: up to date, skipped")
            return False

        self.logger.info(f"Stage {stage}: starting")
        directory.mkdir(parents=True, exist_ok=True)
        marker = directory / FAILURE_MARKER
        marker.unlink(missing_ok=True)
        (directory / STAGE_FILE).unlink(missing_ok=True)
        try:
            outputs = self._handlers[stage](directory)
        except (AdvSpeechError, OSError) as e:
            marker.write_text(f"{type(e).__name__}: {e}\n", encoding="utf-8")
            self.logger.error(f"Stage {stage} failed: {e}")
            raise StageError(f"Stage {stage} failed: {e}") from e
        outputs.append(self.manager.save(directory))
        self._record(stage, key, outputs)
        self.logger.info(f"Stage {stage}: done")
        return True

    def run(self, stages: Optional[Sequence[str]] = None) -> int:
        for stage in stages or STAGES:
            self.run_stage(stage)
        return 0

    # -- stages --------------------------------------------------------------

    def _gen_corpus(self, directory: Path) -> List[Path]:
        cfg = self.config
        mfcc_cfg = self.manager.mfcc_config()
        vad = self.manager.vad_params()
        if cfg.corpus.source == "synthetic":
            manifest = synth_corpus(self.manager.corpus_spec(), self.manager.seed("corpus"), directory,
                                    mfcc_cfg, vad, progress=self.progress)
        else:
            parts: List[DatasetManifest] = []
            if cfg.paths.speech_commands_dir:
                parts.append(ingest_speech_commands(cfg.paths.speech_commands_dir, cfg.corpus.commands,
                                                    mfcc_cfg, vad, mfcc_cfg.sample_rate))
            if cfg.paths.common_voice_dir and cfg.paths.common_voice_csv:
                parts.append(ingest_common_voice(cfg.paths.common_voice_dir, cfg.paths.common_voice_csv,
                                                 mfcc_cfg, vad, mfcc_cfg.sample_rate))
            if not parts:
                raise ConfigError(f"Corpus source {cfg.corpus.source!r} needs its paths.* directories")
            manifest = DatasetManifest([], directory, {"vad": vad.to_dict(), "ingested": cfg.corpus.source})
            for part in parts:
                manifest.entries.extend(part.rebase(directory).entries)
        path = manifest.save(self.corpus_manifest)
        return [path, path.with_name(path.stem + ".meta.json")]

    def _train_victims(self, directory: Path) -> List[Path]:
        v = self.config.victim
        corpus = DatasetManifest.load(self.corpus_manifest)
        mfcc_cfg = self.manager.mfcc_config()
        keyword, kw_report = train_keyword_model(
            corpus, v.keyword_epochs, self.manager.seed("victim", "keyword"), mfcc_cfg,
            class_names=self.config.corpus.commands, lr=v.lr, batch_size=v.batch_size, progress=self.progress)
        keyword.label_only = v.label_only
        sequence, seq_report = train_sequence_model(
            corpus, v.sequence_epochs, self.manager.seed("victim", "sequence"), mfcc_cfg, lr=v.lr,
            progress=self.progress)
        keyword.save(self.keyword_victim)
        sequence.save(self.sequence_victim)
        report = directory / "victims_report.json"
        report.write_text(json.dumps({"keyword": kw_report.to_dict(), "sequence": seq_report.to_dict()},
                                     indent=2), encoding="utf-8")
        return [self.keyword_victim, self.sequence_victim, report]

    def _finish_dataset(self, manifest: DatasetManifest, name: str, directory: Path) -> List[Path]:
        split = split_train_test(manifest, self.config.dataset.train_fraction, self.manager.seed("split", name))
        ensure_valid(split, self.manager.speech_threshold(), f"dataset {name}")
        path = split.save(self.dataset_manifest(name))
        records = directory / "records.jsonl"
        return [path, path.with_name(path.stem + ".meta.json"), records]

    def _build_a(self, directory: Path) -> List[Path]:
        corpus = DatasetManifest.load(self.corpus_manifest)
        victim = load_victim(self.sequence_victim)
        texts = {t.target_class: t.text for t in DEFAULT_TARGETS}
        runner = dataset_runner(corpus, victim, partial(attack_white_box, cfg=self.manager.white_box()),
                                texts.__getitem__, self.manager.seed("attack", "A"), directory / "adversarial",
                                self.config.jobs, directory / "records.jsonl", self.progress)
        manifest = build_dataset_A(corpus, DEFAULT_TARGETS, self.config.dataset.n_per_bucket, runner,
                                   self.manager.seed("dataset", "A"), directory, self.manager.speech_threshold())
        return self._finish_dataset(manifest, "A", directory)

    def _build_b(self, directory: Path) -> List[Path]:
        corpus = DatasetManifest.load(self.corpus_manifest)
        victim = load_victim(self.keyword_victim)
        victim.label_only = self.config.victim.label_only
        runner = dataset_runner(corpus, victim, partial(attack_black_box, cfg=self.manager.black_box()),
                                lambda name: name, self.manager.seed("attack", "B"), directory / "adversarial",
                                self.config.jobs, directory / "records.jsonl", self.progress)
        manifest = build_dataset_B(corpus, self.manager.dataset_commands(), self.config.dataset.n_per_command,
                                   runner, self.manager.seed("dataset", "B"), directory,
                                   self.manager.speech_threshold())
        return self._finish_dataset(manifest, "B", directory)

    def _evaluate(self, directory: Path) -> List[Path]:
        ev = self.config.evaluation
        datasets = {"A": DatasetManifest.load(self.dataset_manifest("A")),
                    "B": DatasetManifest.load(self.dataset_manifest("B"))}
        mfcc_cfg = self.manager.mfcc_config()
        settings = self.manager.detector_settings()
        bank = FeatureBank(mfcc_cfg)
        base_seed = self.manager.seed("eval") % (2 ** 31)
        outputs: List[Path] = []
        means: Dict[int, float] = {}
        for scenario_id in ev.scenarios:
            report = run_scenario(scenario_by_id(scenario_id), datasets, ev.runs, base_seed, mfcc_cfg, settings,
                                  self.config.jobs, bank)
            means[scenario_id] = report.mean_accuracy
            path = directory / f"scenario_{scenario_id}.json"
            write_report(report, path)
            outputs.append(path)
            if report.breakdown is not None:
                csv_path = directory / f"scenario_{scenario_id}_breakdown.csv"
                export_breakdown_csv(report.breakdown, csv_path)
                outputs.append(csv_path)
        if ev.unknown_target:
            for held_out in UNKNOWN_TARGET_HOLDOUTS:
                report = unknown_target_experiment(datasets["A"], held_out, ev.runs, base_seed, mfcc_cfg, settings,
                                                   self.config.jobs, bank)
                path = directory / f"unknown_target_{held_out}.json"
                write_report(report, path)
                outputs.append(path)
        summary = {"mean_accuracy": {str(k): v for k, v in sorted(means.items())}}
        if {1, 3, 4, 5, 6} <= set(means):
            summary["ordering_holds"] = scenario_ordering_holds(means)
        summary_path = directory / "summary.json"
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
        outputs.append(summary_path)
        return outputs
