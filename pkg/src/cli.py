"""
Command Line Component for advspeech
Argument surface for every stage plus the single-file tools (attack, classify, spectrogram)
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

from .attacks import attack_black_box, attack_white_box
from .audio_core import read_wav, write_wav
from .config_manager import PRESETS, ConfigManager, resolve_config
from .dataset_gen import DatasetManifest, validate_manifest
from .detector import build_detector, classify, load_detector, train_detector
from .errors import AdvSpeechError, ConfigError, DomainError
from .evaluation import (
    combine,
    export_breakdown_csv,
    run_scenario,
    scenario_by_id,
    unknown_target_experiment,
    write_report,
)
from .features import export_spectrogram_csv
from .pipeline import STAGES, Pipeline
from .victim import KeywordModel, load_victim

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ADVERSARIAL = 3
EXIT_FAILURE = 4

logger = logging.getLogger("CLI")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advspeech", description="Adversarial speech generation and detection")
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="Preset defaults (desk or full-scale)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one configuration field; repeatable")
    parser.add_argument("--jobs", type=int, help="Cap on worker threads")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--no-progress", action="store_true", help="Disable progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-corpus", help="Synthesize or ingest the source corpus")
    sub.add_parser("train-victim", help="Train the keyword and sequence victims")
    sub.add_parser("build-a", help="White-box dataset A over duration buckets")
    sub.add_parser("build-b", help="Black-box dataset B with mutual targeting")

    for name, kind in (("attack-wb", "white-box"), ("attack-bb", "black-box")):
        p = sub.add_parser(name, help=f"Run one {kind} attack on a WAV file")
        p.add_argument("wav")
        p.add_argument("--victim", required=True, help="Victim checkpoint")
        p.add_argument("--target", required=True, help="Target class name or transcript")
        p.add_argument("--out", required=True, help="Adversarial WAV to write on success")
        p.add_argument("--record", help="JSON record output")

    p = sub.add_parser("validate-manifest", help="Check balance, leakage and filter invariants")
    p.add_argument("manifest")
    p.add_argument("--speech-threshold", type=float)
    p.add_argument("--check-files", action="store_true")

    p = sub.add_parser("train-detector", help="Train a detector on the train split of one or more manifests")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--out", required=True, help="Detector checkpoint")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("classify", help="Classify one WAV as normal (exit 0) or adversarial (exit 3)")
    p.add_argument("wav")
    p.add_argument("--detector", required=True)

    p = sub.add_parser("eval", help="Run one evaluation scenario or an unknown-target experiment")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--scenario", type=int, choices=range(1, 7))
    group.add_argument("--unknown-target", choices=("short", "medium", "long"))
    p.add_argument("--runs", type=int)
    p.add_argument("--out", required=True, help="Report JSON")
    p.add_argument("--dataset-a", help="Dataset A manifest (defaults to the pipeline output)")
    p.add_argument("--dataset-b", help="Dataset B manifest (defaults to the pipeline output)")
    p.add_argument("--csv", help="Breakdown plot data CSV")

    p = sub.add_parser("pipeline", help="Run every stage, skipping the ones that are up to date")
    p.add_argument("--stages", nargs="+", choices=STAGES)
    p.add_argument("--force", action="store_true", help="Ignore stage caches")

    p = sub.add_parser("spectrogram", help="Export spectrogram plot data for a WAV")
    p.add_argument("wav")
    p.add_argument("--out", required=True)
    return parser


def load_manager(args: argparse.Namespace) -> ConfigManager:
    overrides = list(args.overrides)
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    return ConfigManager(resolve_config(args.preset, args.config, overrides))


# ---------------------------------------------------------------------------
# Commands

def _stage(name: str) -> Callable[[argparse.Namespace, ConfigManager], int]:
    def command(args: argparse.Namespace, manager: ConfigManager) -> int:
        Pipeline(manager, progress=not args.no_progress).run_stage(name)
        return EXIT_OK
    return command


def _print_json(data: Dict) -> None:
    sys.stdout.write(json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_attack(args: argparse.Namespace, manager: ConfigManager) -> int:
    victim = load_victim(args.victim)
    x = read_wav(args.wav, expected_rate=victim.mfcc_cfg.sample_rate)
    seed = manager.seed("attack", Path(args.wav).stem, args.target)
    progress = not args.no_progress
    if args.command == "attack-wb":
        record = attack_white_box(victim, x, args.target, manager.white_box(), seed, Path(args.wav).stem, progress)
    else:
        if not isinstance(victim, KeywordModel):
            raise DomainError("The black-box attack needs a keyword victim")
        victim.label_only = manager.config.victim.label_only
        cfg = manager.black_box(jobs=manager.config.jobs)
        record = attack_black_box(victim, x, args.target, cfg, seed, Path(args.wav).stem, progress)
    if record.success:
        write_wav(record.adversarial_waveform(x), args.out)
        record.adversarial_path = str(args.out)
    data = record.to_dict()
    if args.record:
        Path(args.record).write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
    _print_json({k: data[k] for k in ("source_id", "target", "success", "iterations_used", "final_db_relative",
                                      "adversarial_path")})
    return EXIT_OK


def cmd_validate(args: argparse.Namespace, manager: ConfigManager) -> int:
    manifest = DatasetManifest.load(args.manifest)
    violations = validate_manifest(manifest, args.speech_threshold, args.check_files)
    _print_json({"manifest": str(args.manifest), "entries": len(manifest), "counts": manifest.counts(),
                 "violations": violations})
    return EXIT_OK if not violations else EXIT_FAILURE


def cmd_train_detector(args: argparse.Namespace, manager: ConfigManager) -> int:
    train = combine([DatasetManifest.load(p) for p in args.manifests], "train")
    settings = manager.detector_settings()
    seed = args.seed if args.seed is not None else manager.seed("detector") % (2 ** 31)
    model = build_detector(manager.mfcc_config(), settings.third_activation, seed, settings.third_pool)
    _, curve = train_detector(model, train, settings.epochs, seed, settings.lr, settings.batch_size,
                              progress=not args.no_progress)
    digest = model.save(args.out)
    manager.save(Path(args.out).parent)
    _print_json({"checkpoint": str(args.out), "sha256": digest, "seed": seed,
                 "final_accuracy": curve[-1].accuracy if curve else None})
    return EXIT_OK


def cmd_classify(args: argparse.Namespace, manager: ConfigManager) -> int:
    model = load_detector(args.detector)
    verdict = classify(model, read_wav(args.wav, expected_rate=model.mfcc_cfg.sample_rate))
    _print_json(dict(verdict.to_dict(), wav=str(args.wav)))
    return EXIT_ADVERSARIAL if verdict.is_adversarial else EXIT_OK


def cmd_eval(args: argparse.Namespace, manager: ConfigManager) -> int:
    pipeline = Pipeline(manager)
    path_a = args.dataset_a or pipeline.dataset_manifest("A")
    path_b = args.dataset_b or pipeline.dataset_manifest("B")
    runs = args.runs or manager.config.evaluation.runs
    mfcc_cfg = manager.mfcc_config()
    settings = manager.detector_settings()
    seed = manager.seed("eval") % (2 ** 31)
    if args.unknown_target:
        report = unknown_target_experiment(DatasetManifest.load(path_a), args.unknown_target, runs, seed,
                                           mfcc_cfg, settings, manager.config.jobs)
    else:
        spec = scenario_by_id(args.scenario)
        paths = {"A": path_a, "B": path_b}
        datasets = {name: DatasetManifest.load(paths[name]) for name in {*spec.train_sets, spec.test_set}}
        report = run_scenario(spec, datasets, runs, seed, mfcc_cfg, settings, manager.config.jobs)
        if args.csv and report.breakdown is not None:
            export_breakdown_csv(report.breakdown, args.csv)
    write_report(report, args.out)
    _print_json({"out": str(args.out), "mean_accuracy": report.mean_accuracy,
                 "ci95_halfwidth": report.ci95_halfwidth})
    return EXIT_OK


def cmd_pipeline(args: argparse.Namespace, manager: ConfigManager) -> int:
    return Pipeline(manager, progress=not args.no_progress, force=args.force).run(args.stages)


def cmd_spectrogram(args: argparse.Namespace, manager: ConfigManager) -> int:
    cfg = manager.mfcc_config()
    export_spectrogram_csv(read_wav(args.wav, expected_rate=cfg.sample_rate), cfg, args.out)
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, ConfigManager], int]] = {
    "gen-corpus": _stage("gen-corpus"),
    "train-victim": _stage("train-victims"),
    "build-a": _stage("build-a"),
    "build-b": _stage("build-b"),
    "attack-wb": cmd_attack,
    "attack-bb": cmd_attack,
    "validate-manifest": cmd_validate,
    "train-detector": cmd_train_detector,
    "classify": cmd_classify,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "spectrogram": cmd_spectrogram,
}


def dispatch(args: argparse.Namespace, manager: ConfigManager) -> int:
    """Run the chosen command and map errors to exit codes"""
    try:
        return COMMANDS[args.command](args, manager)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except AdvSpeechError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE


def main(argv: Optional[Sequence[str]] = None,
         setup_logging: Optional[Callable[[Path, bool], logging.Logger]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manager = load_manager(args)
    except ConfigError as e:
        logging.getLogger("CLI").error(str(e))
        return EXIT_CONFIG
    if setup_logging is not None:
        setup_logging(manager.work_root / "logs", args.verbose)
    return dispatch(args, manager)
