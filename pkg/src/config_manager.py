"""
Config Manager for advspeech
Resolves the run configuration (preset, JSON file, --set overrides, environment) and archives it
"""

import copy
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .attacks import BlackBoxConfig, WhiteBoxConfig
from .dataset_gen import DEFAULT_COMMANDS, CorpusSpec
from .detector import DetectorSettings
from .errors import ConfigError
from .features import MfccConfig
from .seeding import hash_json, substream_seed
from .vad import VadParams

CONFIG_FILE_NAME = "run_config.json"
SEED_ENV_VAR = "ADVSPEECH_SEED"

logger = logging.getLogger("ConfigManager")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsSection(_Section):
    work_root: str = "work"
    corpus_dir: Optional[str] = None
    speech_commands_dir: Optional[str] = None
    common_voice_dir: Optional[str] = None
    common_voice_csv: Optional[str] = None


class CorpusSection(_Section):
    source: Literal["synthetic", "speech_commands", "common_voice"] = "synthetic"
    commands: List[str] = Field(default_factory=lambda: list(DEFAULT_COMMANDS))
    clips_per_command: int = Field(200, ge=2)
    utterances_per_bucket: int = Field(40, ge=1)
    keyword_duration_s: float = Field(1.0, gt=0)
    noise_std: float = Field(0.002, ge=0)


class MfccSection(_Section):
    n_coeffs: int = 40
    frame_length: int = 400
    hop: int = 160
    n_mels: int = 64
    fft_size: int = 512
    t_max: int = 698
    log_floor: float = 1e-10
    sample_rate: int = 16000


class VadSection(_Section):
    energy_percentile: float = Field(10.0, ge=0, le=100)
    margin_db: float = 9.0
    threshold: float = Field(0.68, ge=0, le=1)


class VictimSection(_Section):
    keyword_epochs: int = Field(30, ge=1)
    sequence_epochs: int = Field(30, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(16, ge=1)
    label_only: bool = False


class WhiteBoxSection(_Section):
    max_iters: int = Field(1000, ge=1)
    lr: float = Field(0.01, gt=0)
    c: float = Field(1.0, gt=0)
    tau_db: float = -20.0
    tau_decay_db: float = Field(2.0, ge=0)
    early_stop: bool = False
    c_patience: Optional[int] = None


class BlackBoxSection(_Section):
    population: int = Field(100, ge=2)
    max_generations: int = Field(500, ge=0)
    elite_count: int = Field(10, ge=1)
    mutation_prob: float = Field(0.005, ge=0, le=1)
    mutation_std: float = Field(0.005, ge=0)
    noise_bound: float = Field(0.02, gt=0)
    l2_penalty: float = Field(1e-3, ge=0)


class DatasetSection(_Section):
    n_per_bucket: int = Field(5, ge=1)
    n_per_command: int = Field(2, ge=1)
    commands: Optional[List[str]] = None
    train_fraction: float = Field(0.75, gt=0, lt=1)
    speech_filter: bool = True


class DetectorSection(_Section):
    epochs: int = Field(30, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(16, ge=1)
    third_activation: Literal["linear", "selu"] = "linear"
    third_pool: Tuple[int, int] = (2, 2)


class EvaluationSection(_Section):
    runs: int = Field(5, ge=1)
    scenarios: List[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    unknown_target: bool = True


class RunConfig(_Section):
    preset: Literal["desk", "full-scale"] = "desk"
    master_seed: int = 0
    jobs: int = Field(1, ge=1)
    paths: PathsSection = Field(default_factory=PathsSection)
    corpus: CorpusSection = Field(default_factory=CorpusSection)
    mfcc: MfccSection = Field(default_factory=MfccSection)
    vad: VadSection = Field(default_factory=VadSection)
    victim: VictimSection = Field(default_factory=VictimSection)
    white_box: WhiteBoxSection = Field(default_factory=WhiteBoxSection)
    black_box: BlackBoxSection = Field(default_factory=BlackBoxSection)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    detector: DetectorSection = Field(default_factory=DetectorSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)


PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {
        "corpus": {"clips_per_command": 200, "utterances_per_bucket": 40},
        "white_box": {"max_iters": 200},
        "black_box": {"population": 50, "max_generations": 200, "elite_count": 5},
        "dataset": {"n_per_bucket": 5, "n_per_command": 2},
        "detector": {"epochs": 30},
        "evaluation": {"runs": 5},
    },
    "full-scale": {
        "corpus": {"clips_per_command": 200, "utterances_per_bucket": 400},
        "mfcc": {"t_max": 698},
        "dataset": {"n_per_bucket": 100, "n_per_command": 20},
        "victim": {"keyword_epochs": 100, "sequence_epochs": 100},
        "detector": {"epochs": 100},
        "evaluation": {"runs": 10},
    },
}


def _deep_merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(data: Dict[str, Any], override: str) -> Dict[str, Any]:
    """Apply one `section.key=value` override; values are parsed as JSON when possible"""
    if "=" not in override:
        raise ConfigError(f"Override {override!r} is not of the form key=value")
    dotted, raw = override.split("=", 1)
    keys = [k for k in dotted.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"Override {override!r} has an empty key")
    node = data
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise ConfigError(f"Unknown config section {key!r} in override {override!r}")
        node = node[key]
    node[keys[-1]] = _parse_value(raw.strip())
    return data


def resolve_config(preset: Optional[str] = None, config_file: Optional[Union[str, Path]] = None,
                   overrides: Sequence[str] = (), env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Preset defaults, then the JSON file, then --set overrides, then ADVSPEECH_SEED"""
    env = os.environ if env is None else env
    file_data: Dict[str, Any] = {}
    if config_file is not None:
        try:
            with open(config_file, "r", encoding="utf-8") as f:
                file_data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Cannot read config file {config_file}: {e}")
            raise ConfigError(f"Cannot read config file {config_file}: {e}") from e

    chosen = preset or file_data.get("preset") or "desk"
    if chosen not in PRESETS:
        raise ConfigError(f"Unknown preset {chosen!r}; choose one of {sorted(PRESETS)}")
    data = _deep_merge(RunConfig().model_dump(), PRESETS[chosen])
    data = _deep_merge(data, file_data)
    data["preset"] = chosen
    for override in overrides:
        apply_override(data, override)
    if env.get(SEED_ENV_VAR):
        try:
            data["master_seed"] = int(env[SEED_ENV_VAR])
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env[SEED_ENV_VAR]!r}") from e
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        logger.error(f"Invalid run configuration: {e}")
        raise ConfigError(f"Invalid run configuration: {e}") from e


class ConfigManager:
    """Owns the resolved RunConfig: module-level config objects, seeds, hashes and archiving"""

    def __init__(self, config: RunConfig):
        self.logger = logging.getLogger("ConfigManager")
        self.config = config

    @property
    def work_root(self) -> Path:
        return Path(self.config.paths.work_root)

    @property
    def corpus_dir(self) -> Path:
        paths = self.config.paths
        return Path(paths.corpus_dir) if paths.corpus_dir else self.work_root / "corpus"

    def seed(self, *names: Any) -> int:
        return substream_seed(self.config.master_seed, *names)

    def mfcc_config(self) -> MfccConfig:
        try:
            return MfccConfig(**self.config.mfcc.model_dump())
        except TypeError as e:
            raise ConfigError(f"Invalid MFCC settings: {e}") from e

    def vad_params(self) -> VadParams:
        v = self.config.vad
        return VadParams(v.energy_percentile, v.margin_db, v.threshold)

    def corpus_spec(self) -> CorpusSpec:
        c = self.config.corpus
        return CorpusSpec(commands=tuple(c.commands), clips_per_command=c.clips_per_command,
                          keyword_duration_s=c.keyword_duration_s, utterances_per_bucket=c.utterances_per_bucket,
                          sample_rate=self.config.mfcc.sample_rate, noise_std=c.noise_std)

    def white_box(self) -> WhiteBoxConfig:
        return WhiteBoxConfig(**self.config.white_box.model_dump())

    def black_box(self, jobs: int = 1) -> BlackBoxConfig:
        return BlackBoxConfig(**self.config.black_box.model_dump(), jobs=jobs)

    def detector_settings(self) -> DetectorSettings:
        d = self.config.detector
        return DetectorSettings(d.epochs, d.lr, d.batch_size, d.third_activation, tuple(d.third_pool))

    def dataset_commands(self) -> List[str]:
        return list(self.config.dataset.commands or self.config.corpus.commands)

    def speech_threshold(self) -> Optional[float]:
        return self.config.vad.threshold if self.config.dataset.speech_filter else None

    def section_hash(self, *sections: str) -> str:
        """Content hash of the named sections plus the master seed"""
        dump = self.config.model_dump()
        return hash_json({"master_seed": dump["master_seed"], **{s: dump[s] for s in sections}})

    def save(self, directory: Union[str, Path]) -> Path:
        """Archive the config beside an artifact directory"""
        path = Path(directory) / CONFIG_FILE_NAME
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.config.model_dump_json(indent=2) + "\n", encoding="utf-8")
            self.logger.info(f"Saved run configuration to {path}")
        except OSError as e:
            self.logger.error(f"Error saving run configuration: {e}")
            raise ConfigError(f"Cannot save run configuration to {path}: {e}") from e
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ConfigManager":
        try:
            config = RunConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"Cannot read run configuration {path}: {e}") from e
        except ValidationError as e:
            raise ConfigError(f"Invalid run configuration {path}: {e}") from e
        logging.getLogger("ConfigManager").info(f"Loaded run configuration from {path}")
        return cls(config)
