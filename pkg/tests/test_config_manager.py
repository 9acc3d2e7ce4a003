import json

import pytest

from src.attacks import BlackBoxConfig, WhiteBoxConfig
from src.config_manager import (
    CONFIG_FILE_NAME,
    SEED_ENV_VAR,
    ConfigManager,
    RunConfig,
    apply_override,
    resolve_config,
)
from src.errors import ConfigError
from src.features import MfccConfig


def test_desk_preset_defaults():
    config = resolve_config(env={})
    assert config.preset == "desk"
    assert config.white_box.max_iters == 200
    assert config.black_box.population == 50
    assert config.evaluation.runs == 5
    assert config.mfcc.t_max == 698


def test_full_scale_preset():
    config = resolve_config(preset="full-scale", env={})
    assert config.dataset.n_per_bucket == 100
    assert config.evaluation.runs == 10
    assert config.corpus.utterances_per_bucket == 400


def test_precedence(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"preset": "full-scale", "master_seed": 3, "detector": {"epochs": 7}}))
    config = resolve_config(config_file=path, overrides=["detector.epochs=9", "vad.threshold=0.5"],
                            env={SEED_ENV_VAR: "42"})
    assert config.preset == "full-scale"
    assert config.detector.epochs == 9
    assert config.vad.threshold == 0.5
    assert config.master_seed == 42
    assert config.dataset.n_per_bucket == 100
    assert resolve_config(preset="desk", config_file=path, env={}).preset == "desk"


def test_override_parsing():
    data = RunConfig().model_dump()
    apply_override(data, "corpus.commands=[\"yes\", \"no\"]")
    apply_override(data, "paths.work_root=/tmp/run")
    apply_override(data, "white_box.early_stop=true")
    assert data["corpus"]["commands"] == ["yes", "no"]
    assert data["paths"]["work_root"] == "/tmp/run"
    assert data["white_box"]["early_stop"] is True
    for bad in ("detector.epochs", "=3", "nosuch.key=1"):
        with pytest.raises(ConfigError):
            apply_override(data, bad)


@pytest.mark.parametrize("override", ["detector.epochs=0", "detector.third_activation=tanh",
                                      "vad.threshold=1.5", "detector.unknown=1", "jobs=0"])
def test_invalid_values(override):
    with pytest.raises(ConfigError):
        resolve_config(overrides=[override], env={})


def test_errors_on_inputs(tmp_path):
    with pytest.raises(ConfigError):
        resolve_config(preset="huge", env={})
    with pytest.raises(ConfigError):
        resolve_config(config_file=tmp_path / "absent.json", env={})
    with pytest.raises(ConfigError):
        resolve_config(env={SEED_ENV_VAR: "seven"})


def test_module_objects():
    manager = ConfigManager(resolve_config(overrides=["mfcc.sample_rate=8000", "dataset.speech_filter=false"],
                                           env={}))
    assert isinstance(manager.mfcc_config(), MfccConfig)
    assert manager.mfcc_config().sample_rate == 8000
    assert manager.corpus_spec().sample_rate == 8000
    assert isinstance(manager.white_box(), WhiteBoxConfig)
    bb = manager.black_box(jobs=3)
    assert isinstance(bb, BlackBoxConfig) and bb.jobs == 3 and bb.population == 50
    assert manager.vad_params().to_dict()["threshold"] == 0.68
    assert manager.speech_threshold() is None
    assert manager.detector_settings().third_pool == (2, 2)
    assert manager.dataset_commands() == list(manager.config.corpus.commands)
    assert manager.corpus_dir == manager.work_root / "corpus"


def test_seeds_and_hashes():
    a = ConfigManager(resolve_config(env={}))
    b = ConfigManager(resolve_config(overrides=["detector.epochs=3"], env={}))
    assert a.seed("victim") == a.seed("victim")
    assert a.seed("victim") != a.seed("detector")
    assert a.section_hash("mfcc", "vad") == b.section_hash("mfcc", "vad")
    assert a.section_hash("detector") != b.section_hash("detector")
    c = ConfigManager(resolve_config(env={SEED_ENV_VAR: "1"}))
    assert a.section_hash("mfcc") != c.section_hash("mfcc")


def test_save_and_load(tmp_path):
    manager = ConfigManager(resolve_config(overrides=["master_seed=11"], env={}))
    path = manager.save(tmp_path / "stage")
    assert path.name == CONFIG_FILE_NAME
    again = ConfigManager.load(path)
    assert again.config == manager.config
    path.write_text("{\"preset\": \"other\"}")
    with pytest.raises(ConfigError):
        ConfigManager.load(path)
    with pytest.raises(ConfigError):
        ConfigManager.load(tmp_path / "absent.json")
