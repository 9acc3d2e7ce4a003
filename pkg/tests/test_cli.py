import json

import numpy as np
import pytest

from src.audio_core import Waveform, write_wav
from src.cli import EXIT_ADVERSARIAL, EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, build_parser, main
from src.dataset_gen import ADVERSARIAL, DatasetManifest, ManifestEntry
from src.detector import build_detector
from src.features import FeatureNormalizer, mfcc
from src.nn import Network, quantize_weights
from src.victim import KeywordModel, keyword_layers

SMALL = ["--set", "mfcc.sample_rate=8000", "--set", "mfcc.n_coeffs=13", "--set", "mfcc.frame_length=200",
         "--set", "mfcc.hop=80", "--set", "mfcc.n_mels=26", "--set", "mfcc.fft_size=256"]


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv("ADVSPEECH_SEED", raising=False)


def _stdout_json(capsys):
    return json.loads(capsys.readouterr().out)


@pytest.fixture
def clip(tmp_path, tone):
    path = tmp_path / "clip.wav"
    write_wav(tone(300.0, 0.5, sample_rate=8000), path)
    return path


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    args = build_parser().parse_args(["--set", "jobs=2", "pipeline", "--stages", "gen-corpus", "--force"])
    assert args.overrides == ["jobs=2"]
    assert args.stages == ["gen-corpus"] and args.force


def test_bad_config_exits_2(tmp_path):
    assert main(["--set", "jobs=0", "gen-corpus"]) == EXIT_CONFIG
    assert main(["--config", str(tmp_path / "absent.json"), "gen-corpus"]) == EXIT_CONFIG
    assert main(["--set", "detector.nope=1", "pipeline"]) == EXIT_CONFIG


def test_classify_exit_codes(tmp_path, small_cfg, clip, capsys):
    model = build_detector(small_cfg.with_t_max(50), seed=1)
    model.network.layers[-2].params[1] += np.array([-200.0, 200.0])
    model.save(tmp_path / "adversarial.ann")
    assert main(["classify", str(clip), "--detector", str(tmp_path / "adversarial.ann")]) == EXIT_ADVERSARIAL
    verdict = _stdout_json(capsys)
    assert verdict["label"] == ADVERSARIAL
    assert verdict["wav"] == str(clip)

    model.network.layers[-2].params[1] += np.array([400.0, -400.0])
    model.save(tmp_path / "normal.ann")
    assert main(["classify", str(clip), "--detector", str(tmp_path / "normal.ann")]) == EXIT_OK


def test_classify_missing_files_fail(tmp_path, clip):
    assert main(["classify", str(clip), "--detector", str(tmp_path / "absent.ann")]) == EXIT_FAILURE
    assert main(["classify", str(tmp_path / "absent.wav"), "--detector", str(tmp_path / "absent.ann")]) \
        == EXIT_FAILURE


def test_validate_manifest(tmp_path, capsys):
    manifest = DatasetManifest([ManifestEntry(id="n0", wav_path="n0.wav")], tmp_path)
    path = manifest.save(tmp_path / "m.jsonl")
    assert main(["validate-manifest", str(path)]) == EXIT_FAILURE
    report = _stdout_json(capsys)
    assert report["entries"] == 1
    assert any(v.startswith("unbalanced") for v in report["violations"])

    manifest.entries.append(ManifestEntry(id="a0", wav_path="a0.wav", label=ADVERSARIAL, source_id="s0"))
    manifest.save(path)
    assert main(["validate-manifest", str(path)]) == EXIT_OK
    assert _stdout_json(capsys)["violations"] == []
    assert main(["validate-manifest", str(path), "--check-files"]) == EXIT_FAILURE


def test_spectrogram(tmp_path, clip):
    out = tmp_path / "plot" / "spec.csv"
    assert main([*SMALL, "spectrogram", str(clip), "--out", str(out)]) == EXIT_OK
    assert out.is_file()
    assert main(["spectrogram", str(clip), "--out", str(out)]) == EXIT_FAILURE


def test_attack_white_box(tmp_path, small_cfg, rng, capsys):
    noise = Waveform(rng.uniform(-0.4, 0.4, 800), 8000)
    cfg = small_cfg.with_t_max(20)
    net = quantize_weights(Network(keyword_layers(2), (20, cfg.n_coeffs, 1), rng_seed=4))
    victim = KeywordModel(net, ("yes", "no"), cfg, FeatureNormalizer.fit([mfcc(noise, cfg)]))
    victim.save(tmp_path / "keyword.ann")
    write_wav(noise, tmp_path / "noise.wav")

    source = victim.class_names[victim.output(np.array(noise.samples))]
    target = "no" if source == "yes" else "yes"
    code = main(["--no-progress", "--set", "white_box.max_iters=3", "attack-wb", str(tmp_path / "noise.wav"),
                 "--victim", str(tmp_path / "keyword.ann"), "--target", target, "--out", str(tmp_path / "adv.wav"),
                 "--record", str(tmp_path / "record.json")])
    assert code == EXIT_OK
    summary = _stdout_json(capsys)
    assert summary["source_id"] == "noise"
    assert summary["target"] == target
    record = json.loads((tmp_path / "record.json").read_text())
    assert record["attack_kind"] == "white_box"
    assert (tmp_path / "adv.wav").is_file() == record["success"]

    assert main(["attack-bb", str(tmp_path / "noise.wav"), "--victim", str(tmp_path / "keyword.ann"),
                 "--target", "maybe", "--out", str(tmp_path / "adv.wav")]) == EXIT_FAILURE


def test_eval_without_datasets_fails(tmp_path):
    assert main(["--set", f"paths.work_root={tmp_path}", "eval", "--scenario", "1",
                 "--out", str(tmp_path / "r.json")]) == EXIT_FAILURE
