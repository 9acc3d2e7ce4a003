import csv
from collections import Counter
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from src.audio_core import Waveform, write_wav
from src.dataset_gen import (
    ADVERSARIAL,
    NORMAL,
    DEFAULT_COMMANDS,
    DEFAULT_TARGETS,
    CorpusSpec,
    DatasetManifest,
    ManifestEntry,
    allocate_train_counts,
    bucket_by_duration,
    bucket_for_duration,
    build_dataset_A,
    build_dataset_B,
    ensure_valid,
    find_leakage,
    ingest_common_voice,
    ingest_speech_commands,
    meta_path_for,
    split_train_test,
    synth_corpus,
    validate_manifest,
)
from src.errors import DomainError, FormatError, InsufficientDataError, ManifestError
from src.seeding import hash_file
from src.vad import VadParams

DURATIONS = {"short": 1.5, "medium": 3.5, "long": 6.5}


def utterance_sources(root, per_bucket=8):
    entries = []
    for bucket, duration in DURATIONS.items():
        for i in range(per_bucket):
            entries.append(ManifestEntry(id=f"utt-{bucket}-{i}", wav_path=f"{bucket}/{i}.wav", bucket=bucket,
                                         duration_s=duration,
                                         speech_ratio=0.9, transcript="open all doors", collection="utterance",
                                         source_id=f"utt-{bucket}-{i}"))
    entries.append(ManifestEntry(id="quiet", wav_path="q.wav", bucket="short", duration_s=1.5, speech_ratio=0.3,
                                 collection="utterance"))
    entries.append(ManifestEntry(id="gap", wav_path="g.wav", duration_s=5.0, speech_ratio=0.9,
                                 collection="utterance"))
    return DatasetManifest(entries, root)


def keyword_sources(root, commands=("yes", "no", "up"), per_command=6):
    entries = [ManifestEntry(id=f"kw-{c}-{i}", wav_path=f"{c}/{i}.wav", bucket=c, duration_s=1.0, speech_ratio=0.9,
                             collection="keyword", source_id=f"kw-{c}-{i}", transcript=c)
               for c in commands for i in range(per_command)]
    return DatasetManifest(entries, root)


def fake_runner(out_dir, fail=lambda request: False):
    calls = []

    def run(requests):
        calls.extend(requests)
        return [SimpleNamespace(success=not fail(r), attack_kind="white_box", final_db_relative=-30.0,
                                adversarial_path=out_dir / f"{r.source.id}__to_{r.target_class}.wav")
                for r in requests]

    run.calls = calls
    return run


def test_bucket_edges():
    assert bucket_for_duration(1.0) == "short"
    assert bucket_for_duration(2.0) == "short"
    assert bucket_for_duration(2.5) is None
    assert bucket_for_duration(3.0) == "medium"
    assert bucket_for_duration(4.0) == "medium"
    assert bucket_for_duration(6.0) == "long"
    assert bucket_for_duration(7.0) == "long"
    assert bucket_for_duration(0.99) is None
    assert bucket_for_duration(7.01) is None


def test_bucket_partition(tmp_path):
    partition = bucket_by_duration(utterance_sources(tmp_path).entries)
    assert [e.id for e in partition.excluded] == ["gap"]
    assert len(partition.buckets["short"]) == 9


def test_build_dataset_A(tmp_path):
    runner = fake_runner(tmp_path / "adv")
    m = build_dataset_A(utterance_sources(tmp_path / "src"), DEFAULT_TARGETS, 2, runner, seed=4, out_root=tmp_path)
    assert len(runner.calls) == 3 * 2 * 3
    assert m.counts() == {ADVERSARIAL: 18, NORMAL: 18}
    assert validate_manifest(m, speech_threshold=0.68) == []
    assert "quiet" not in {e.id for e in m.entries}
    adversarial = [e for e in m.entries if e.label == ADVERSARIAL]
    assert Counter(e.bucket for e in adversarial) == {"short": 6, "medium": 6, "long": 6}
    assert {e.target_text for e in adversarial} == {t.text for t in DEFAULT_TARGETS}
    assert all(e.source_wav for e in adversarial)
    again = build_dataset_A(utterance_sources(tmp_path / "src"), DEFAULT_TARGETS, 2, fake_runner(tmp_path / "adv"),
                            seed=4, out_root=tmp_path)
    assert [e.id for e in again.entries] == [e.id for e in m.entries]


def test_build_dataset_A_drops_normals_for_failures(tmp_path):
    runner = fake_runner(tmp_path / "adv", fail=lambda r: r.target_class == "long" and r.source.bucket == "medium")
    m = build_dataset_A(utterance_sources(tmp_path), DEFAULT_TARGETS, 2, runner, seed=1, out_root=tmp_path)
    assert m.counts() == {ADVERSARIAL: 16, NORMAL: 16}
    assert m.meta["attack_failures"] == 2
    assert validate_manifest(m) == []


def test_build_dataset_A_shortfall(tmp_path):
    with pytest.raises(InsufficientDataError):
        build_dataset_A(utterance_sources(tmp_path), DEFAULT_TARGETS, 3, fake_runner(tmp_path), seed=0,
                        out_root=tmp_path)
    with pytest.raises(DomainError):
        build_dataset_A(utterance_sources(tmp_path), DEFAULT_TARGETS, 0, fake_runner(tmp_path), seed=0,
                        out_root=tmp_path)


def test_build_dataset_B_mutual_targets(tmp_path):
    runner = fake_runner(tmp_path / "adv")
    m = build_dataset_B(keyword_sources(tmp_path), ("yes", "no", "up"), 2, runner, seed=2, out_root=tmp_path)
    assert len(runner.calls) == 3 * 2 * 2
    assert all(r.target_class != r.source.bucket for r in runner.calls)
    assert m.counts() == {ADVERSARIAL: 12, NORMAL: 12}
    assert Counter(e.bucket for e in m.entries if e.label == NORMAL) == {"yes": 4, "no": 4, "up": 4}
    assert validate_manifest(m) == []


def test_build_dataset_B_errors(tmp_path):
    with pytest.raises(InsufficientDataError):
        build_dataset_B(keyword_sources(tmp_path), ("yes", "no", "up"), 3, fake_runner(tmp_path), 0, tmp_path)
    with pytest.raises(InsufficientDataError):
        build_dataset_B(keyword_sources(tmp_path), ("yes",), 1, fake_runner(tmp_path), 0, tmp_path)


def test_runner_outcome_count_checked(tmp_path):
    with pytest.raises(ManifestError):
        build_dataset_B(keyword_sources(tmp_path), ("yes", "no"), 1, lambda requests: [], 0, tmp_path)


def test_split_is_source_disjoint_and_balanced(tmp_path):
    m = build_dataset_A(utterance_sources(tmp_path), DEFAULT_TARGETS, 2, fake_runner(tmp_path), seed=4,
                        out_root=tmp_path)
    split = split_train_test(m, 0.5, seed=8)
    train = [e for e in split.entries if e.split == "train"]
    test = [e for e in split.entries if e.split == "test"]
    assert find_leakage(train, test) == []
    assert train and test
    for side in (train, test):
        counts = Counter((e.bucket, e.label) for e in side)
        for bucket in DURATIONS:
            assert counts[(bucket, NORMAL)] == counts[(bucket, ADVERSARIAL)]
    assert validate_manifest(split) == []
    again = split_train_test(m, 0.5, seed=8)
    assert [e.split for e in again.entries] == [e.split for e in split.entries]
    with pytest.raises(DomainError):
        split_train_test(m, 1.0, seed=0)


def _achieved(split):
    return sum(1 for e in split.entries if e.split == "train") / len(split.entries)


def test_allocate_train_counts():
    counts = allocate_train_counts({"short": 5, "medium": 5, "long": 5}, 0.75)
    assert sum(counts.values()) == 11
    assert all(1 <= n <= 4 for n in counts.values())
    assert allocate_train_counts({"": 20}, 0.75) == {"": 15}
    assert allocate_train_counts({"a": 2}, 0.75) == {"a": 1}
    assert allocate_train_counts({"a": 1, "b": 3}, 0.75) == {"a": 1, "b": 2}


@pytest.mark.parametrize("n_per_bucket", [5, 9, 12, 20])
def test_split_fraction_within_tolerance(tmp_path, n_per_bucket):
    sources = utterance_sources(tmp_path, per_bucket=4 * n_per_bucket)
    m = build_dataset_A(sources, DEFAULT_TARGETS, n_per_bucket, fake_runner(tmp_path), seed=1, out_root=tmp_path)
    split = split_train_test(m, 0.75, seed=2)
    assert abs(_achieved(split) - 0.75) <= 0.02
    assert validate_manifest(split) == []
    for bucket in DURATIONS:
        sides = {e.split for e in split.entries if e.bucket == bucket}
        assert sides == {"train", "test"}


def test_split_two_sources_per_command(tmp_path):
    m = build_dataset_B(keyword_sources(tmp_path, DEFAULT_COMMANDS, per_command=20), DEFAULT_COMMANDS, 2,
                        fake_runner(tmp_path), seed=3, out_root=tmp_path)
    split = split_train_test(m, 0.75, seed=4)
    train = [e for e in split.entries if e.split == "train"]
    test = [e for e in split.entries if e.split == "test"]
    assert len(train) == 270
    assert len(test) == 90
    assert find_leakage(train, test) == []
    assert validate_manifest(split) == []
    ensure_valid(split)


def test_empty_split_side_is_invalid(tmp_path):
    m = build_dataset_A(utterance_sources(tmp_path), DEFAULT_TARGETS, 2, fake_runner(tmp_path), seed=4,
                        out_root=tmp_path)
    all_train = DatasetManifest([replace(e, split="train") for e in m.entries], m.root)
    assert validate_manifest(all_train) == ["empty test split"]
    with pytest.raises(ManifestError):
        ensure_valid(all_train)


def test_build_dataset_B_speech_filter(tmp_path):
    sources = keyword_sources(tmp_path, ("yes", "no"), per_command=3)
    sources.entries.append(ManifestEntry(id="kw-yes-quiet", wav_path="yes/quiet.wav", bucket="yes", duration_s=1.0,
                                         speech_ratio=0.2, collection="keyword", source_id="kw-yes-quiet"))
    unfiltered = build_dataset_B(sources, ("yes", "no"), 2, fake_runner(tmp_path), 0, tmp_path)
    assert "kw-yes-quiet" in {e.source_id for e in unfiltered.entries}
    with pytest.raises(InsufficientDataError):
        build_dataset_B(sources, ("yes", "no"), 2, fake_runner(tmp_path), 0, tmp_path, speech_threshold=0.68)
    m = build_dataset_B(sources, ("yes", "no"), 1, fake_runner(tmp_path), 0, tmp_path, speech_threshold=0.68)
    assert "kw-yes-quiet" not in {e.source_id for e in m.entries}
    assert validate_manifest(m, speech_threshold=0.68) == []


def test_validate_reports_violations(tmp_path):
    entries = [
        ManifestEntry(id="a", wav_path="a.wav", label=ADVERSARIAL, source_id="s1", speech_ratio=0.9),
        ManifestEntry(id="a", wav_path="b.wav", label=ADVERSARIAL, speech_ratio=0.9),
        ManifestEntry(id="s1", wav_path="s1.wav", label=NORMAL, source_id="s1", speech_ratio=0.5),
    ]
    violations = validate_manifest(DatasetManifest(entries, tmp_path), speech_threshold=0.68)
    text = "\n".join(violations)
    assert "unbalanced" in text
    assert "duplicate id: a" in text
    assert "adversarial entry without source" in text
    assert "normal clip is also an attack source: s1" in text
    assert "speech ratio 0.5" in text
    with pytest.raises(ManifestError):
        ensure_valid(DatasetManifest(entries, tmp_path))


def test_validate_leakage_and_files(tmp_path):
    write_wav(Waveform(np.full(100, 0.1)), tmp_path / "src.wav")
    write_wav(Waveform(np.full(100, 0.1)), tmp_path / "adv.wav")
    entries = [
        ManifestEntry(id="adv", wav_path="adv.wav", label=ADVERSARIAL, source_id="x", source_wav="src.wav",
                      split="train"),
        ManifestEntry(id="adv2", wav_path="adv2.wav", label=ADVERSARIAL, source_id="x", split="test"),
        ManifestEntry(id="n1", wav_path="n1.wav", source_id="n1", split="train"),
        ManifestEntry(id="n2", wav_path="n2.wav", source_id="n2"),
    ]
    violations = validate_manifest(DatasetManifest(entries, tmp_path), check_files=True)
    assert "source in both train and test: x" in violations
    assert "some entries have no split" in violations
    assert "adversarial audio identical to its source: adv" in violations
    assert "missing file: adv2" in violations


def test_manifest_save_and_load(tmp_path):
    m = keyword_sources(tmp_path / "audio")
    m.meta = {"dataset": "B", "seed": 3}
    path = m.save(tmp_path / "manifests" / "b.jsonl")
    assert meta_path_for(path).name == "b.meta.json"
    loaded = DatasetManifest.load(path)
    assert loaded.root == (tmp_path / "audio").resolve()
    assert loaded.meta == {"dataset": "B", "seed": 3}
    assert [e.to_dict() for e in loaded.entries] == [e.to_dict() for e in m.entries]
    assert loaded.resolve(loaded.entries[0]) == (tmp_path / "audio" / "yes" / "0.wav").resolve()


def test_manifest_load_errors(tmp_path):
    with pytest.raises(ManifestError):
        DatasetManifest.load(tmp_path / "absent.jsonl")
    path = DatasetManifest([], tmp_path).save(tmp_path / "m.jsonl")
    path.write_text("{broken\n")
    with pytest.raises(FormatError):
        DatasetManifest.load(path)


def test_synth_corpus(tiny_corpus, tiny_spec):
    assert len(tiny_corpus) == 3 * 6 + 3 * 2
    keyword = [e for e in tiny_corpus.entries if e.collection == "keyword"]
    assert Counter(e.bucket for e in keyword) == {"yes": 6, "no": 6, "up": 6}
    assert all(e.id.startswith(f"kw-{e.bucket}-") for e in keyword)
    for e in tiny_corpus.entries:
        assert tiny_corpus.resolve(e).is_file()
        if e.collection == "utterance":
            assert e.bucket is not None and e.id.startswith(f"utt-{e.bucket}-")
            assert set(e.transcript) <= set("abcdefghijklmnopqrstuvwxyz ")
    assert np.mean([e.speech_ratio for e in tiny_corpus.entries]) > 0.5
    assert tiny_corpus.meta["vad"]["algorithm"] == "energy-percentile-v1"


def test_synth_corpus_is_deterministic(tmp_path, tiny_corpus, tiny_spec, small_cfg):
    other = synth_corpus(tiny_spec, seed=7, out_dir=tmp_path / "again", mfcc_cfg=small_cfg, vad=VadParams(),
                         progress=False)
    for a, b in zip(tiny_corpus.entries, other.entries):
        assert a.id == b.id
        assert hash_file(tiny_corpus.resolve(a)) == hash_file(other.resolve(b))


def test_rebase_keeps_files(tmp_path, tiny_corpus):
    moved = tiny_corpus.rebase(tmp_path / "elsewhere")
    for a, b in zip(tiny_corpus.entries, moved.entries):
        assert moved.resolve(b) == tiny_corpus.resolve(a)


def test_corpus_spec():
    spec = CorpusSpec(commands=("yes", "no"))
    assert CorpusSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(DomainError):
        CorpusSpec(commands=("naïve",))


def test_ingest_speech_commands(tmp_path, tone):
    for command in ("yes", "no"):
        (tmp_path / command).mkdir()
        for i in range(2):
            write_wav(tone(300.0 + 100 * i, 1.0), tmp_path / command / f"clip{i}.wav")
    m = ingest_speech_commands(tmp_path, ("yes", "no"))
    assert sorted(e.id for e in m.entries) == ["sc-no-clip0", "sc-no-clip1", "sc-yes-clip0", "sc-yes-clip1"]
    assert all(e.collection == "keyword" and e.duration_s == 1.0 for e in m.entries)
    with pytest.raises(ManifestError):
        ingest_speech_commands(tmp_path, ("maybe",))


def test_ingest_common_voice(tmp_path, tone):
    write_wav(tone(200.0, 1.5), tmp_path / "one.wav")
    with open(tmp_path / "sentences.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "sentence"])
        writer.writerow(["one.mp3", "Hello, World!"])
        writer.writerow(["missing.mp3", "Nobody home"])
    m = ingest_common_voice(tmp_path, tmp_path / "sentences.csv")
    assert len(m) == 1
    entry = m.entries[0]
    assert entry.transcript == "hello world"
    assert entry.bucket == "short"
    assert entry.collection == "utterance"
