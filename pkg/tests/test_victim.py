import numpy as np
import numpy.testing as npt
import pytest

from src.audio_core import Waveform
from src.errors import DomainError, FeatureOverflowError, InfeasibleTargetError, InsufficientDataError
from src.features import FeatureNormalizer, mfcc
from src.nn import Network, checkpoint_bytes, dense, quantize_weights
from src.victim import (
    KeywordModel,
    SequenceModel,
    keyword_layers,
    load_victim,
    normalize_transcript,
    predict_keyword,
    sequence_layers,
    train_keyword_model,
    train_sequence_model,
    transcribe,
    victim_from_bytes,
)


@pytest.fixture
def noise(rng):
    return Waveform(rng.uniform(-0.4, 0.4, 800), 8000)


@pytest.fixture
def keyword_model(small_cfg, noise):
    cfg = small_cfg.with_t_max(20)
    net = quantize_weights(Network(keyword_layers(3), (20, cfg.n_coeffs, 1), rng_seed=4))
    return KeywordModel(net, ("yes", "no", "up"), cfg, FeatureNormalizer.fit([mfcc(noise, cfg)]))


@pytest.fixture
def sequence_model(small_cfg, noise):
    vocab = ("a", "b", " ")
    net = quantize_weights(Network(sequence_layers(len(vocab)), (None, small_cfg.n_coeffs, 1), rng_seed=6))
    return SequenceModel(net, vocab, small_cfg, FeatureNormalizer.fit([mfcc(noise, small_cfg)]))


def _check_waveform_gradient(loss_and_grad, samples, rng, h=1e-6):
    _, grad = loss_and_grad(samples)
    for i in rng.choice(samples.size, 10, replace=False):
        up, down = samples.copy(), samples.copy()
        up[i] += h
        down[i] -= h
        numeric = (loss_and_grad(up)[0] - loss_and_grad(down)[0]) / (2 * h)
        assert grad[i] == pytest.approx(numeric, rel=1e-3, abs=1e-6)


def test_keyword_gradient_matches_finite_differences(keyword_model, noise, rng):
    samples = np.array(noise.samples)
    _check_waveform_gradient(lambda s: keyword_model.loss_and_grad(s, 1), samples, rng)


def test_sequence_gradient_matches_finite_differences(sequence_model, noise, rng):
    samples = np.array(noise.samples)
    _check_waveform_gradient(lambda s: sequence_model.loss_and_grad(s, "ab"), samples, rng)


def test_keyword_outputs(keyword_model, noise):
    probs = keyword_model.probabilities(noise.samples)
    assert probs.shape == (3,)
    assert probs.sum() == pytest.approx(1.0)
    index, observed = predict_keyword(keyword_model, noise, label_only=True)
    npt.assert_array_equal(observed, np.eye(3)[index])
    assert keyword_model.output(noise.samples) == index
    keyword_model.label_only = True
    npt.assert_array_equal(keyword_model.scores(noise.samples), np.eye(3)[index])
    assert keyword_model.class_index("up") == 2
    with pytest.raises(DomainError):
        keyword_model.class_index("maybe")


def test_keyword_rejects_long_input(keyword_model, rng):
    with pytest.raises(FeatureOverflowError):
        keyword_model.probabilities(rng.uniform(-0.1, 0.1, 8000))


def test_sequence_shapes_and_feasibility(sequence_model, noise):
    lp = sequence_model.log_probs(noise.samples)
    assert lp.shape == (sequence_model.frames_out(8), 4)
    npt.assert_allclose(np.exp(lp).sum(axis=1), 1.0)
    assert set(transcribe(sequence_model, noise)) <= {"a", "b", " "}
    sequence_model.check_feasible(noise.samples.size, "ab")
    with pytest.raises(InfeasibleTargetError):
        sequence_model.check_feasible(noise.samples.size, "aabb")
    assert sequence_model.blank == 3


def test_checkpoint_round_trip(tmp_path, keyword_model, sequence_model, noise):
    path = tmp_path / "keyword.ann"
    digest = keyword_model.save(path)
    again = load_victim(path)
    assert isinstance(again, KeywordModel)
    assert again.class_names == keyword_model.class_names
    assert again.checkpoint_hash() == digest
    npt.assert_array_equal(again.probabilities(noise.samples), keyword_model.probabilities(noise.samples))

    seq = victim_from_bytes(sequence_model.checkpoint_bytes())
    assert isinstance(seq, SequenceModel)
    assert seq.output(noise.samples) == sequence_model.output(noise.samples)


def test_non_victim_checkpoint_rejected(keyword_model):
    meta = {"kind": "detector", "mfcc": keyword_model.mfcc_cfg.to_dict(),
            "normalizer": keyword_model.normalizer.to_dict()}
    with pytest.raises(DomainError):
        victim_from_bytes(checkpoint_bytes(Network([dense(2)], (3,)), meta))


def test_clone_is_independent(keyword_model, noise):
    twin = keyword_model.clone()
    twin.network.layers[0].params[1] += 5.0
    assert not np.allclose(twin.probabilities(noise.samples), keyword_model.probabilities(noise.samples))


def test_normalize_transcript():
    assert normalize_transcript("Open  ALL-doors!") == "open all doors"


def test_train_keyword_model(tiny_corpus, small_cfg):
    model, report = train_keyword_model(tiny_corpus, epochs=40, seed=3, mfcc_cfg=small_cfg, lr=5e-3,
                                        progress=False)
    assert model.class_names == ("no", "up", "yes")
    assert report.n_train + report.n_heldout == 18
    assert report.train_accuracy >= 0.6
    assert report.heldout_accuracy is not None
    assert len(report.curve) == 40
    again, _ = train_keyword_model(tiny_corpus, epochs=40, seed=3, mfcc_cfg=small_cfg, lr=5e-3, progress=False)
    assert again.checkpoint_hash() == model.checkpoint_hash()


def test_train_keyword_model_needs_classes(tiny_corpus, small_cfg):
    with pytest.raises(InsufficientDataError):
        train_keyword_model(tiny_corpus, epochs=1, seed=0, mfcc_cfg=small_cfg, class_names=("yes", "maybe"),
                            progress=False)


def test_train_sequence_model(tiny_corpus, small_cfg):
    model, report = train_sequence_model(tiny_corpus, epochs=2, seed=1, mfcc_cfg=small_cfg, progress=False)
    assert report.n_train + report.n_heldout == 6
    assert len(report.curve) == 2
    assert np.isfinite(report.curve[-1].loss)
    clip = min((e for e in tiny_corpus.entries if e.collection == "utterance"), key=lambda e: e.duration_s)
    text = transcribe(model, tiny_corpus.load_waveform(clip, small_cfg.sample_rate))
    assert isinstance(text, str)
