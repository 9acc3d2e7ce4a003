"""Shared fixtures: small waveforms, a fast MFCC configuration and a tiny synthetic corpus"""

import logging

import numpy as np
import pytest

from src.audio_core import Waveform
from src.dataset_gen import CorpusSpec, synth_corpus
from src.features import MfccConfig
from src.vad import VadParams

logging.getLogger("NN").setLevel(logging.WARNING)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tone():
    def make(freq=440.0, seconds=1.0, amp=0.5, sample_rate=16000, label=None):
        t = np.arange(int(round(seconds * sample_rate))) / sample_rate
        return Waveform(amp * np.sin(2.0 * np.pi * freq * t), sample_rate, label)
    return make


@pytest.fixture
def small_cfg():
    """8 kHz, 13 coefficients: keeps victim and attack tests fast"""
    return MfccConfig(n_coeffs=13, frame_length=200, hop=80, n_mels=26, fft_size=256, t_max=200,
                      sample_rate=8000)


@pytest.fixture
def tiny_spec():
    return CorpusSpec(commands=("yes", "no", "up"), clips_per_command=6, keyword_duration_s=0.5,
                      utterances_per_bucket=2, sample_rate=8000)


@pytest.fixture
def tiny_corpus(tmp_path, tiny_spec, small_cfg):
    manifest = synth_corpus(tiny_spec, seed=7, out_dir=tmp_path / "corpus", mfcc_cfg=small_cfg,
                            vad=VadParams(), progress=False)
    manifest.save(tmp_path / "corpus" / "corpus.jsonl")
    return manifest
