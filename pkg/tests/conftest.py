import numpy as np
import pytest

from ema_ats.config import ModelConfig, TrainConfig, small_config
from ema_ats.data import AudioWaveform, EmaRecording, channel_names, generate_synthetic_corpus
from ema_ats.model import init_parameters
from ema_ats.training import train_loop

SR = 44100


def tone(freq, seconds, amp=0.5, sr=SR):
    t = np.arange(int(round(seconds * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def ema_for(n_audio, c=18, rate=100.0, seed=0):
    rng = np.random.default_rng(seed)
    n = int(round(n_audio / SR * rate))
    return EmaRecording(rng.standard_normal((n, c)).cumsum(axis=0), rate, channel_names(c))


@pytest.fixture
def cfg():
    return ModelConfig()


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(n_speakers=2, d_hidden=16, d_style=8, n_conformer_blocks=1, d_ff=32,
                       n_baseline_transformer_layers=1)


@pytest.fixture(scope="session")
def corpus_cfg():
    return small_config(n_speakers=2)


@pytest.fixture(scope="session")
def corpus(corpus_cfg):
    return generate_synthetic_corpus(2, 4, 42, corpus_cfg)


@pytest.fixture(scope="session")
def overfit(corpus, corpus_cfg):
    """The 500-step Adam(1e-4) overfit run on the 4-utterance corpus."""
    tcfg = TrainConfig(learning_rate=1e-4, max_steps=500, checkpoint_every=500, seed=0)
    result = train_loop(corpus, corpus_cfg, tcfg)
    return result, init_parameters(corpus_cfg), tcfg
