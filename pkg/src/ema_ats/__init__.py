"""Multi-speaker articulation-to-speech: EMA + speaker identity -> mel-spectrogram."""

from .config import ModelConfig, TrainConfig, small_config
from .data import (AudioWaveform, EmaRecording, MelSpectrogram, ProsodyTrack, UtteranceSample,
                   build_sample, generate_synthetic_corpus, resample_ema, trim_silence)
from .model import ParameterStore, init_baseline_parameters, init_parameters
from .training import LossBreakdown, l1_loss, total_loss, train_loop, train_step
from .inference import griffin_lim, synthesize_mel, vocoder_client
from .evaluation import evaluate_corpus, mcd, mel_to_cepstra, trajectory_compare

__version__ = "0.1.0"
