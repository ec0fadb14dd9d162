"""Recordings, aligned training samples, and the synthetic verification corpus."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import audio as A
from . import formats
from .config import ModelConfig

HASKINS_SENSORS = ("TR", "TB", "TT", "UL", "LL", "JAW")
AXES = ("X", "Y", "Z")
HASKINS_CHANNELS = tuple(f"{s}_{a}" for s in HASKINS_SENSORS for a in AXES)

DURATION_TOLERANCE_S = 0.05


class DataError(ValueError):
    pass


class UnalignedPairError(DataError):
    pass


class SilentUtteranceError(DataError):
    pass


def channel_names(c_ema: int) -> list[str]:
    if c_ema == len(HASKINS_CHANNELS):
        return list(HASKINS_CHANNELS)
    return [f"CH{i:02d}" for i in range(c_ema)]


@dataclass
class EmaRecording:
    samples: np.ndarray
    sample_rate_hz: float
    channel_names: list[str]

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[1] < 1:
            raise DataError(f"EMA samples must be [T, C], got {self.samples.shape}")
        if len(self.channel_names) != self.samples.shape[1]:
            raise DataError(
                f"{len(self.channel_names)} channel names for {self.samples.shape[1]} channels"
            )
        if self.sample_rate_hz <= 0:
            raise DataError("EMA sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("EMA contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.sample_rate_hz


@dataclass
class AudioWaveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError("audio must be mono")
        if self.sample_rate_hz <= 0:
            raise DataError("audio sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("audio contains non-finite samples")
        if np.any(np.abs(self.samples) > 1.0):
            raise DataError("audio samples must lie in [-1, 1]")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass
class MelSpectrogram:
    frames: np.ndarray
    hop_samples: int
    win_samples: int
    audio_rate_hz: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(f"mel must be [T>=1, n_mels], got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError("mel contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


@dataclass
class ProsodyTrack:
    pitch_db: np.ndarray
    energy_db: np.ndarray
    voiced: np.ndarray

    def __post_init__(self):
        self.pitch_db = np.asarray(self.pitch_db, dtype=np.float64)
        self.energy_db = np.asarray(self.energy_db, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if not (len(self.pitch_db) == len(self.energy_db) == len(self.voiced)):
            raise DataError("pitch, energy and voicing lengths differ")
        if not (np.all(np.isfinite(self.pitch_db)) and np.all(np.isfinite(self.energy_db))):
            raise DataError("prosody contains non-finite values")

    def __len__(self):
        return len(self.pitch_db)


@dataclass
class UtteranceSample:
    ema: np.ndarray
    mel: MelSpectrogram
    prosody: ProsodyTrack
    speaker_index: int
    utterance_id: str = ""

    def __post_init__(self):
        self.ema = np.asarray(self.ema, dtype=np.float64)
        t = self.mel.n_frames
        if self.ema.shape[0] != t or len(self.prosody) != t:
            raise DataError(
                f"misaligned sample {self.utterance_id!r}: ema {self.ema.shape[0]}, "
                f"mel {t}, prosody {len(self.prosody)} frames"
            )

    @property
    def n_frames(self) -> int:
        return self.mel.n_frames

    def to_arrays(self) -> tuple[dict, dict[str, np.ndarray]]:
        header = {
            "utterance_id": self.utterance_id,
            "speaker_index": self.speaker_index,
            "hop_samples": self.mel.hop_samples,
            "win_samples": self.mel.win_samples,
            "audio_rate_hz": self.mel.audio_rate_hz,
        }
        arrays = {
            "ema": self.ema,
            "mel": self.mel.frames,
            "pitch_db": self.prosody.pitch_db,
            "energy_db": self.prosody.energy_db,
            "voiced": self.prosody.voiced.astype(np.float64),
        }
        return header, arrays

    @classmethod
    def from_arrays(cls, header: dict, arrays: dict[str, np.ndarray]) -> "UtteranceSample":
        mel = MelSpectrogram(arrays["mel"], header["hop_samples"], header["win_samples"],
                             header["audio_rate_hz"])
        prosody = ProsodyTrack(arrays["pitch_db"], arrays["energy_db"], arrays["voiced"] > 0.5)
        return cls(arrays["ema"], mel, prosody, int(header["speaker_index"]),
                   str(header["utterance_id"]))

    def save(self, path) -> None:
        formats.save_arrays(path, *self.to_arrays())

    @classmethod
    def load(cls, path) -> "UtteranceSample":
        return cls.from_arrays(*formats.load_arrays(path))


def _check_aligned(ema: EmaRecording, wav: AudioWaveform) -> None:
    gap = abs(ema.duration_s - wav.duration_s)
    if gap > DURATION_TOLERANCE_S:
        raise UnalignedPairError(
            f"unaligned pair: EMA {ema.duration_s:.3f} s vs audio {wav.duration_s:.3f} s"
        )


def trim_silence(ema: EmaRecording, wav: AudioWaveform,
                 threshold_db: float = -40.0) -> tuple[EmaRecording, AudioWaveform]:
    """Drop leading/trailing audio quieter than ``threshold_db`` below the peak
    (25 ms frames, 10 ms hop) and crop the EMA to the same interval."""
    _check_aligned(ema, wav)
    span = A.active_span(wav.samples, wav.sample_rate_hz, threshold_db)
    if span is None:
        raise SilentUtteranceError("all-silent utterance")
    start, stop = span
    n = len(wav.samples)
    if start == 0 and stop == n:
        return ema, wav
    t = ema.n_frames
    e0 = int(round(start * t / n))
    e1 = max(e0 + 1, int(round(stop * t / n)))
    out_ema = EmaRecording(ema.samples[e0:e1], ema.sample_rate_hz, list(ema.channel_names))
    out_wav = AudioWaveform(wav.samples[start:stop], wav.sample_rate_hz)
    return out_ema, out_wav


def resample_ema(samples: np.ndarray, target_frames: int) -> np.ndarray:
    """Per-channel linear interpolation onto ``target_frames`` uniform points
    spanning the first to the last input row."""
    samples = np.asarray(samples, dtype=np.float64)
    if target_frames < 1:
        raise ValueError(f"target_frames must be >= 1, got {target_frames}")
    t = samples.shape[0]
    if t < 2:
        raise ValueError("resampling needs at least 2 EMA rows")
    src = np.arange(t, dtype=np.float64)
    dst = np.linspace(0.0, t - 1.0, target_frames)
    out = np.empty((target_frames, samples.shape[1]))
    for c in range(samples.shape[1]):
        out[:, c] = np.interp(dst, src, samples[:, c])
    return out


def _check_rate(wav: AudioWaveform, cfg: ModelConfig) -> None:
    if wav.sample_rate_hz != cfg.audio_rate_hz:
        raise DataError(f"audio at {wav.sample_rate_hz} Hz, config expects {cfg.audio_rate_hz} Hz")


def extract_mel(wav: AudioWaveform, cfg: ModelConfig) -> MelSpectrogram:
    _check_rate(wav, cfg)
    frames = A.extract_mel(wav.samples, cfg)
    return MelSpectrogram(frames, cfg.hop_samples, cfg.win_samples, cfg.audio_rate_hz)


def extract_prosody(wav: AudioWaveform, cfg: ModelConfig) -> ProsodyTrack:
    _check_rate(wav, cfg)
    pitch, voiced = A.extract_pitch(wav.samples, cfg)
    return ProsodyTrack(pitch, A.extract_energy(wav.samples, cfg), voiced)


def build_sample(ema: EmaRecording, wav: AudioWaveform, speaker_index: int, cfg: ModelConfig,
                 utterance_id: str = "") -> UtteranceSample:
    if ema.samples.shape[1] != cfg.c_ema:
        raise DataError(f"EMA has {ema.samples.shape[1]} channels, config expects {cfg.c_ema}")
    if not 0 <= speaker_index < cfg.n_speakers:
        raise DataError(f"speaker index {speaker_index} out of range [0, {cfg.n_speakers})")
    ema, wav = trim_silence(ema, wav, cfg.trim_threshold_db)
    mel = extract_mel(wav, cfg)
    frames = resample_ema(ema.samples, mel.n_frames)
    return UtteranceSample(frames, mel, extract_prosody(wav, cfg), speaker_index, utterance_id)


def read_utterance(manifest: formats.DatasetManifest,
                   entry: formats.ManifestEntry) -> tuple[EmaRecording, AudioWaveform]:
    samples, rate, names = formats.read_ema(manifest.resolve(entry.ema_path))
    audio, sr = formats.read_wav(manifest.resolve(entry.audio_path))
    return EmaRecording(samples, rate, names), AudioWaveform(np.clip(audio, -1.0, 1.0), sr)


# --- synthetic corpus


@dataclass
class RawUtterance:
    utterance_id: str
    speaker_index: int
    ema: EmaRecording
    audio: AudioWaveform
    info: dict = field(default_factory=dict)


def speaker_base_f0(speaker_index: int, n_speakers: int) -> float:
    """Geometrically spaced base F0 in [90, 280] Hz, one per speaker."""
    if n_speakers == 1:
        return 150.0
    return float(90.0 * (280.0 / 90.0) ** (speaker_index / (n_speakers - 1)))


def _formant_gain(freqs: np.ndarray, formants: np.ndarray, bandwidths: np.ndarray) -> np.ndarray:
    # freqs [H, N], formants [3, N]
    g = np.zeros_like(freqs)
    for f, bw in zip(formants, bandwidths):
        g += 1.0 / (1.0 + ((freqs - f[None, :]) / bw) ** 2)
    return g


def synthesize_raw_utterance(rng: np.random.Generator, utterance_id: str, speaker_index: int,
                             n_speakers: int, cfg: ModelConfig, ema_rate: float = 100.0,
                             silence_s: float = 0.1) -> RawUtterance:
    """One EMA/audio pair: smooth articulator trajectories drive three formants
    of a harmonic source whose F0 is set by the speaker."""
    sr = cfg.audio_rate_hz
    duration = float(rng.uniform(1.0, 3.0))
    n_ema = int(round(duration * ema_rate))
    n_audio = int(round(n_ema / ema_rate * sr))
    t_ema = np.arange(n_ema) / ema_rate

    ema = np.zeros((n_ema, cfg.c_ema))
    for c in range(cfg.c_ema):
        for _ in range(int(rng.integers(1, 6))):
            f = rng.uniform(0.2, 4.0)
            ema[:, c] += rng.uniform(0.5, 3.0) * np.sin(2 * np.pi * f * t_ema + rng.uniform(0, 2 * np.pi))
        ema[:, c] += rng.uniform(-10.0, 10.0)

    # articulators -> formants, affine in three channels
    drivers = ema[:, :3] if cfg.c_ema >= 3 else np.repeat(ema[:, :1], 3, axis=1)
    drivers = (drivers - drivers.mean(axis=0)) / (drivers.std(axis=0) + 1e-9)
    base = np.array([550.0, 1500.0, 2500.0])
    spread = np.array([150.0, 350.0, 400.0])
    formants_ema = base[:, None] + spread[:, None] * np.tanh(0.7 * drivers.T)
    t_audio = np.arange(n_audio) / sr
    formants = np.stack([np.interp(t_audio, t_ema, f) for f in formants_ema])
    bandwidths = np.array([90.0, 120.0, 180.0])

    f0_base = speaker_base_f0(speaker_index, n_speakers)
    f0 = f0_base * (1.0 + 0.04 * np.sin(2 * np.pi * rng.uniform(0.3, 1.5) * t_audio + rng.uniform(0, 6.3)))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    n_harm = int(5000.0 // f0_base)
    k = np.arange(1, n_harm + 1)[:, None]
    gains = _formant_gain(k * f0[None, :], formants, bandwidths) / k
    wave = np.sum(gains * np.sin(k * phase[None, :]), axis=0)

    envelope = np.ones(n_audio)
    edge = int(silence_s * sr)
    ramp = int(0.02 * sr)
    envelope[:edge] = 0.0
    envelope[n_audio - edge:] = 0.0
    envelope[edge:edge + ramp] = np.linspace(0.0, 1.0, ramp)
    envelope[n_audio - edge - ramp:n_audio - edge] = np.linspace(1.0, 0.0, ramp)
    wave = wave * envelope
    wave *= 0.5 / np.max(np.abs(wave))
    wave += 1e-4 * rng.standard_normal(n_audio)
    wave = np.clip(wave, -1.0, 1.0)

    return RawUtterance(
        utterance_id, speaker_index,
        EmaRecording(ema, ema_rate, channel_names(cfg.c_ema)),
        AudioWaveform(wave, sr),
        {"f0_base_hz": f0_base, "duration_s": n_audio / sr},
    )


def generate_raw_corpus(n_speakers: int, n_utterances: int, seed: int,
                        cfg: ModelConfig | None = None) -> list[RawUtterance]:
    if n_speakers < 1 or n_utterances < 1:
        raise ValueError("need at least one speaker and one utterance")
    cfg = cfg or ModelConfig(n_speakers=n_speakers)
    rng = np.random.default_rng(seed)
    return [
        synthesize_raw_utterance(rng, f"utt{i:04d}", i % n_speakers, n_speakers, cfg)
        for i in range(n_utterances)
    ]


def generate_synthetic_corpus(n_speakers: int, n_utterances: int, seed: int,
                              cfg: ModelConfig | None = None) -> list[UtteranceSample]:
    """Deterministic corpus; utterance i belongs to speaker ``i % n_speakers``."""
    cfg = cfg or ModelConfig(n_speakers=n_speakers)
    if cfg.n_speakers < n_speakers:
        raise ValueError("config has fewer speakers than requested")
    return [
        build_sample(r.ema, r.audio, r.speaker_index, cfg, r.utterance_id)
        for r in generate_raw_corpus(n_speakers, n_utterances, seed, cfg)
    ]
