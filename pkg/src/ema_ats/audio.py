"""Frame-level acoustic features: log-mel, pitch and energy in dB, silence trimming."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .config import ModelConfig

EPS = 1e-8


class AudioTooShortError(ValueError):
    pass


def to_db(x):
    return 20.0 * np.log10(x)


def from_db(y):
    return 10.0 ** (np.asarray(y) / 20.0)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def num_frames(n_samples: int, win: int, hop: int) -> int:
    if n_samples < win:
        raise AudioTooShortError(f"audio too short: {n_samples} samples < window {win}")
    return (n_samples - win) // hop + 1


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    """[T, win] view of fully contained frames (no centre padding)."""
    x = np.asarray(x, dtype=np.float64)
    t = num_frames(len(x), win, hop)
    return np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:t]


@lru_cache(maxsize=8)
def _window(kind: str, n: int) -> np.ndarray:
    if kind == "rect":
        return np.ones(n)
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def window(cfg: ModelConfig) -> np.ndarray:
    return _window(cfg.window, cfg.win_samples)


@lru_cache(maxsize=8)
def _mel_filterbank(sr: int, n_fft: int, n_mels: int) -> np.ndarray:
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sr / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: ModelConfig) -> np.ndarray:
    """HTK-scale triangular filters, [n_mels, win//2 + 1], peak gain 1."""
    return _mel_filterbank(cfg.audio_rate_hz, cfg.win_samples, cfg.n_mels)


def mel_center_frequencies(cfg: ModelConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.audio_rate_hz / 2.0), cfg.n_mels + 2))
    return edges[1:-1]


def magnitude_spectrogram(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    frames = frame_signal(x, cfg.win_samples, cfg.hop_samples)
    return np.abs(np.fft.rfft(frames * window(cfg), axis=1))


def extract_mel(samples: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Natural-log mel magnitudes, shape [T, n_mels]."""
    mag = magnitude_spectrogram(samples, cfg)
    return np.log(mag @ mel_filterbank(cfg).T + EPS)


def extract_energy(samples: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    mag = magnitude_spectrogram(samples, cfg)
    return to_db(np.linalg.norm(mag, axis=1) + EPS)


def _frame_f0(frame: np.ndarray, min_lag: int, max_lag: int, threshold: float) -> float | None:
    frame = frame - frame.mean()
    n = len(frame)
    energy = np.cumsum(np.concatenate(([0.0], frame * frame)))
    if energy[-1] <= 0.0:
        return None
    max_lag = min(max_lag, n - 2)
    lags = np.arange(min_lag - 1, max_lag + 2)
    spec = np.fft.rfft(frame, 2 * n)
    acf = np.fft.irfft(spec * np.conj(spec))[:n]
    # energies of x[0:n-lag] and x[lag:n]
    e_head = energy[n - lags]
    e_tail = energy[n] - energy[lags]
    denom = np.sqrt(e_head * e_tail)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, acf[lags] / denom, 0.0)
    inner = r[1:-1]
    is_peak = (inner >= r[:-2]) & (inner > r[2:])
    if not is_peak.any():
        return None
    peak_idx = np.flatnonzero(is_peak)
    best = inner[peak_idx].max()
    if best < threshold:
        return None
    # shortest lag close to the best peak avoids sub-octave picks
    i = peak_idx[inner[peak_idx] >= 0.9 * best][0] + 1
    a, b, c = r[i - 1], r[i], r[i + 1]
    denom = a - 2 * b + c
    shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
    return float(lags[i] + np.clip(shift, -0.5, 0.5))


def extract_pitch(samples: np.ndarray, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Normalized-autocorrelation F0 per frame.

    Returns ``(pitch_db, voiced)``; unvoiced frames carry 0.0 dB.
    """
    frames = frame_signal(samples, cfg.win_samples, cfg.hop_samples)
    sr = cfg.audio_rate_hz
    min_lag = max(2, int(np.floor(sr / cfg.f0_max_hz)))
    max_lag = int(np.ceil(sr / cfg.f0_min_hz))
    pitch = np.zeros(len(frames))
    voiced = np.zeros(len(frames), dtype=bool)
    for t, frame in enumerate(frames):
        lag = _frame_f0(frame, min_lag, max_lag, cfg.voicing_threshold)
        if lag is None:
            continue
        f0 = sr / lag
        if cfg.f0_min_hz <= f0 <= cfg.f0_max_hz:
            pitch[t] = to_db(f0)
            voiced[t] = True
    return pitch, voiced


def short_term_energy_db(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < frame_len:
        frames = x[None, :]
    else:
        frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop]
    power = np.mean(frames * frames, axis=1)
    return 10.0 * np.log10(power + EPS * EPS)


def active_span(samples: np.ndarray, sample_rate: int, threshold_db: float,
                frame_ms: float = 25.0, hop_ms: float = 10.0) -> tuple[int, int] | None:
    """Sample interval ``[start, stop)`` between the first and last frames whose
    energy lies within ``threshold_db`` of the loudest frame; None if nothing is."""
    n = len(samples)
    frame_len = max(1, int(round(frame_ms * 1e-3 * sample_rate)))
    hop = max(1, int(round(hop_ms * 1e-3 * sample_rate)))
    e = short_term_energy_db(samples, frame_len, hop)
    peak = e.max()
    if peak <= 10.0 * np.log10(EPS * EPS) + 1e-9:
        return None
    active = np.flatnonzero(e >= peak + threshold_db)
    first, last = active[0], active[-1]
    start = first * hop
    stop = n if last == len(e) - 1 else min(n, last * hop + frame_len)
    return int(start), int(stop)
