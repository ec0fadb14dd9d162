"""EMA + speaker -> mel, Griffin-Lim rendering, and the external vocoder client."""

from __future__ import annotations

import logging
import socket
import urllib.error
import urllib.request
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from . import audio as A
from . import formats
from . import model as M
from .config import ModelConfig
from .data import AudioWaveform, EmaRecording, MelSpectrogram, resample_ema

log = logging.getLogger(__name__)


class MissingParametersError(KeyError):
    pass


class VocoderError(RuntimeError):
    pass


class VocoderTransportError(VocoderError):
    pass


class VocoderTimeoutError(VocoderError):
    pass


class VocoderStatusError(VocoderError):
    pass


class VocoderResponseError(VocoderError):
    pass


class VocoderFallbackWarning(UserWarning):
    pass


def inference_frames(ema: EmaRecording, cfg: ModelConfig) -> int:
    """Mel frame count implied by the EMA duration at the audio hop rate."""
    return max(1, int(round(ema.duration_s * cfg.audio_rate_hz / cfg.hop_samples)))


def mel_from_frames(ema_frames, speaker_index: int, params, cfg: ModelConfig) -> np.ndarray:
    """Inference path on EMA already on the mel frame grid: integration block,
    style encoder, mel generator. Variance predictors are never evaluated."""
    onehot = M.one_hot_speaker(speaker_index, cfg.n_speakers)
    try:
        with torch.no_grad():
            h = M.integration_block(ema_frames, onehot, params, cfg)
            s = M.style_encoder(h, params, cfg)
            mel = M.mel_generator(h, s, params, cfg)
    except KeyError as exc:
        raise MissingParametersError(f"untrained or incomplete parameters: {exc}") from None
    return mel.double().numpy()


def synthesize_mel(ema: EmaRecording, speaker_index: int, params, cfg: ModelConfig,
                   target_frames: int | None = None) -> MelSpectrogram:
    if target_frames is None:
        target_frames = inference_frames(ema, cfg)
    frames = resample_ema(ema.samples, target_frames)
    mel = mel_from_frames(frames, speaker_index, params, cfg)
    return MelSpectrogram(mel, cfg.hop_samples, cfg.win_samples, cfg.audio_rate_hz)


# --- Griffin-Lim


def mel_to_magnitude(mel_frames: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Approximate linear magnitudes [T, win//2+1] via the normalized filterbank transpose."""
    fb = A.mel_filterbank(cfg)
    m = np.maximum(np.exp(mel_frames) - A.EPS, 0.0)
    weight = fb.sum(axis=0)
    mag = m @ fb
    return np.where(weight > 1e-8, mag / np.maximum(weight, 1e-8), 0.0)


def _stft(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    frames = A.frame_signal(x, cfg.win_samples, cfg.hop_samples)
    return np.fft.rfft(frames * A.window(cfg), axis=1)


def _istft(spec: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Least-squares overlap-add inverse of :func:`_stft`."""
    win, hop = cfg.win_samples, cfg.hop_samples
    w = A.window(cfg)
    t = spec.shape[0]
    n = (t - 1) * hop + win
    frames = np.fft.irfft(spec, n=win, axis=1) * w
    out = np.zeros(n)
    norm = np.zeros(n)
    for i in range(t):
        out[i * hop:i * hop + win] += frames[i]
        norm[i * hop:i * hop + win] += w * w
    return out / np.maximum(norm, 1e-8)


def spectral_convergence(spec: np.ndarray, target_mag: np.ndarray) -> float:
    return float(np.linalg.norm(np.abs(spec) - target_mag) / max(np.linalg.norm(target_mag), 1e-12))


def griffin_lim(mel: MelSpectrogram, n_iters: int = 60, cfg: ModelConfig | None = None,
                seed: int = 0, convergence: list | None = None) -> AudioWaveform:
    """Render a waveform from a log-mel spectrogram by iterative phase recovery.

    If ``convergence`` is a list, the spectral convergence after each round is appended.
    """
    cfg = cfg or ModelConfig(n_mels=mel.n_mels, hop_samples=mel.hop_samples,
                             win_samples=mel.win_samples, audio_rate_hz=mel.audio_rate_hz)
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    target = mel_to_magnitude(mel.frames, cfg)
    rng = np.random.default_rng(seed)
    spec = target * np.exp(2j * np.pi * rng.random(target.shape))
    for _ in range(n_iters):
        x = _istft(spec, cfg)
        rebuilt = _stft(x, cfg)
        if convergence is not None:
            convergence.append(spectral_convergence(rebuilt, target))
        spec = target * np.exp(1j * np.angle(rebuilt))
    x = _istft(spec, cfg)
    x = np.nan_to_num(x, nan=0.0, posinf=0.0, neginf=0.0)
    return AudioWaveform(np.clip(x, -1.0, 1.0), cfg.audio_rate_hz)


# --- external vocoder


@dataclass
class VocoderRequest:
    mel: MelSpectrogram
    speaker_label: str
    request_id: str

    def encode(self) -> bytes:
        header = {
            "frames": self.mel.n_frames,
            "n_mels": self.mel.n_mels,
            "hop_samples": self.mel.hop_samples,
            "audio_rate_hz": self.mel.audio_rate_hz,
            "speaker_label": self.speaker_label,
            "request_id": self.request_id,
        }
        return formats.pack_arrays(header, {"mel": self.mel.frames})

    @classmethod
    def decode(cls, payload: bytes) -> "VocoderRequest":
        header, arrays = formats.unpack_arrays(payload)
        mel = arrays["mel"]
        if mel.shape != (header["frames"], header["n_mels"]):
            raise formats.FormatError("mel shape disagrees with header")
        return cls(MelSpectrogram(mel, header["hop_samples"], 1024, header["audio_rate_hz"]),
                   header["speaker_label"], header["request_id"])


def _post(endpoint: str, body: bytes, timeout: float) -> bytes:
    req = urllib.request.Request(endpoint, data=body, method="POST",
                                 headers={"Content-Type": "application/octet-stream"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.read()
    except urllib.error.HTTPError as exc:
        raise VocoderStatusError(f"vocoder returned HTTP {exc.code}") from None
    except (socket.timeout, TimeoutError) as exc:
        raise VocoderTimeoutError(f"vocoder timed out after {timeout} s") from exc
    except urllib.error.URLError as exc:
        if isinstance(exc.reason, (socket.timeout, TimeoutError)):
            raise VocoderTimeoutError(f"vocoder timed out after {timeout} s") from None
        raise VocoderTransportError(f"vocoder unreachable: {exc.reason}") from None
    except OSError as exc:
        raise VocoderTransportError(f"vocoder transport failure: {exc}") from None


def vocoder_client(request: VocoderRequest, endpoint: str | None, *, fallback: bool = True,
                   timeout: float = 10.0, gl_iters: int = 60,
                   cfg: ModelConfig | None = None) -> AudioWaveform:
    """POST the mel to ``endpoint`` and parse the WAV reply.

    On any failure, renders with Griffin-Lim when ``fallback`` is set (emitting a
    :class:`VocoderFallbackWarning`); otherwise re-raises.
    """
    try:
        if not endpoint:
            raise VocoderTransportError("no vocoder endpoint configured")
        payload = _post(endpoint, request.encode(), timeout)
        try:
            samples, rate = formats.parse_wav(payload)
            return AudioWaveform(samples, rate)
        except (formats.FormatError, ValueError) as exc:
            raise VocoderResponseError(f"malformed vocoder response: {exc}") from None
    except VocoderError as exc:
        if not fallback:
            raise
        msg = f"request {request.request_id}: {exc}; falling back to Griffin-Lim"
        log.warning(msg)
        warnings.warn(msg, VocoderFallbackWarning, stacklevel=2)
        return griffin_lim(request.mel, gl_iters, cfg)
