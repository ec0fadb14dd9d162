"""Objective metrics: mel-cepstral distortion, prosody trajectories, CER."""

from __future__ import annotations

import csv
import logging
import math
import re
import string
import urllib.error
import urllib.request
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.fft import dct

from . import formats
from . import model as M
from .config import ModelConfig
from .data import AudioWaveform, MelSpectrogram, ProsodyTrack, UtteranceSample
from .inference import mel_from_frames

log = logging.getLogger(__name__)

MCD_SCALE = 10.0 / math.log(10.0)


class ASRError(RuntimeError):
    pass


def mel_to_cepstra(mel, n_ceps: int = 13) -> np.ndarray:
    """Orthonormal DCT-II of each log-mel frame, keeping coefficients 1..n_ceps."""
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)
    if not 1 <= n_ceps < frames.shape[1]:
        raise ValueError(f"n_ceps must be in [1, {frames.shape[1] - 1}], got {n_ceps}")
    return dct(frames, type=2, norm="ortho", axis=1)[:, 1:n_ceps + 1]


def mcd(ref_ceps, gen_ceps) -> float:
    ref = np.asarray(ref_ceps, dtype=np.float64)
    gen = np.asarray(gen_ceps, dtype=np.float64)
    if ref.shape != gen.shape:
        raise ValueError(f"cepstra shape mismatch: {ref.shape} vs {gen.shape}")
    diff = ref - gen
    return float(np.mean(MCD_SCALE * np.sqrt(2.0 * np.sum(diff * diff, axis=1))))


@dataclass
class TrajectoryComparison:
    pitch_rmse_db: float
    energy_rmse_db: float
    table: np.ndarray  # columns: frame, pitch_ref, pitch_est, energy_ref, energy_est

    def write(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>_pitch.txt`` and ``<stem>_energy.txt`` (frame, reference, estimate)."""
        stem = Path(stem)
        paths = []
        for track, cols in (("pitch", [0, 1, 2]), ("energy", [0, 3, 4])):
            p = stem.with_name(f"{stem.name}_{track}.txt")
            np.savetxt(p, self.table[:, cols], fmt=["%d", "%.6f", "%.6f"],
                       header="frame reference estimated", comments="# ")
            paths.append(p)
        return tuple(paths)


def trajectory_compare(pred, target: ProsodyTrack) -> TrajectoryComparison:
    """RMSE of pitch (voiced target frames only) and energy, plus a plot table.

    ``pred`` is a ProsodyTrack or a ``(pitch_db, energy_db)`` pair.
    """
    if isinstance(pred, ProsodyTrack):
        pitch, energy = pred.pitch_db, pred.energy_db
    else:
        pitch, energy = (np.asarray(v, dtype=np.float64) for v in pred)
    if len(pitch) != len(target) or len(energy) != len(target):
        raise ValueError(f"length mismatch: prediction {len(pitch)}/{len(energy)} vs target {len(target)}")
    voiced = target.voiced
    if voiced.any():
        pitch_rmse = float(np.sqrt(np.mean((pitch[voiced] - target.pitch_db[voiced]) ** 2)))
    else:
        pitch_rmse = float("nan")
    energy_rmse = float(np.sqrt(np.mean((energy - target.energy_db) ** 2)))
    table = np.column_stack([np.arange(len(target)), target.pitch_db, pitch, target.energy_db, energy])
    return TrajectoryComparison(pitch_rmse, energy_rmse, table)


# --- CER


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def normalize_text(text: str) -> str:
    return " ".join(_PUNCT.sub("", text.lower()).split())


def cer(hypothesis: str, reference: str, normalize: bool = False) -> float:
    """Character error rate in percent."""
    if normalize:
        hypothesis, reference = normalize_text(hypothesis), normalize_text(reference)
    if not reference:
        raise ValueError("empty reference transcript")
    return 100.0 * levenshtein(hypothesis, reference) / len(reference)


def transcribe(wav: AudioWaveform, endpoint: str, timeout: float = 30.0) -> str:
    body = formats.wav_bytes(wav.samples, wav.sample_rate_hz)
    req = urllib.request.Request(endpoint, data=body, method="POST",
                                 headers={"Content-Type": "audio/wav"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.read().decode("utf-8").strip()
    except (urllib.error.URLError, OSError, UnicodeDecodeError) as exc:
        raise ASRError(f"ASR request failed: {exc}") from None


def cer_harness(audio_pairs, asr_endpoint: str, normalize: bool = True,
                timeout: float = 30.0) -> float:
    """Mean CER (%) over (audio, reference transcript) pairs; failed requests
    are skipped with a warning."""
    scores = []
    for i, (wav, reference) in enumerate(audio_pairs):
        try:
            hyp = transcribe(wav, asr_endpoint, timeout)
        except ASRError as exc:
            warnings.warn(f"pair {i} excluded: {exc}", stacklevel=2)
            continue
        scores.append(cer(hyp, reference, normalize))
    if not scores:
        raise ASRError("all ASR requests failed")
    return float(np.mean(scores))


# --- corpus report


@dataclass
class EvalRow:
    utterance_id: str
    mcd_db: float
    pitch_rmse_db: float
    energy_rmse_db: float
    cer_percent: float | None = None
    stoi: float | None = None
    pesq: float | None = None


REPORT_FIELDS = ("utterance_id", "mcd_db", "pitch_rmse_db", "energy_rmse_db", "cer_percent", "stoi", "pesq")


@dataclass
class EvalReport:
    rows: list[EvalRow]
    trajectories: dict[str, TrajectoryComparison] = field(default_factory=dict)

    def mean(self, column: str) -> float | None:
        vals = [getattr(r, column) for r in self.rows if getattr(r, column) is not None]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else None

    @property
    def means(self) -> dict[str, float | None]:
        return {c: self.mean(c) for c in REPORT_FIELDS[1:]}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_FIELDS)
            for r in self.rows:
                w.writerow([_cell(getattr(r, c)) for c in REPORT_FIELDS])
            means = self.means
            w.writerow(["MEAN"] + [_cell(means[c]) for c in REPORT_FIELDS[1:]])

    def merge_external(self, path) -> None:
        """Fill stoi/pesq/cer columns from a CSV keyed by utterance_id."""
        with open(path, newline="") as fh:
            ext = {row["utterance_id"]: row for row in csv.DictReader(fh)}
        for r in self.rows:
            row = ext.get(r.utterance_id)
            if row is None:
                continue
            for col in ("stoi", "pesq", "cer_percent"):
                if row.get(col) not in (None, ""):
                    setattr(r, col, float(row[col]))


def _cell(v):
    if v is None:
        return ""
    return v if isinstance(v, str) else f"{v:.6f}"


def predict_prosody(sample: UtteranceSample, params, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Training-path style encoder + variance predictors on the sample's EMA."""
    onehot = M.one_hot_speaker(sample.speaker_index, cfg.n_speakers)
    with torch.no_grad():
        h = M.integration_block(sample.ema, onehot, params, cfg)
        s = M.style_encoder(h, params, cfg)
        pitch = M.variance_predictor(s, params, cfg, "pitch")
        energy = M.variance_predictor(s, params, cfg, "energy")
    return pitch.double().numpy(), energy.double().numpy()


def evaluate_corpus(params, corpus: list[UtteranceSample], cfg: ModelConfig, n_ceps: int = 13,
                    synthesizer=None, prosody_predictor=None) -> EvalReport:
    """Frame-aligned MCD of synthesized vs target mels and prosody RMSE per utterance.

    ``synthesizer(sample) -> mel frames`` and ``prosody_predictor(sample) -> (pitch, energy)``
    override the model paths (used for stub/oracle checks).
    """
    synthesizer = synthesizer or (lambda s: mel_from_frames(s.ema, s.speaker_index, params, cfg))
    prosody_predictor = prosody_predictor or (lambda s: predict_prosody(s, params, cfg))
    rows, trajectories = [], {}
    for sample in corpus:
        gen = np.asarray(synthesizer(sample))
        d = mcd(mel_to_cepstra(sample.mel.frames, n_ceps), mel_to_cepstra(gen, n_ceps))
        traj = trajectory_compare(prosody_predictor(sample), sample.prosody)
        rows.append(EvalRow(sample.utterance_id, d, traj.pitch_rmse_db, traj.energy_rmse_db))
        trajectories[sample.utterance_id] = traj
    return EvalReport(rows, trajectories)
