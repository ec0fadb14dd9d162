"""On-disk and wire formats.

Array container layout (checkpoints, utterance caches, vocoder requests)::

    b"ATSARR01" | uint64 LE header length | JSON header (utf-8) | data block

The JSON header holds an ``index`` mapping each array name to
``{"offset": bytes from start of data block, "shape": [...]}`` and an ``order``
list of the names as written; all arrays are
little-endian float64, row-major. Everything else in the header is free-form
metadata.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

MAGIC = b"ATSARR01"
_F64 = np.dtype("<f8")
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """Malformed file or payload."""


class MissingFileError(FileNotFoundError):
    pass


class ChannelCountError(FormatError):
    pass


def pack_arrays(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    index = {}
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=_F64).tobytes()
        index[name] = {"offset": offset, "shape": list(np.shape(arr))}
        chunks.append(data)
        offset += len(data)
    meta = dict(header)
    meta["index"] = index
    meta["order"] = list(arrays)
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def unpack_arrays(payload: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(payload) < 16 or payload[:8] != MAGIC:
        raise FormatError("bad magic: not an array container")
    (hlen,) = struct.unpack("<Q", payload[8:16])
    try:
        header = json.loads(payload[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header: {exc}") from None
    data = memoryview(payload)[16 + hlen:]
    index = header.pop("index", {})
    order = header.pop("order", sorted(index))
    arrays = {}
    for name in order:
        entry = index[name]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + count * 8
        if stop > len(data):
            raise FormatError(f"array {name!r} runs past end of payload")
        arrays[name] = np.frombuffer(data[start:stop], dtype=_F64).reshape(shape).copy()
    return header, arrays


def save_arrays(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(pack_arrays(header, arrays))
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing file: {path}")
    return unpack_arrays(path.read_bytes())


# --- EMA intermediate format: <stem>.f32 (row-major LE float32) + <stem>.json


def ema_header_path(data_path) -> Path:
    return Path(data_path).with_suffix(".json")


def write_ema(path, samples: np.ndarray, sample_rate_hz: float, channel_names: list[str]) -> None:
    path = Path(path)
    samples = np.asarray(samples)
    path.write_bytes(np.ascontiguousarray(samples, dtype=_F32).tobytes())
    header = {"sample_rate_hz": sample_rate_hz, "channel_names": list(channel_names),
              "n_frames": int(samples.shape[0])}
    ema_header_path(path).write_text(json.dumps(header, indent=2) + "\n")


def read_ema(path) -> tuple[np.ndarray, float, list[str]]:
    path = Path(path)
    hpath = ema_header_path(path)
    for p in (path, hpath):
        if not p.exists():
            raise MissingFileError(f"missing file: {p}")
    try:
        header = json.loads(hpath.read_text())
        rate = float(header["sample_rate_hz"])
        names = [str(n) for n in header["channel_names"]]
        n_frames = header.get("n_frames")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed header {hpath}: {exc}") from None
    raw = path.read_bytes()
    n_ch = len(names)
    if n_ch == 0 or len(raw) % (4 * n_ch):
        raise ChannelCountError(
            f"channel-count mismatch in {path}: {len(raw) // 4} values do not fill rows of {n_ch} channels"
        )
    if n_frames is not None and int(n_frames) * n_ch * 4 != len(raw):
        raise ChannelCountError(
            f"channel-count mismatch in {path}: {len(raw) // 4} values, expected {n_frames} x {n_ch}"
        )
    samples = np.frombuffer(raw, dtype=_F32).astype(np.float64).reshape(-1, n_ch)
    return samples, rate, names


# --- WAV


def wav_bytes(samples: np.ndarray, sample_rate_hz: int, subtype: str = "float32") -> bytes:
    samples = np.asarray(samples, dtype=np.float64)
    if subtype == "float32":
        data = samples.astype(np.float32)
    elif subtype == "pcm16":
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    buf = io.BytesIO()
    wavfile.write(buf, int(sample_rate_hz), data)
    return buf.getvalue()


def parse_wav(payload: bytes) -> tuple[np.ndarray, int]:
    try:
        rate, data = wavfile.read(io.BytesIO(payload))
    except (ValueError, EOFError, struct.error) as exc:
        raise FormatError(f"malformed WAV: {exc}") from None
    return _wav_to_float(data), int(rate)


def read_wav(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing file: {path}")
    return parse_wav(path.read_bytes())


def write_wav(path, samples: np.ndarray, sample_rate_hz: int, subtype: str = "float32") -> None:
    Path(path).write_bytes(wav_bytes(samples, sample_rate_hz, subtype))


def _wav_to_float(data: np.ndarray) -> np.ndarray:
    if data.ndim != 1:
        raise FormatError(f"expected mono WAV, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise FormatError(f"unsupported WAV sample type {data.dtype}")


# --- manifest


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    ema_path: str
    audio_path: str
    speaker_label: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    speaker_labels: list[str]
    root: Path | None = None

    def __post_init__(self):
        if len(set(self.speaker_labels)) != len(self.speaker_labels):
            raise FormatError("speaker_labels must be distinct")
        known = set(self.speaker_labels)
        seen = set()
        for e in self.entries:
            if e.speaker_label not in known:
                raise FormatError(f"entry {e.utterance_id!r} has unknown speaker {e.speaker_label!r}")
            if e.utterance_id in seen:
                raise FormatError(f"duplicate utterance_id {e.utterance_id!r}")
            seen.add(e.utterance_id)

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_labels)

    def speaker_index(self, label: str) -> int:
        return self.speaker_labels.index(label)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def to_json(self) -> str:
        doc = {
            "speaker_labels": self.speaker_labels,
            "entries": [
                {"utterance_id": e.utterance_id, "ema_path": e.ema_path,
                 "audio_path": e.audio_path, "speaker_label": e.speaker_label}
                for e in self.entries
            ],
        }
        return json.dumps(doc, indent=2) + "\n"


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing file: {path}")
    try:
        doc = json.loads(path.read_text())
        entries = [ManifestEntry(str(e["utterance_id"]), str(e["ema_path"]),
                                 str(e["audio_path"]), str(e["speaker_label"]))
                   for e in doc["entries"]]
        labels = [str(s) for s in doc["speaker_labels"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest {path}: {exc}") from None
    return DatasetManifest(entries, labels, root=path.parent)
