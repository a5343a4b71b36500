"""WAV ingestion/export, resampling and line-delimited manifests."""

import json
import os
from dataclasses import asdict, dataclass
from math import gcd
from typing import Iterable, List, Optional

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from . import SAMPLE_RATE
from .errors import DataError

MANIFEST_KINDS = ("clean", "noise", "rir")


def resample(x: np.ndarray, orig_sr: int, target_sr: int = SAMPLE_RATE) -> np.ndarray:
    """Polyphase windowed-sinc resampling (Kaiser window)."""
    if orig_sr == target_sr:
        return np.asarray(x, dtype=np.float64)
    g = gcd(int(orig_sr), int(target_sr))
    up, down = target_sr // g, orig_sr // g
    return resample_poly(np.asarray(x, dtype=np.float64), up, down, window=("kaiser", 5.0))


def read_wav(path: str, target_sr: Optional[int] = SAMPLE_RATE):
    """Load a mono float64 waveform in [-1, 1].

    16-bit PCM and 32-bit float files are supported; for multi-channel
    input only channel 0 is kept. Returns ``(samples, sample_rate)``.
    """
    try:
        sr, data = wavfile.read(path)
    except (ValueError, OSError) as e:
        raise DataError(f"cannot read wav {path}: {e}") from e
    if data.ndim > 1:
        data = data[:, 0]
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise DataError(f"unsupported wav sample type {data.dtype} in {path}")
    if not np.all(np.isfinite(x)):
        raise DataError(f"non-finite samples in {path}")
    if target_sr is not None and sr != target_sr:
        x = resample(x, sr, target_sr)
        sr = target_sr
    return x, sr


def write_wav(path: str, x: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write 16-bit PCM; samples outside [-1, 1] are clipped."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype(np.int16)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    wavfile.write(path, sample_rate, pcm)


@dataclass
class ManifestRecord:
    audio_path: str
    duration_seconds: float
    kind: str
    transcript: Optional[str] = None
    speaker_id: Optional[str] = None

    def __post_init__(self):
        if self.kind not in MANIFEST_KINDS:
            raise DataError(f"manifest kind must be one of {MANIFEST_KINDS}, got {self.kind!r}")


def read_manifest(path: str, kind: Optional[str] = None) -> List[ManifestRecord]:
    records = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                rec = ManifestRecord(**raw)
            except (json.JSONDecodeError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: bad manifest record ({e})") from e
            if not os.path.isabs(rec.audio_path):
                rec.audio_path = os.path.join(base, rec.audio_path)
            if kind is None or rec.kind == kind:
                records.append(rec)
    return records


def write_manifest(path: str, records: Iterable) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        for rec in records:
            row = asdict(rec) if isinstance(rec, ManifestRecord) else rec
            f.write(json.dumps(row, sort_keys=True) + "\n")
