"""On-the-fly noisy/reverberant mixture simulation.

Every function is pure: randomness enters only through an explicit
``numpy.random.Generator``, so a mixture is a function of its inputs and seed.
"""

import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.signal import fftconvolve

from . import SAMPLE_RATE
from .audio import ManifestRecord, read_wav, write_manifest, write_wav
from .errors import ConfigError, DataError

# rirs up to this many taps use exact tap-by-tap accumulation
DIRECT_CONV_MAX_TAPS = 512


@dataclass(frozen=True)
class Rir:
    taps: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 1 or taps.size == 0:
            raise DataError("rir must be a non-empty 1-D sequence")
        if not np.any(taps != 0):
            raise DataError("rir has no nonzero tap")
        object.__setattr__(self, "taps", taps)

    @property
    def direct_index(self) -> int:
        return int(np.argmax(np.abs(self.taps)))


@dataclass
class MixtureSpec:
    snr_low: float = -5.0
    snr_high: float = 15.0
    rir_probability: float = 0.5
    crop_seconds: float = 4.0
    early_reflection_ms: float = 50.0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.snr_low > self.snr_high:
            raise ConfigError(f"snr_low ({self.snr_low}) > snr_high ({self.snr_high})")
        if not 0.0 <= self.rir_probability <= 1.0:
            raise ConfigError(f"rir_probability must lie in [0, 1], got {self.rir_probability}")
        if self.crop_seconds <= 0:
            raise ConfigError("crop_seconds must be positive")

    @property
    def crop_samples(self) -> int:
        return int(round(self.crop_seconds * self.sample_rate))


@dataclass
class MixtureSample:
    noisy: np.ndarray
    target: np.ndarray
    meta: dict = field(default_factory=dict)


def apply_rir(clean: np.ndarray, rir: Rir, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Linear convolution with ``rir`` truncated to ``len(clean)``.

    Tap 0 of the rir maps input sample i to output sample i, so a delayed
    direct path delays the output.
    """
    if rir.sample_rate != sample_rate:
        raise DataError(f"rir sample rate {rir.sample_rate} != signal sample rate {sample_rate}")
    x = np.asarray(clean, dtype=np.float64)
    n = x.size
    h = rir.taps
    if h.size > DIRECT_CONV_MAX_TAPS:
        return fftconvolve(x, h)[:n]
    y = np.zeros(n)
    for k in range(min(h.size, n)):
        y[k:] += h[k] * x[: n - k]
    return y


def truncate_rir(rir: Rir, early_reflection_ms: float = 50.0) -> Rir:
    """Zero every tap more than ``early_reflection_ms`` after the direct path."""
    cut = rir.direct_index + int(round(early_reflection_ms / 1000.0 * rir.sample_rate))
    if cut + 1 >= rir.taps.size:
        return rir
    taps = rir.taps.copy()
    taps[cut + 1:] = 0.0
    return Rir(taps, rir.sample_rate)


def fit_noise(noise: np.ndarray, length: int, offset: int = 0) -> np.ndarray:
    """Crop or wrap-around tile ``noise`` to ``length`` samples starting at ``offset``."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.size == 0:
        raise DataError("empty noise clip")
    idx = (offset + np.arange(length)) % noise.size
    return noise[idx]


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def noise_scale(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    p_clean, p_noise = power(clean), power(noise)
    if p_clean == 0.0 or p_noise == 0.0:
        raise DataError("zero-power clean or noise signal")
    return float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    clean = np.asarray(clean, dtype=np.float64)
    if len(noise) != clean.size:
        noise = fit_noise(noise, clean.size)
    return clean + noise_scale(clean, noise, snr_db) * np.asarray(noise, dtype=np.float64)


def sample_mixture(clean, noise, rir: Optional[Rir], spec: MixtureSpec,
                   rng: np.random.Generator, seed=None) -> MixtureSample:
    """Draw one (noisy, target) training pair.

    Random draws happen in a fixed order (rir coin, snr, noise offset, crop
    offset) so that the output is reproducible from the generator state.
    """
    clean = np.asarray(clean, dtype=np.float64)
    crop = spec.crop_samples
    if clean.size < crop:
        clean = np.pad(clean, (0, crop - clean.size))

    apply = rir is not None and rng.random() < spec.rir_probability
    snr_db = float(rng.uniform(spec.snr_low, spec.snr_high))
    noise_offset = int(rng.integers(0, max(len(noise), 1)))
    crop_start = int(rng.integers(0, clean.size - crop + 1))

    if apply:
        reverberant = apply_rir(clean, rir, spec.sample_rate)
        target = apply_rir(clean, truncate_rir(rir, spec.early_reflection_ms), spec.sample_rate)
    else:
        reverberant = target = clean

    noise = fit_noise(noise, clean.size, noise_offset)
    noisy = mix_at_snr(reverberant, noise, snr_db)
    window = slice(crop_start, crop_start + crop)
    meta = {
        "snr_db": snr_db,
        "rir_applied": bool(apply),
        "seed": seed,
        "noise_offset": noise_offset,
        "crop_start": crop_start,
    }
    return MixtureSample(noisy[window].copy(), np.array(target[window]), meta)


def mixture_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, sample index); order of generation does not matter."""
    return np.random.default_rng([int(seed), int(index)])


class MixtureSource:
    """Draws mixtures from clean/noise/rir manifests.

    Sample ``i`` depends only on ``(seed, i)``. Loaded audio is cached.
    """

    def __init__(self, clean: Sequence[ManifestRecord], noise: Sequence[ManifestRecord],
                 rirs: Sequence[ManifestRecord] = (), spec: Optional[MixtureSpec] = None,
                 seed: int = 0):
        if not clean or not noise:
            raise DataError("need at least one clean and one noise record")
        self.clean, self.noise, self.rirs = list(clean), list(noise), list(rirs)
        self.spec = spec or MixtureSpec()
        self.seed = seed
        self._cache = {}

    def _load(self, path):
        if path not in self._cache:
            self._cache[path] = read_wav(path, self.spec.sample_rate)[0]
        return self._cache[path]

    def __getitem__(self, index: int):
        rng = mixture_rng(self.seed, index)
        c = self.clean[int(rng.integers(len(self.clean)))]
        n = self.noise[int(rng.integers(len(self.noise)))]
        r = self.rirs[int(rng.integers(len(self.rirs)))] if self.rirs else None
        rir = Rir(self._load(r.audio_path), self.spec.sample_rate) if r is not None else None
        sample = sample_mixture(self._load(c.audio_path), self._load(n.audio_path), rir,
                                self.spec, rng, seed=[self.seed, index])
        sample.meta.update(clean_path=c.audio_path, noise_path=n.audio_path,
                           rir_path=r.audio_path if r is not None else None,
                           transcript=c.transcript, speaker_id=c.speaker_id)
        return sample


def export_test_set(source: MixtureSource, n_samples: int, out_dir: str,
                    prefix: str = "utt") -> str:
    """Write ``{id}_noisy.wav``/``{id}_clean.wav`` pairs plus ``metadata.jsonl``.

    Pairs whose noisy peak exceeds 1 are attenuated jointly; the applied gain
    is recorded so the files can be regenerated exactly.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(n_samples):
        s = source[i]
        uid = f"{prefix}{i:05d}"
        peak = max(np.max(np.abs(s.noisy)), np.max(np.abs(s.target)))
        gain = 0.99 / peak if peak > 0.99 else 1.0
        write_wav(os.path.join(out_dir, f"{uid}_noisy.wav"), s.noisy * gain)
        write_wav(os.path.join(out_dir, f"{uid}_clean.wav"), s.target * gain)
        rows.append({"id": uid, "gain": gain, "spec": asdict(source.spec), **s.meta})
    path = os.path.join(out_dir, "metadata.jsonl")
    write_manifest(path, rows)
    return path
