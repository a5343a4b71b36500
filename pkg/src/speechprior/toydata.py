"""Synthetic speech-like corpora for smoke tests and desk-scale demos."""

import os

import numpy as np

from . import SAMPLE_RATE
from .audio import ManifestRecord, write_manifest, write_wav
from .simulate import MixtureSpec, Rir, sample_mixture


def toy_speech(n_samples: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Voiced harmonic signal with gliding pitch and a syllable-rate envelope."""
    t = np.arange(n_samples) / sr
    f0 = rng.uniform(90, 220) * (1 + 0.15 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    formants = rng.uniform([300, 900, 2200], [800, 1800, 3200])
    x = np.zeros(n_samples)
    for h in range(1, 30):
        fh = h * f0
        gain = sum(np.exp(-((fh - f) / 150.0) ** 2) for f in formants) + 0.05 / h
        x += gain * np.sin(h * phase) * (fh < sr / 2)
    env = np.clip(np.sin(2 * np.pi * rng.uniform(2, 5) * t + rng.uniform(0, np.pi)), 0, None) ** 0.5
    x *= env
    return 0.3 * x / (np.max(np.abs(x)) + 1e-9)


def toy_noise(n_samples: int, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(n_samples)
    alpha = rng.uniform(0.0, 0.95)  # one-pole colouring
    out = np.empty(n_samples)
    acc = 0.0
    for i, w in enumerate(white):
        acc = alpha * acc + w
        out[i] = acc
    return 0.2 * out / (np.max(np.abs(out)) + 1e-9)


def toy_rir(rng: np.random.Generator, sr: int = SAMPLE_RATE, rt60: float = 0.3) -> Rir:
    n = int(rt60 * sr)
    delay = int(rng.integers(0, 40))
    taps = np.zeros(n + delay)
    decay = np.exp(-6.9 * np.arange(n) / n)
    taps[delay:] = 0.3 * rng.standard_normal(n) * decay
    taps[delay] = 1.0
    return Rir(taps, sr)


def toy_mixtures(n: int, seconds: float, seed: int = 0, rir_probability: float = 0.5):
    """``n`` cached ``MixtureSample`` objects at ``seconds`` each."""
    rng = np.random.default_rng(seed)
    spec = MixtureSpec(crop_seconds=seconds, rir_probability=rir_probability)
    length = spec.crop_samples
    out = []
    for i in range(n):
        clean = toy_speech(length, rng)
        noise = toy_noise(length, rng)
        out.append(sample_mixture(clean, noise, toy_rir(rng), spec, rng, seed=[seed, i]))
    return out


def write_toy_corpus(directory: str, n_clean: int = 4, n_noise: int = 2, n_rir: int = 2,
                     seconds: float = 1.0, seed: int = 0) -> str:
    """Write wavs plus a combined manifest (paths relative to it); returns the manifest path."""
    rng = np.random.default_rng(seed)
    os.makedirs(directory, exist_ok=True)
    n = int(seconds * SAMPLE_RATE)
    records = []
    for i in range(n_clean):
        p = os.path.join(directory, f"clean{i}.wav")
        write_wav(p, toy_speech(n, rng))
        records.append(ManifestRecord(os.path.basename(p), seconds, "clean", transcript=f"utterance {i}", speaker_id=f"s{i % 2}"))
    for i in range(n_noise):
        p = os.path.join(directory, f"noise{i}.wav")
        write_wav(p, toy_noise(n, rng))
        records.append(ManifestRecord(os.path.basename(p), seconds, "noise"))
    for i in range(n_rir):
        p = os.path.join(directory, f"rir{i}.wav")
        taps = toy_rir(rng).taps
        write_wav(p, 0.99 * taps / np.max(np.abs(taps)))
        records.append(ManifestRecord(os.path.basename(p), len(taps) / SAMPLE_RATE, "rir"))
    path = os.path.join(directory, "manifest.jsonl")
    write_manifest(path, records)
    return path
