import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_convolve
from speechprior.audio import ManifestRecord, read_wav, write_wav, write_manifest, read_manifest
from speechprior.errors import ConfigError, DataError
from speechprior.simulate import (
    MixtureSource,
    MixtureSpec,
    Rir,
    apply_rir,
    export_test_set,
    mix_at_snr,
    noise_scale,
    power,
    sample_mixture,
    truncate_rir,
)


def test_apply_rir_identity():
    x = np.random.default_rng(0).standard_normal(1000)
    assert np.array_equal(apply_rir(x, Rir(np.array([1.0]))), x)


def test_apply_rir_pure_delay():
    x = np.random.default_rng(1).standard_normal(50)
    y = apply_rir(x, Rir(np.array([0.0, 0.0, 0.0, 1.0])))
    assert np.array_equal(y[:3], np.zeros(3))
    assert np.array_equal(y[3:], x[:-3])


@pytest.mark.parametrize("seed", range(5))
def test_apply_rir_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    x, h = rng.standard_normal(64), rng.standard_normal(16)
    assert np.array_equal(apply_rir(x, Rir(h)), brute_convolve(x, h))


def test_apply_rir_long_rir_uses_fft_path():
    rng = np.random.default_rng(3)
    x, h = rng.standard_normal(3000), rng.standard_normal(1000)
    np.testing.assert_allclose(apply_rir(x, Rir(h)), np.convolve(x, h)[:3000], atol=1e-10)


def test_apply_rir_errors():
    with pytest.raises(DataError):
        apply_rir(np.ones(4), Rir(np.array([1.0]), sample_rate=8000))
    with pytest.raises(DataError):
        Rir(np.array([]))
    with pytest.raises(DataError):
        Rir(np.zeros(5))


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1, 1)))
def test_apply_rir_delta_is_exact_identity(x):
    assert np.array_equal(apply_rir(x, Rir(np.array([1.0]))), x)


def test_truncate_short_rir_unchanged():
    r = Rir(np.r_[1.0, 0.5 * np.ones(100)])
    assert np.array_equal(truncate_rir(r).taps, r.taps)


def test_truncate_drops_late_tap():
    taps = np.zeros(2000)
    taps[0] = 1.0
    taps[960] = 0.3  # 60 ms
    out = truncate_rir(Rir(taps)).taps
    assert out[0] == 1.0 and out[960] == 0.0


def test_truncate_exponential_decay():
    rng = np.random.default_rng(0)
    n = 8000
    taps = np.zeros(n)
    taps[100] = 1.0
    taps[101:] = np.clip(0.3 * rng.standard_normal(n - 101), -0.9, 0.9) * np.exp(-np.arange(n - 101) / 2000)
    out = truncate_rir(Rir(taps), 50.0).taps
    # index arithmetic: 16000 Hz * 0.05 s = 800 taps after the direct path at 100
    last_kept = 100 + 800
    assert np.all(out[last_kept + 1:] == 0.0)
    assert np.array_equal(out[: last_kept + 1], taps[: last_kept + 1])


@given(arrays(np.float64, st.integers(1, 3000), elements=st.floats(-1, 1)))
@settings(max_examples=50)
def test_truncate_idempotent(taps):
    if not np.any(taps != 0):
        taps = np.r_[taps, 1.0]
    once = truncate_rir(Rir(taps))
    assert np.array_equal(truncate_rir(once).taps, once.taps)


def test_mix_equal_power_unit_scale():
    rng = np.random.default_rng(0)
    c = rng.standard_normal(1000)
    n = rng.permutation(c)
    assert noise_scale(c, n, 0.0) == pytest.approx(1.0, abs=1e-12)


def snr_of_scaled(clean, noise, alpha):
    return 10 * np.log10(power(clean) / power(alpha * noise))


def test_mix_known_powers():
    c = np.ones(100)
    n = np.full(100, 0.1)  # power 0.01
    alpha = noise_scale(c, n, 10.0)
    assert alpha == pytest.approx(np.sqrt(10.0), rel=1e-12)
    assert abs(snr_of_scaled(c, n, alpha) - 10.0) < 1e-9
    np.testing.assert_allclose(mix_at_snr(c, n, 10.0), c + alpha * n)


def test_mix_high_snr():
    c = np.ones(10)
    alpha = noise_scale(c, -c, 60.0)
    assert alpha == pytest.approx(1e-3, rel=1e-12)
    assert abs(snr_of_scaled(c, -c, alpha) - 60.0) < 1e-9


def test_mix_zero_power_rejected():
    with pytest.raises(DataError):
        mix_at_snr(np.zeros(10), np.ones(10), 0.0)
    with pytest.raises(DataError):
        mix_at_snr(np.ones(10), np.zeros(10), 0.0)


def test_mix_tiles_short_noise():
    c = np.ones(10)
    n = np.array([1.0, -1.0, 2.0])
    out = mix_at_snr(c, n, 0.0)
    tiled = np.array([1.0, -1.0, 2.0] * 4)[:10]
    np.testing.assert_allclose(out, c + noise_scale(c, tiled, 0.0) * tiled)


@given(st.floats(-20, 40), st.integers(0, 2**31 - 1))
def test_mix_power_identity(snr, seed):
    rng = np.random.default_rng(seed)
    c, n = rng.standard_normal(200), rng.standard_normal(200)
    assert abs(snr_of_scaled(c, n, noise_scale(c, n, snr)) - snr) < 1e-6


def test_spec_defaults_and_validation():
    s = MixtureSpec()
    assert (s.snr_low, s.snr_high, s.rir_probability, s.crop_seconds, s.early_reflection_ms) == (
        -5.0, 15.0, 0.5, 4.0, 50.0)
    assert s.crop_samples == 64000
    with pytest.raises(ConfigError):
        MixtureSpec(snr_low=10, snr_high=0)


@pytest.fixture
def signals():
    rng = np.random.default_rng(42)
    return 0.1 * rng.standard_normal(20000), 0.1 * rng.standard_normal(7000)


def test_sample_mixture_no_rir_branch(signals):
    clean, noise = signals
    spec = MixtureSpec(rir_probability=0.0, crop_seconds=0.5)
    rir = Rir(np.r_[1.0, 0.5, 0.25])
    s = sample_mixture(clean, noise, rir, spec, np.random.default_rng(0))
    start = s.meta["crop_start"]
    assert not s.meta["rir_applied"]
    assert np.array_equal(s.target, clean[start:start + 8000])
    assert len(s.noisy) == len(s.target) == 8000


def test_sample_mixture_identity_rir(signals):
    clean, noise = signals
    spec = MixtureSpec(rir_probability=1.0, crop_seconds=0.5)
    s = sample_mixture(clean, noise, Rir(np.array([1.0])), spec, np.random.default_rng(5))
    start, off = s.meta["crop_start"], s.meta["noise_offset"]
    assert s.meta["rir_applied"]
    assert np.array_equal(s.target, clean[start:start + 8000])
    tiled = noise[(off + np.arange(clean.size)) % noise.size]
    expected = mix_at_snr(clean, tiled, s.meta["snr_db"])[start:start + 8000]
    assert np.array_equal(s.noisy, expected)


def test_sample_mixture_reverb_target_uses_truncated_rir(signals):
    clean, noise = signals
    taps = np.zeros(2000)
    taps[0], taps[1500] = 1.0, 0.8
    spec = MixtureSpec(rir_probability=1.0, crop_seconds=1.0)
    s = sample_mixture(clean, noise, Rir(taps), spec, np.random.default_rng(1))
    start = s.meta["crop_start"]
    # the 1500-tap echo lies beyond 800 taps, so the target is dry
    np.testing.assert_allclose(s.target, clean[start:start + 16000], atol=1e-12)


def test_sample_mixture_deterministic(signals):
    clean, noise = signals
    spec = MixtureSpec(crop_seconds=0.5)
    rir = Rir(np.r_[1.0, np.zeros(10), 0.3])
    a = sample_mixture(clean, noise, rir, spec, np.random.default_rng(1234))
    b = sample_mixture(clean, noise, rir, spec, np.random.default_rng(1234))
    assert np.array_equal(a.noisy, b.noisy) and np.array_equal(a.target, b.target)
    assert a.meta == b.meta


def test_sample_mixture_pads_short_clean():
    spec = MixtureSpec(crop_seconds=1.0)
    s = sample_mixture(0.1 * np.ones(4000), np.ones(100), None, spec, np.random.default_rng(0))
    assert len(s.noisy) == len(s.target) == 16000
    assert np.all(s.target[4000:] == 0.0)


def test_wav_roundtrip_and_channel0(tmp_path):
    from scipy.io import wavfile
    x = np.linspace(-0.5, 0.5, 1600)
    write_wav(str(tmp_path / "a.wav"), x)
    y, sr = read_wav(str(tmp_path / "a.wav"))
    assert sr == 16000
    np.testing.assert_allclose(y, x, atol=1 / 32767)
    stereo = np.stack([x, -x], axis=1).astype(np.float32)
    wavfile.write(str(tmp_path / "s.wav"), 16000, stereo)
    y, _ = read_wav(str(tmp_path / "s.wav"))
    np.testing.assert_allclose(y, x, atol=1e-7)


def test_wav_resampled_on_ingest(tmp_path):
    from scipy.io import wavfile
    t = np.arange(8000) / 8000
    wavfile.write(str(tmp_path / "l.wav"), 8000, (0.5 * np.sin(2 * np.pi * 440 * t)).astype(np.float32))
    y, sr = read_wav(str(tmp_path / "l.wav"))
    assert sr == 16000 and len(y) == 16000


def _write_corpus(tmp_path, rng):
    recs = []
    for i in range(3):
        p = tmp_path / f"c{i}.wav"
        write_wav(str(p), 0.3 * rng.standard_normal(12000).clip(-3, 3) / 3)
        recs.append(ManifestRecord(str(p), 0.75, "clean", transcript="hello world"))
    p = tmp_path / "n.wav"
    write_wav(str(p), 0.2 * rng.uniform(-1, 1, 5000))
    recs.append(ManifestRecord(str(p), 5000 / 16000, "noise"))
    taps = np.zeros(1200)
    taps[5], taps[900] = 0.9, 0.2
    p = tmp_path / "r.wav"
    write_wav(str(p), taps)
    recs.append(ManifestRecord(str(p), 1200 / 16000, "rir"))
    write_manifest(str(tmp_path / "all.jsonl"), recs)
    return str(tmp_path / "all.jsonl")


def test_export_test_set_reproducible(tmp_path):
    import hashlib
    man = _write_corpus(tmp_path, np.random.default_rng(0))
    spec = MixtureSpec(crop_seconds=0.5)

    def run(out):
        src = MixtureSource(read_manifest(man, "clean"), read_manifest(man, "noise"),
                            read_manifest(man, "rir"), spec, seed=3)
        export_test_set(src, 3, str(out))
        return {f.name: hashlib.sha256(f.read_bytes()).hexdigest() for f in sorted(out.iterdir())}

    a, b = run(tmp_path / "o1"), run(tmp_path / "o2")
    assert a == b
    assert "utt00000_noisy.wav" in a and "metadata.jsonl" in a
