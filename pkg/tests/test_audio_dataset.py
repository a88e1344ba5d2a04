import math
import struct

import numpy as np
import pytest

from mcmamba.audio import AudioBuffer, WavError, read_wav, write_wav
from mcmamba.dataset import (
    DEFAULT_DELAYS,
    ManifestRecord,
    SimSpec,
    draw_snr,
    fractional_delay,
    harmonic_vowel,
    make_noise,
    read_manifest,
    simulate_multichannel,
    toy_corpus,
    write_manifest,
)


def test_float32_roundtrip_bit_exact(tmp_path, rng):
    x = rng.standard_normal((6, 1000)).astype(np.float32)
    write_wav(tmp_path / "a.wav", AudioBuffer(x, 16000))
    buf = read_wav(tmp_path / "a.wav")
    assert buf.n_channels == 6 and buf.sample_rate == 16000 and len(buf) == 1000
    assert np.array_equal(buf.samples, x)


def test_pcm16_scaling(tmp_path):
    x = np.array([[-1.0, -0.5, 0.0, 0.5, 32767 / 32768]])
    write_wav(tmp_path / "p.wav", AudioBuffer(x), encoding="pcm16")
    y = read_wav(tmp_path / "p.wav").samples
    assert y[0, 0] == -1.0
    assert np.array_equal(y, x)


def test_unsupported_format_names_tag(tmp_path):
    fmt = struct.pack("<HHIIHH", 0x0006, 1, 8000, 8000, 1, 8)  # A-law
    body = b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", 2) + b"\x00\x00"
    (tmp_path / "alaw.wav").write_bytes(b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body)
    with pytest.raises(WavError, match="0x0006"):
        read_wav(tmp_path / "alaw.wav")


def test_malformed_header(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"RIFX0000WAVE")
    with pytest.raises(WavError):
        read_wav(tmp_path / "bad.wav")
    (tmp_path / "nodata.wav").write_bytes(b"RIFF\x04\x00\x00\x00WAVE")
    with pytest.raises(WavError, match="missing"):
        read_wav(tmp_path / "nodata.wav")


def test_extensible_header(tmp_path, rng):
    x = rng.standard_normal((2, 50)).astype(np.float32)
    fmt = struct.pack("<HHIIHH", 0xFFFE, 2, 16000, 16000 * 8, 8, 32)
    fmt += struct.pack("<HHI", 22, 32, 3) + struct.pack("<H", 0x0003) + b"\x00" * 14
    data = x.T.astype("<f4").tobytes()
    body = b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    (tmp_path / "ext.wav").write_bytes(b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body)
    assert np.array_equal(read_wav(tmp_path / "ext.wav").samples, x)


def test_audio_buffer_validation():
    with pytest.raises(ValueError):
        AudioBuffer(np.zeros((2, 3)), sample_rate=0)


def test_simspec_validation():
    with pytest.raises(ValueError):
        SimSpec(snr_db=(5.0, -5.0))
    with pytest.raises(ValueError):
        SimSpec(n_channels=2, delays=(0.0, -1.0))
    with pytest.raises(ValueError):
        SimSpec(n_channels=3)


def test_integer_delay_is_exact_shift(rng):
    x = rng.standard_normal(100)
    y = fractional_delay(x, 3.0)
    assert np.array_equal(y[3:], x[:-3]) and not y[:3].any()


def test_fractional_delay_of_band_limited_tone():
    n = np.arange(2000)
    x = np.sin(2 * np.pi * 0.01 * n)
    y = fractional_delay(x, 2.5)
    ref = np.sin(2 * np.pi * 0.01 * (n - 2.5))
    assert np.abs(y[100:-100] - ref[100:-100]).max() < 1e-3


def test_noise_free_mixture(rng):
    clean = harmonic_vowel(4000, 16000, rng)
    noise = make_noise("white", 6, 4000, rng)
    noisy, target, snr = simulate_multichannel(clean, noise, SimSpec(snr_db=(math.inf, math.inf)))
    assert snr == math.inf
    assert np.array_equal(noisy.samples[4], target)
    assert np.array_equal(noisy.samples[0], fractional_delay(clean, DEFAULT_DELAYS[0]))


@pytest.mark.parametrize("seed", range(5))
def test_achieved_snr_matches_draw(seed):
    rng = np.random.default_rng(seed)
    clean = harmonic_vowel(8000, 16000, rng)
    spec = SimSpec(seed=seed)
    noisy, target, snr = simulate_multichannel(clean, make_noise("babble", 6, 8000, rng), spec)
    assert snr == draw_snr(spec) and -5 <= snr <= 10
    resid = noisy.samples[4] - target
    achieved = 10 * np.log10(np.mean(target**2) / np.mean(resid**2))
    assert abs(achieved - snr) < 0.01


def test_delay_recovered_by_cross_correlation(rng):
    clean = rng.standard_normal(4000)
    spec = SimSpec(delays=(2.0, 7.0, 4.0, 1.0, 0.0, 5.0), snr_db=(math.inf, math.inf))
    noisy, target, _ = simulate_multichannel(clean, np.zeros((6, 4000)), spec)
    for m, d in enumerate(spec.delays):
        xc = np.correlate(noisy.samples[m], target, mode="full")
        assert xc.argmax() - (len(target) - 1) == int(d)


def test_length_and_channel_mismatch(rng):
    with pytest.raises(ValueError):
        simulate_multichannel(np.zeros(10), np.zeros((6, 11)), SimSpec())
    with pytest.raises(ValueError):
        simulate_multichannel(np.zeros(10), np.zeros((5, 10)), SimSpec())


def test_noise_from_file(tmp_path, rng):
    write_wav(tmp_path / "n.wav", AudioBuffer(rng.standard_normal((6, 3000)).astype(np.float32)))
    assert make_noise(str(tmp_path / "n.wav"), 6, 1000, rng).shape == (6, 1000)
    with pytest.raises(ValueError):
        make_noise(str(tmp_path / "n.wav"), 4, 1000, rng)


def test_corpus_is_deterministic():
    a, b = toy_corpus(3, seed=7, duration_s=0.1), toy_corpus(3, seed=7, duration_s=0.1)
    for u, v in zip(a, b):
        assert np.array_equal(u.noisy.samples, v.noisy.samples) and u.snr_db == v.snr_db
    assert not np.array_equal(a[0].noisy.samples, a[1].noisy.samples)


def test_manifest_roundtrip(tmp_path):
    recs = [ManifestRecord("c.wav", "white", 3, -2.123456789), ManifestRecord("d.wav", "n.wav", 4, 10.0)]
    write_manifest(tmp_path / "m.tsv", recs)
    assert read_manifest(tmp_path / "m.tsv") == recs
    (tmp_path / "bad.tsv").write_text("a\tb\n")
    with pytest.raises(ValueError, match="bad.tsv:1"):
        read_manifest(tmp_path / "bad.tsv")
