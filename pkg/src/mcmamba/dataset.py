"""Desk-scale multichannel mixture simulation.

Speech is emulated by harmonic "vowels" (3 to 8 harmonics under syllable
envelopes). Each microphone receives the clean signal with its own
fractional delay and no reverberation; noise is scaled so the reference
channel reaches an SNR drawn uniformly from the configured range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, read_wav

__all__ = [
    "DEFAULT_DELAYS",
    "SimSpec",
    "Utterance",
    "ManifestRecord",
    "fractional_delay",
    "harmonic_vowel",
    "make_noise",
    "draw_snr",
    "simulate_multichannel",
    "toy_corpus",
    "read_manifest",
    "write_manifest",
]

# Source roughly broadside to a six-microphone tablet at 16 kHz; microphone 5
# (index 4) is the reference.
DEFAULT_DELAYS = (2.0, 3.25, 4.5, 1.0, 0.0, 5.75)


@dataclass
class SimSpec:
    n_channels: int = 6
    delays: tuple[float, ...] = DEFAULT_DELAYS
    snr_db: tuple[float, float] = (-5.0, 10.0)
    noise: str = "white"  # "white", "babble", or a path to an M-channel WAV
    seed: int = 0
    reference_channel: int = 4

    def __post_init__(self):
        if len(self.delays) != self.n_channels:
            raise ValueError(f"{len(self.delays)} delays for {self.n_channels} channels")
        if any(d < 0 for d in self.delays):
            raise ValueError(f"delays must be non-negative: {self.delays}")
        if self.snr_db[0] > self.snr_db[1]:
            raise ValueError(f"snr range low > high: {self.snr_db}")
        if not 0 <= self.reference_channel < self.n_channels:
            raise ValueError(f"reference channel {self.reference_channel} out of range")


def fractional_delay(x: np.ndarray, delay: float, half_width: int = 32) -> np.ndarray:
    """Delay ``x`` by ``delay`` samples, keeping its length.

    Integer delays are exact shifts; the fractional remainder uses a
    Hann-windowed sinc interpolator with ``2 * half_width + 1`` taps.
    """
    whole = int(math.floor(delay))
    frac = delay - whole
    y = np.zeros_like(x, dtype=np.float64)
    if whole < len(x):
        y[whole:] = x[: len(x) - whole]
    if frac == 0.0:
        return y
    k = np.arange(-half_width, half_width + 1)
    taps = np.sinc(k - frac) * (0.5 + 0.5 * np.cos(np.pi * (k - frac) / (half_width + 1)))
    full = np.convolve(y, taps)
    return full[half_width : half_width + len(x)]


def harmonic_vowel(n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(100.0, 220.0) * (1 + rng.uniform(-0.1, 0.1) * t / max(t[-1], 1e-9))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int(rng.integers(3, 9))
    formant = rng.uniform(300.0, 1500.0)
    x = np.zeros(n)
    for h in range(1, n_harm + 1):
        amp = math.exp(-((h * f0.mean() - formant) / 800.0) ** 2) + 0.2 / h
        x += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    env = np.zeros(n)
    n_syl = int(rng.integers(1, 4))
    edges = np.sort(rng.uniform(0, n, 2 * n_syl).astype(int))
    for a, b in zip(edges[::2], edges[1::2]):
        if b - a > 16:
            env[a:b] = np.maximum(env[a:b], np.sin(np.pi * np.arange(b - a) / (b - a)) ** 2)
    if not env.any():
        env = np.sin(np.pi * np.arange(n) / n) ** 2
    x *= env
    return 0.5 * x / max(np.abs(x).max(), 1e-12)


def make_noise(
    kind: str, n_channels: int, n: int, rng: np.random.Generator, sample_rate: int = 16000
) -> np.ndarray:
    if kind == "white":
        common = rng.standard_normal(n)
        return 0.7 * rng.standard_normal((n_channels, n)) + 0.7 * common
    if kind == "babble":
        out = 0.05 * rng.standard_normal((n_channels, n))
        for _ in range(4):
            talker = harmonic_vowel(n, sample_rate, rng)
            lags = rng.uniform(0, 6, n_channels)
            for m in range(n_channels):
                out[m] += fractional_delay(talker, lags[m])
        return out
    buf = read_wav(kind)
    if buf.n_channels != n_channels:
        raise ValueError(f"noise file {kind} has {buf.n_channels} channels, need {n_channels}")
    if len(buf) < n:
        raise ValueError(f"noise file {kind} has {len(buf)} samples, need {n}")
    start = int(rng.integers(0, len(buf) - n + 1))
    return np.asarray(buf.samples[:, start : start + n], dtype=np.float64)


def draw_snr(spec: SimSpec) -> float:
    lo, hi = spec.snr_db
    return float(np.random.default_rng(spec.seed).uniform(lo, hi)) if hi > lo else float(lo)


def simulate_multichannel(
    clean: np.ndarray, noise: np.ndarray, spec: SimSpec, sample_rate: int = 16000
) -> tuple[AudioBuffer, np.ndarray, float]:
    """Mix delayed ``clean`` with ``noise``; returns (noisy, target, snr_db).

    ``target`` is the delayed clean signal at the reference channel. An SNR of
    ``+inf`` gives a noise-free mixture.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[0] != spec.n_channels:
        raise ValueError(f"noise has {noise.shape[0]} channels, spec wants {spec.n_channels}")
    if noise.shape[1] != clean.shape[0]:
        raise ValueError(f"length mismatch: clean {clean.shape[0]}, noise {noise.shape[1]}")
    speech = np.stack([fractional_delay(clean, d) for d in spec.delays])
    r = spec.reference_channel
    target = speech[r].copy()
    snr = draw_snr(spec)
    if math.isinf(snr) and snr > 0:
        return AudioBuffer(speech, sample_rate), target, snr
    p_speech = np.mean(target**2)
    p_noise = np.mean(noise[r] ** 2)
    if p_noise == 0:
        raise ValueError("noise is silent on the reference channel")
    gain = math.sqrt(p_speech / (p_noise * 10 ** (snr / 10)))
    return AudioBuffer(speech + gain * noise, sample_rate), target, snr


@dataclass
class Utterance:
    noisy: AudioBuffer
    target: np.ndarray
    clean: np.ndarray
    snr_db: float
    seed: int = 0


def toy_corpus(
    n_utterances: int,
    seed: int = 0,
    duration_s: float = 0.5,
    spec: SimSpec | None = None,
    sample_rate: int = 16000,
) -> list[Utterance]:
    """Deterministic list of simulated utterances (seed ``seed + i`` each)."""
    spec = spec or SimSpec()
    n = int(round(duration_s * sample_rate))
    out = []
    for i in range(n_utterances):
        s = seed + i
        rng = np.random.default_rng([s, 1])
        clean = harmonic_vowel(n, sample_rate, rng)
        noise = make_noise(spec.noise, spec.n_channels, n, rng, sample_rate)
        utt_spec = SimSpec(
            spec.n_channels, spec.delays, spec.snr_db, spec.noise, s, spec.reference_channel
        )
        noisy, target, snr = simulate_multichannel(clean, noise, utt_spec, sample_rate)
        out.append(Utterance(noisy, target, clean, snr, s))
    return out


@dataclass
class ManifestRecord:
    clean_path: str
    noise_path: str
    seed: int
    snr_db: float


_MANIFEST_HEADER = "# clean_path\tnoise_path\tseed\tsnr_db"


def write_manifest(path: str | Path, records: list[ManifestRecord]) -> None:
    lines = [_MANIFEST_HEADER]
    lines += [f"{r.clean_path}\t{r.noise_path}\t{r.seed}\t{r.snr_db!r}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        out.append(ManifestRecord(parts[0], parts[1], int(parts[2]), float(parts[3])))
    return out
