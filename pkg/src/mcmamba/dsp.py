"""Radix-2 FFT, STFT analysis and weighted overlap-add synthesis.

Frames start at sample 0 (no centring). The analysis and synthesis window is
a periodic Hann, which sums to exactly one at 50% overlap.
"""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

__all__ = [
    "StftConfig",
    "ComplexSpectrogram",
    "fft",
    "ifft",
    "rfft",
    "irfft",
    "naive_dft",
    "hann_periodic",
    "stft",
    "istft",
    "StreamingStft",
    "StreamingIstft",
]


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 512
    hop: int = 256
    sample_rate: int = 16000

    def __post_init__(self):
        n = self.window_len
        if n < 2 or n & (n - 1):
            raise ValueError(f"window_len must be a power of two, got {n}")
        if self.hop < 1 or n % self.hop:
            raise ValueError(f"hop {self.hop} must divide window_len {n}")

    @property
    def n_bins(self) -> int:
        return self.window_len // 2 + 1


@dataclass
class ComplexSpectrogram:
    """STFT coefficients as separate real/imaginary planes ``[M, T, F]``."""

    re: np.ndarray
    im: np.ndarray
    sample_rate: int = 16000
    hop: int = 256
    window_len: int = 512

    def __post_init__(self):
        if self.re.shape != self.im.shape or self.re.ndim != 3:
            raise ValueError(f"re/im planes must share an [M, T, F] shape: {self.re.shape}, {self.im.shape}")
        if not (np.isfinite(self.re).all() and np.isfinite(self.im).all()):
            raise ValueError("spectrogram contains non-finite values")

    @classmethod
    def from_complex(cls, z: np.ndarray, cfg: StftConfig | None = None) -> ComplexSpectrogram:
        cfg = cfg or StftConfig()
        return cls(
            np.ascontiguousarray(z.real),
            np.ascontiguousarray(z.imag),
            cfg.sample_rate,
            cfg.hop,
            cfg.window_len,
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.re.shape

    def complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.re * self.re + self.im * self.im)

    def config(self) -> StftConfig:
        return StftConfig(self.window_len, self.hop, self.sample_rate)


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT over the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"fft length must be a power of two, got {n}")
    out = x[..., _bit_reverse(n)].copy()
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(out.shape[:-1] + (n // size, size))
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * tw
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        size *= 2
    return out / n if inverse else out


def ifft(X: np.ndarray) -> np.ndarray:
    return fft(X, inverse=True)


def rfft(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    return fft(x)[..., : n // 2 + 1]


def irfft(X: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`rfft`; negative bins come from conjugate symmetry."""
    if X.shape[-1] != n // 2 + 1:
        raise ValueError(f"expected {n // 2 + 1} bins for length {n}, got {X.shape[-1]}")
    full = np.concatenate([X, np.conj(X[..., -2:0:-1])], axis=-1)
    return ifft(full).real


def naive_dft(x: np.ndarray) -> np.ndarray:
    """O(n^2) DFT over the last axis, used as a reference."""
    n = x.shape[-1]
    k = np.arange(n)
    return np.asarray(x, dtype=np.complex128) @ np.exp(-2j * np.pi * np.outer(k, k) / n)


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _frames(audio: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n_frames = (audio.shape[-1] - cfg.window_len) // cfg.hop + 1
    idx = np.arange(cfg.window_len)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    return audio[..., idx]


def stft(audio: np.ndarray, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    """``audio: [M, samples]`` (or 1-D) to an ``[M, T, n_bins]`` spectrogram."""
    cfg = cfg or StftConfig()
    audio = np.atleast_2d(np.asarray(audio, dtype=np.float64))
    if audio.shape[-1] < cfg.window_len:
        raise ValueError(
            f"audio has {audio.shape[-1]} samples, shorter than one window ({cfg.window_len})"
        )
    spec = rfft(_frames(audio, cfg) * hann_periodic(cfg.window_len))
    return ComplexSpectrogram.from_complex(spec, cfg)


def _ola_norm(n_frames: int, cfg: StftConfig) -> np.ndarray:
    w2 = hann_periodic(cfg.window_len) ** 2
    norm = np.zeros((n_frames - 1) * cfg.hop + cfg.window_len)
    for t in range(n_frames):
        norm[t * cfg.hop : t * cfg.hop + cfg.window_len] += w2
    return norm


# Floor for the window-energy normalizer. Near the first and last samples the
# summed squared window approaches zero; dividing by it would amplify any
# inconsistency in a model-generated spectrogram without bound.
OLA_FLOOR = 1e-2


def _safe_divide(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return num / np.maximum(den, OLA_FLOOR)


def istft(spec: ComplexSpectrogram, cfg: StftConfig | None = None) -> np.ndarray:
    """Weighted overlap-add inverse; returns ``[samples]`` for one channel,
    ``[M, samples]`` otherwise."""
    cfg = cfg or spec.config()
    M, n_frames, F = spec.shape
    if F != cfg.n_bins:
        raise ValueError(f"spectrogram has {F} bins, config expects {cfg.n_bins}")
    w = hann_periodic(cfg.window_len)
    frames = irfft(spec.complex(), cfg.window_len) * w
    out = np.zeros((M, (n_frames - 1) * cfg.hop + cfg.window_len))
    for t in range(n_frames):
        out[:, t * cfg.hop : t * cfg.hop + cfg.window_len] += frames[:, t]
    out = _safe_divide(out, _ola_norm(n_frames, cfg))
    return out[0] if M == 1 else out


class StreamingStft:
    """Emit one STFT frame per ``hop`` new samples (single stream)."""

    def __init__(self, n_channels: int, cfg: StftConfig | None = None):
        self.cfg = cfg or StftConfig()
        self._buf = np.zeros((n_channels, 0))
        self._window = hann_periodic(self.cfg.window_len)

    def push(self, samples: np.ndarray) -> Iterator[np.ndarray]:
        """Yield complex frames ``[M, n_bins]`` that became complete."""
        self._buf = np.concatenate([self._buf, np.atleast_2d(samples)], axis=-1)
        n, hop = self.cfg.window_len, self.cfg.hop
        while self._buf.shape[-1] >= n:
            yield rfft(self._buf[:, :n] * self._window)
            self._buf = self._buf[:, hop:]


class StreamingIstft:
    """Overlap-add synthesis releasing ``hop`` finished samples per frame.

    Accumulation happens in the same order as :func:`istft`, so the
    concatenated output matches it bit for bit.
    """

    def __init__(self, cfg: StftConfig | None = None):
        self.cfg = cfg or StftConfig()
        n = self.cfg.window_len
        self._w = hann_periodic(n)
        self._w2 = self._w**2
        self._acc = np.zeros(n)
        self._norm = np.zeros(n)

    def push(self, frame: np.ndarray) -> np.ndarray:
        """Add one complex frame ``[n_bins]``; return the next ``hop`` samples."""
        n, hop = self.cfg.window_len, self.cfg.hop
        self._acc += irfft(frame, n) * self._w
        self._norm += self._w2
        done = _safe_divide(self._acc[:hop], self._norm[:hop])
        self._acc = np.concatenate([self._acc[hop:], np.zeros(hop)])
        self._norm = np.concatenate([self._norm[hop:], np.zeros(hop)])
        return done

    def flush(self) -> np.ndarray:
        """Remaining ``window_len - hop`` samples after the last frame."""
        n, hop = self.cfg.window_len, self.cfg.hop
        return _safe_divide(self._acc[: n - hop], self._norm[: n - hop])
