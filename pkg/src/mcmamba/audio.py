"""RIFF/WAVE reading and writing for PCM16 and IEEE float32, any channel count."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["AudioBuffer", "WavError", "read_wav", "write_wav"]

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray  # [M, n]
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.atleast_2d(self.samples)
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be [channels, n], got {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    def __len__(self) -> int:
        return self.samples.shape[1]


def read_wav(path: str | Path) -> AudioBuffer:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid, size = raw[pos : pos + 4], struct.unpack("<I", raw[pos + 4 : pos + 8])[0]
        body = raw[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise WavError(f"{path}: fmt chunk too short ({size} bytes)")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == WAVE_FORMAT_EXTENSIBLE:
                if size < 40:
                    raise WavError(f"{path}: truncated WAVE_FORMAT_EXTENSIBLE header")
                sub = struct.unpack("<H", body[24:26])[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavError(f"{path}: missing {'fmt' if fmt is None else 'data'} chunk")
    tag, channels, rate, _, align, bits = fmt
    if channels < 1:
        raise WavError(f"{path}: channel count {channels}")
    if tag == WAVE_FORMAT_PCM and bits == 16:
        values = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        values = np.frombuffer(data[: len(data) // 4 * 4], dtype="<f4").astype(np.float32)
    else:
        raise WavError(f"{path}: unsupported format tag 0x{tag:04x} with {bits} bits per sample")
    n = values.size // channels
    return AudioBuffer(values[: n * channels].reshape(n, channels).T.copy(), rate)


def write_wav(path: str | Path, audio: AudioBuffer, encoding: str = "float32") -> None:
    """Write ``audio`` as ``"float32"`` (lossless for float32 data) or ``"pcm16"``."""
    x = np.atleast_2d(audio.samples)
    channels = x.shape[0]
    if encoding == "float32":
        tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
        payload = x.T.astype("<f4").tobytes()
    elif encoding == "pcm16":
        tag, bits = WAVE_FORMAT_PCM, 16
        q = np.clip(np.round(x * 32768.0), -32768, 32767)
        payload = q.T.astype("<i2").tobytes()
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, audio.sample_rate, audio.sample_rate * align, align, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    chunks += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        chunks += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)
