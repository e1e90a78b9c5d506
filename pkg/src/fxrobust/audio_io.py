"""WAV reading/writing and the fixed-length clip contract."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import CLIP_SECONDS

WAVE_FORMAT_PCM = 1
WAVE_FORMAT_IEEE_FLOAT = 3
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class AudioError(Exception):
    """Base class for audio file errors. Always carries the offending path."""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class MissingFileError(AudioError):
    pass


class MalformedHeaderError(AudioError):
    pass


class UnsupportedEncodingError(AudioError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float32))
        if self.samples.ndim != 1:
            raise ValueError("AudioClip samples must be one-dimensional")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _chunks(data: bytes, path):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size and cid != b"data":
            raise MalformedHeaderError(path, f"truncated {cid!r} chunk")
        yield cid, body
        pos += 8 + size + (size & 1)


def load_wav(path) -> AudioClip:
    """Read a PCM16 or float32 WAV file; multi-channel audio is averaged to mono."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise MissingFileError(path, "no such file") from None
    except IsADirectoryError:
        raise MissingFileError(path, "is a directory") from None

    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeaderError(path, "not a RIFF/WAVE file")

    fmt = None
    payload = None
    for cid, body in _chunks(data, path):
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedHeaderError(path, "fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == WAVE_FORMAT_EXTENSIBLE and len(body) >= 26:
                # real format code lives in the first two bytes of the subformat GUID
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            payload = body
            break
    if fmt is None:
        raise MalformedHeaderError(path, "missing fmt chunk")
    if payload is None:
        raise MalformedHeaderError(path, "missing data chunk")

    code, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise MalformedHeaderError(path, f"bad channel count {channels} or rate {rate}")
    if code == WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif code == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedEncodingError(path, f"format code {code} with {bits} bits per sample")

    frame = dtype.itemsize * channels
    n = len(payload) // frame
    if n == 0:
        raise MalformedHeaderError(path, "no audio frames")
    raw = np.frombuffer(payload[: n * frame], dtype=dtype).reshape(n, channels)
    samples = raw.astype(np.float64) * scale
    if channels > 1:
        samples = samples.mean(axis=1)
    else:
        samples = samples[:, 0]
    return AudioClip(samples.astype(np.float32), int(rate))


def save_wav(clip: AudioClip, path) -> None:
    """Write ``clip`` as mono 16-bit PCM, clamping to [-1, 1] first."""
    x = np.asarray(clip.samples, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot save non-finite samples")
    q = np.round(np.clip(x, -1.0, 1.0) * 32768.0)
    pcm = np.clip(q, -32768, 32767).astype("<i2").tobytes()
    rate = int(clip.sample_rate)
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, WAVE_FORMAT_PCM, 1, rate, rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(pcm))
    Path(path).write_bytes(header + pcm)


def fix_length(clip: AudioClip, seconds: float = CLIP_SECONDS) -> AudioClip:
    """Truncate or zero-pad at the tail to exactly ``round(seconds * rate)`` samples."""
    if seconds <= 0:
        raise ValueError("seconds must be positive")
    n = int(round(seconds * clip.sample_rate))
    x = clip.samples
    if len(x) >= n:
        out = x[:n].copy()
    else:
        out = np.zeros(n, dtype=np.float32)
        out[: len(x)] = x
    return AudioClip(out, clip.sample_rate)
