"""Log-mel spectrogram features and the LMEL feature file format."""
from __future__ import annotations

import struct
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio_io import AudioClip

FFT_SIZE = 1024
HOP = 256
N_MELS = 80
F_LO = 40.0
F_HI = 7600.0
LOG_FLOOR = 1e-10

LMEL_MAGIC = b"LMEL"
LMEL_VERSION = 1
UNLABELED = 0xFFFFFFFF


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def frame_signal(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    """Uncentred frames, shape (n_frames, frame); trailing partial frame is dropped."""
    return sliding_window_view(x, frame)[::hop]


def stft_magnitude(clip: AudioClip, fft_size: int = FFT_SIZE, hop: int = HOP) -> np.ndarray:
    """|STFT| with a periodic Hann window and no padding, shape (fft_size//2 + 1, n_frames)."""
    x = np.asarray(clip.samples, dtype=np.float64)
    if len(x) < fft_size:
        raise ValueError(f"clip of {len(x)} samples is shorter than fft_size={fft_size}")
    window = np.hanning(fft_size + 1)[:-1]
    frames = frame_signal(x, fft_size, hop) * window
    return np.abs(np.fft.rfft(frames, axis=1)).T


@lru_cache(maxsize=8)
def _filterbank(n_mels, f_lo, f_hi, fft_size, fs):
    if not (0 <= f_lo < f_hi <= fs / 2):
        raise ValueError(f"invalid mel range {f_lo}..{f_hi} Hz for fs={fs}")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mels + 2))
    freqs = np.arange(fft_size // 2 + 1) * fs / fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (freqs - lower) / (center - lower)
    fall = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rise, fall))
    peaks = fb.max(axis=1, keepdims=True)
    if np.any(peaks == 0):
        raise ValueError("mel filter with empty support; use fewer mels or a larger FFT")
    fb = fb / peaks
    fb.setflags(write=False)
    return fb


def mel_filterbank(
    n_mels: int = N_MELS,
    f_lo: float = F_LO,
    f_hi: float = F_HI,
    fft_size: int = FFT_SIZE,
    fs: int = 16000,
) -> np.ndarray:
    """Triangular HTK-mel filters, one per row, each peaking at exactly 1.

    The returned array is cached and read-only.
    """
    return _filterbank(int(n_mels), float(f_lo), float(f_hi), int(fft_size), int(fs))


def mel_centers(n_mels: int = N_MELS, f_lo: float = F_LO, f_hi: float = F_HI) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mels + 2))[1:-1]


def log_mel(clip: AudioClip) -> np.ndarray:
    """80 x n_frames natural-log mel energies of a 16 kHz clip (80 x 247 for 4 s)."""
    spec = stft_magnitude(clip)
    fb = mel_filterbank(fs=clip.sample_rate)
    return np.log(np.maximum(fb @ spec, LOG_FLOOR)).astype(np.float32)


def write_features(path, values: np.ndarray, label: int | None = None) -> None:
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    tag = UNLABELED if label is None else int(label)
    header = LMEL_MAGIC + struct.pack("<IIII", LMEL_VERSION, values.shape[0], values.shape[1], tag)
    Path(path).write_bytes(header + np.ascontiguousarray(values).tobytes())


def read_features(path) -> tuple[np.ndarray, int | None]:
    data = Path(path).read_bytes()
    if data[:4] != LMEL_MAGIC:
        raise ValueError(f"{path}: not an LMEL feature file")
    version, n_mels, n_frames, tag = struct.unpack_from("<IIII", data, 4)
    if version != LMEL_VERSION:
        raise ValueError(f"{path}: unsupported LMEL version {version}")
    count = n_mels * n_frames
    if len(data) != 20 + 4 * count:
        raise ValueError(f"{path}: expected {count} values, file size is {len(data)} bytes")
    values = np.frombuffer(data, dtype="<f4", offset=20).reshape(n_mels, n_frames)
    return values.astype(np.float32), (None if tag == UNLABELED else tag)
