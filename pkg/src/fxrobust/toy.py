"""Synthetic 11-class stand-in for NSynth, small enough for desk-scale runs.

One synthesis recipe per class; each example draws its own fundamental,
peak amplitude (0.3-0.9) and decay time (1-3 s). Fundamentals stay inside
80-1000 Hz, but each class plays in its own 1.5-octave register (as bass and
flute do), and classes with look-alike spectra get registers far apart.

====  ==============  =====================================================
class recipe          spectrum
====  ==============  =====================================================
0     sine            fundamental only
1     square          odd harmonics, 1/k
2     noise burst     white noise, short decay, no pitch
3     fm              carrier f0, modulator 3.5 f0, index 2 (inharmonic)
4     pluck           sawtooth whose upper harmonics die out quickly
5     sawtooth        all harmonics, 1/k
6     organ           octave partials 1, 2, 4, 8
7     breathy         sine plus band-passed noise around 2 f0
8     bell            partials at 1, 2.76, 5.40, 8.93 f0
9     pulse           25% duty pulse, bright 1/sqrt(k) rolloff
10    vowel           harmonics under two formants at 700 and 1200 Hz
====  ==============  =====================================================

On top of its recipe every class carries a faint band of noise (25-35 dB
below the tone) centred on a class-specific frequency, log-spaced from
250 Hz to 6 kHz, much like the body resonance of a physical instrument.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from . import CLIP_SECONDS, N_CLASSES, SAMPLE_RATE
from .audio_io import AudioClip, save_wav
from .manifest import DatasetManifest, Row

RECIPES = ("sine", "square", "noise_burst", "fm", "pluck", "sawtooth", "organ", "breathy", "bell", "pulse", "vowel")
# register slot (0 = lowest) per class
REGISTERS = (5, 0, 6, 9, 4, 8, 3, 1, 7, 2, 10)
REGISTER_OCTAVES = 1.5
F0_LO, F0_HI = 80.0, 1000.0


@dataclass(frozen=True)
class ToySpec:
    per_class_train: int = 20
    per_class_valid: int = 5
    per_class_test: int = 5
    seed: int = 0
    sample_rate: int = SAMPLE_RATE
    duration: float = CLIP_SECONDS
    classes: int = N_CLASSES

    def __post_init__(self):
        if self.classes != N_CLASSES:
            raise ValueError(f"the toy set always has {N_CLASSES} classes")


def _harmonics(t, f0, amps, fs, decays=None):
    y = np.zeros_like(t)
    for k, a in enumerate(amps, start=1):
        if a == 0 or k * f0 >= fs / 2:
            continue
        part = a * np.sin(2 * np.pi * k * f0 * t)
        if decays is not None:
            part *= np.exp(-t * decays[k - 1])
        y += part
    return y


def synthesize(label: int, f0: float, rng: np.random.Generator, fs: int = SAMPLE_RATE, duration: float = CLIP_SECONDS):
    """Raw (un-normalized, un-enveloped) waveform of one toy example."""
    t = np.arange(int(round(fs * duration))) / fs
    n_harm = max(1, int((fs / 2) // f0))
    k = np.arange(1, n_harm + 1)
    recipe = RECIPES[label]
    if recipe == "sine":
        return np.sin(2 * np.pi * f0 * t)
    if recipe == "square":
        return _harmonics(t, f0, np.where(k % 2 == 1, 1.0 / k, 0.0), fs)
    if recipe == "noise_burst":
        return rng.standard_normal(len(t)) * np.exp(-t * 6)
    if recipe == "fm":
        return np.sin(2 * np.pi * f0 * t + 2.0 * np.sin(2 * np.pi * 3.5 * f0 * t))
    if recipe == "pluck":
        return _harmonics(t, f0, 1.0 / k, fs, decays=1.0 + 3.0 * k)
    if recipe == "sawtooth":
        return _harmonics(t, f0, 1.0 / k, fs)
    if recipe == "organ":
        return sum(a * np.sin(2 * np.pi * m * f0 * t) for m, a in ((1, 1.0), (2, 0.7), (4, 0.5), (8, 0.35)) if m * f0 < fs / 2)
    if recipe == "breathy":
        lo, hi = 1.5 * f0, min(2.5 * f0, 0.45 * fs)
        noise = sosfilt(butter(2, [lo, hi], btype="band", fs=fs, output="sos"), rng.standard_normal(len(t)))
        return np.sin(2 * np.pi * f0 * t) + 2.0 * noise
    if recipe == "bell":
        ratios = (1.0, 2.76, 5.40, 8.93)
        return sum(np.sin(2 * np.pi * r * f0 * t) / (i + 1) for i, r in enumerate(ratios) if r * f0 < fs / 2)
    if recipe == "pulse":
        return _harmonics(t, f0, np.abs(np.sin(np.pi * k * 0.25)) / np.sqrt(k), fs)
    if recipe == "vowel":
        fk = k * f0
        env = np.exp(-0.5 * ((fk - 700) / 120) ** 2) + 0.7 * np.exp(-0.5 * ((fk - 1200) / 150) ** 2)
        return _harmonics(t, f0, env + 0.02 / k, fs)
    raise ValueError(f"unknown toy class {label}")


def resonance_center(label: int) -> float:
    return 250.0 * (6000.0 / 250.0) ** (label / (N_CLASSES - 1))


def _resonance(label, n, rng, fs):
    fc = resonance_center(label)
    sos = butter(2, [fc / 2 ** (1 / 3), min(fc * 2 ** (1 / 3), 0.45 * fs)], btype="band", fs=fs, output="sos")
    noise = sosfilt(sos, rng.standard_normal(n))
    return noise / np.sqrt(np.mean(noise**2))


def register(label: int) -> tuple[float, float]:
    span = np.log2(F0_HI / F0_LO) - REGISTER_OCTAVES
    lo = np.log2(F0_LO) + span * REGISTERS[label] / (N_CLASSES - 1)
    return 2.0**lo, 2.0 ** (lo + REGISTER_OCTAVES)


def make_example(label: int, rng: np.random.Generator, fs: int = SAMPLE_RATE, duration: float = CLIP_SECONDS) -> AudioClip:
    lo, hi = register(label)
    f0 = float(2.0 ** rng.uniform(np.log2(lo), np.log2(hi)))
    amp = rng.uniform(0.3, 0.9)
    decay = rng.uniform(1.0, 3.0)  # seconds to fall by 1/e
    level_db = rng.uniform(25.0, 35.0)
    y = synthesize(label, f0, rng, fs, duration)
    y = y / np.sqrt(np.mean(y**2)) + 10 ** (-level_db / 20) * _resonance(label, len(y), rng, fs)
    t = np.arange(len(y)) / fs
    env = np.minimum(t / 0.01, 1.0) * np.exp(-t / decay)
    y = y * env
    y *= amp / max(np.abs(y).max(), 1e-12)
    return AudioClip(y.astype(np.float32), fs)


def toygen(spec: ToySpec, out_dir) -> DatasetManifest:
    """Synthesize the toy set as WAV files plus ``manifest.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    manifest = DatasetManifest()
    counts = {"train": spec.per_class_train, "valid": spec.per_class_valid, "test": spec.per_class_test}
    for split, count in counts.items():
        for label in range(spec.classes):
            for i in range(count):
                eid = f"toy-{split}-{RECIPES[label]}-{i:04d}"
                path = out_dir / "audio" / f"{eid}.wav"
                save_wav(make_example(label, rng, spec.sample_rate, spec.duration), path)
                manifest.append(Row(eid, str(path), label, split))
    manifest.save(out_dir / "manifest.csv")
    return manifest
