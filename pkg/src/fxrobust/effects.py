"""Native audio effects used for augmentation.

Every effect kind has two parameterizations: variant ``A`` is applied to the
training split and variant ``B`` to validation/test, so that models never see
the exact processing they are evaluated on.
"""
from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import SAMPLE_RATE
from .audio_io import AudioClip, fix_length, load_wav, save_wav
from .features import frame_signal
from .manifest import DatasetManifest

log = logging.getLogger(__name__)

KINDS = (
    "bitcrush_distortion",
    "saturation",
    "reverb",
    "echo",
    "flanger",
    "chorus",
    "pitch_shift",
)
VARIANTS = ("A", "B")


class EffectConfigError(ValueError):
    pass


def _require(cond, msg):
    if not cond:
        raise EffectConfigError(msg)


@dataclass(frozen=True)
class EchoParams:
    delay_ms: float
    feedback: float
    wet: float = 0.7
    dry: float = 1.0

    def validate(self):
        _require(self.delay_ms > 50, f"echo delay must exceed 50 ms, got {self.delay_ms}")
        _require(0 <= self.feedback < 1, f"echo feedback must lie in [0, 1), got {self.feedback}")


@dataclass(frozen=True)
class FlangerParams:
    base_delay_ms: float
    depth_ms: float
    lfo_hz: float
    feedback: float = 0.0
    wet: float = 0.7
    dry: float = 1.0

    def validate(self):
        _require(self.base_delay_ms > 0 and self.depth_ms >= 0 and self.lfo_hz >= 0,
                 "flanger times and rates must be non-negative (base delay positive)")
        _require(self.base_delay_ms - self.depth_ms >= 0, "flanger depth exceeds base delay")
        _require(self.base_delay_ms + self.depth_ms < 15, "flanger maximum delay must stay under 15 ms")
        _require(0 <= self.feedback < 1, f"flanger feedback must lie in [0, 1), got {self.feedback}")


@dataclass(frozen=True)
class ChorusParams:
    base_delays_ms: tuple[float, ...]
    depth_ms: float
    lfo_hz: float
    wet: float = 0.7
    dry: float = 1.0

    @property
    def voices(self) -> int:
        return len(self.base_delays_ms)

    def lfo_phase(self, voice: int) -> float:
        return 2.0 * math.pi * voice / self.voices

    def validate(self):
        _require(self.voices >= 1, "chorus needs at least one voice")
        _require(all(d - self.depth_ms > 0 for d in self.base_delays_ms), "chorus depth exceeds a base delay")
        _require(all(20 <= d <= 40 for d in self.base_delays_ms), "chorus base delays must be near 30 ms")
        _require(self.lfo_hz >= 0, "chorus LFO rate must be non-negative")


@dataclass(frozen=True)
class ReverbParams:
    rt60_s: float
    comb_delays_ms: tuple[float, ...] = (29.7, 37.1, 41.1, 43.7)
    allpass_delays_ms: tuple[float, ...] = (5.0, 1.7)
    allpass_gain: float = 0.7
    wet: float = 0.35
    dry: float = 1.0

    def comb_gains(self, fs: int = SAMPLE_RATE) -> np.ndarray:
        delays = np.array([_ms_to_samples(d, fs) for d in self.comb_delays_ms]) / fs
        return 10.0 ** (-3.0 * delays / self.rt60_s)

    def validate(self):
        _require(self.rt60_s > 0, "rt60 must be positive")
        _require(len(self.comb_delays_ms) == 4 and len(self.allpass_delays_ms) == 2,
                 "reverb uses four combs and two allpasses")
        _require(all(d > 0 for d in self.comb_delays_ms + self.allpass_delays_ms), "delays must be positive")
        g = self.comb_gains()
        _require(bool(np.all((g > 0) & (g < 1))), "comb feedback gains must lie in (0, 1)")
        _require(0 <= self.allpass_gain < 1, "allpass gain must lie in [0, 1)")


@dataclass(frozen=True)
class BitcrushParams:
    bit_depth: int = 8
    rate_divisor: int = 4

    def validate(self):
        _require(1 <= self.bit_depth <= 16, f"bit depth must be 1..16, got {self.bit_depth}")
        _require(self.rate_divisor >= 1, f"rate divisor must be >= 1, got {self.rate_divisor}")


@dataclass(frozen=True)
class OverdriveCompParams:
    drive: float = 5.0
    clip_threshold: float = 0.4
    makeup: float = 1.5
    # compressor acting on the clipped signal; threshold is relative to clip_threshold
    comp_threshold: float = 0.5
    comp_ratio: float = 4.0
    comp_window_ms: float = 10.0

    def validate(self):
        _require(self.drive >= 1, "overdrive drive must be >= 1")
        _require(0 < self.clip_threshold <= 1, "clip threshold must lie in (0, 1]")
        _require(0 < self.comp_threshold <= 1 and self.comp_ratio >= 1 and self.comp_window_ms > 0,
                 "invalid compressor settings")


@dataclass(frozen=True)
class TanhSaturationParams:
    k: float = 2.0

    def validate(self):
        _require(self.k > 0, "saturation drive k must be positive")


@dataclass(frozen=True)
class CubicSaturationParams:
    drive: float = 1.5
    makeup: float = 1.0

    def validate(self):
        _require(self.drive > 0, "saturation drive must be positive")


@dataclass(frozen=True)
class PitchShiftParams:
    n_steps: int | None = None  # None: drawn uniformly from 1..5 using the config seed
    bins_per_octave: int = 72
    fft_size: int = 2048
    hop: int = 512

    def validate(self):
        _require(self.bins_per_octave == 72, "pitch shift uses 72 bins per octave")
        _require(self.n_steps is None or 1 <= self.n_steps <= 5, "n_steps must be 1..5")
        _require(self.hop > 0 and self.fft_size >= 2 * self.hop, "invalid phase vocoder geometry")


PARAM_TYPES = {
    "echo": (EchoParams,),
    "flanger": (FlangerParams,),
    "chorus": (ChorusParams,),
    "reverb": (ReverbParams,),
    "saturation": (TanhSaturationParams, CubicSaturationParams),
    "bitcrush_distortion": (BitcrushParams, OverdriveCompParams),
    "pitch_shift": (PitchShiftParams,),
}

DEFAULTS = {
    ("echo", "A"): EchoParams(181.7, 0.5, wet=0.7, dry=1.0),
    ("echo", "B"): EchoParams(250.0, 0.4, wet=0.7, dry=1.0),
    ("flanger", "A"): FlangerParams(3.0, 2.0, 0.5, feedback=0.3),
    ("flanger", "B"): FlangerParams(5.0, 3.0, 0.25, feedback=0.2),
    ("chorus", "A"): ChorusParams((25.0, 30.0, 35.0), depth_ms=2.0, lfo_hz=0.3),
    ("chorus", "B"): ChorusParams((30.0,), depth_ms=3.0, lfo_hz=0.5),
    # wet levels put the reverberant energy on par with the dry signal for white noise
    ("reverb", "A"): ReverbParams(rt60_s=2.0, wet=0.2),
    ("reverb", "B"): ReverbParams(rt60_s=0.5, wet=0.35),
    ("saturation", "A"): TanhSaturationParams(k=2.0),
    ("saturation", "B"): CubicSaturationParams(drive=1.5),
    ("bitcrush_distortion", "A"): BitcrushParams(bit_depth=8, rate_divisor=4),
    ("bitcrush_distortion", "B"): OverdriveCompParams(drive=5.0, clip_threshold=0.4, makeup=1.5),
    ("pitch_shift", "A"): PitchShiftParams(),
    # same algorithm on a finer analysis grid, so the held-out splits see a different implementation
    ("pitch_shift", "B"): PitchShiftParams(fft_size=1024, hop=256),
}


@dataclass(frozen=True)
class EffectConfig:
    kind: str
    variant: str
    params: object
    seed: int = 0

    def validate(self):
        _require(self.kind in KINDS, f"unknown effect kind {self.kind!r}")
        _require(self.variant in VARIANTS, f"unknown variant {self.variant!r}")
        _require(isinstance(self.params, PARAM_TYPES[self.kind]),
                 f"{type(self.params).__name__} is not a parameter set for {self.kind}")
        self.params.validate()


def default_config(kind: str, variant: str = "A", seed: int = 0) -> EffectConfig:
    if (kind, variant) not in DEFAULTS:
        raise EffectConfigError(f"no defaults for {kind!r} variant {variant!r}")
    return EffectConfig(kind, variant, DEFAULTS[(kind, variant)], seed)


def parameter_reference() -> dict:
    """Every default parameter set, keyed ``kind/variant``; used for the docs and run logs."""
    out = {}
    for (kind, variant), p in DEFAULTS.items():
        out[f"{kind}/{variant}"] = {"type": type(p).__name__, **asdict(p)}
    return out


def derive_seed(seed: int, example_id: str) -> int:
    digest = hashlib.blake2b(f"{int(seed)}:{example_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# -- delay-line primitives ---------------------------------------------------

def _ms_to_samples(ms: float, fs: int) -> int:
    return int(round(ms * fs / 1000.0))


def _shift(x: np.ndarray, d: int) -> np.ndarray:
    out = np.zeros_like(x)
    if d < len(x):
        out[d:] = x[: len(x) - d]
    return out


def _feedback_comb(v: np.ndarray, delay: int, g: float) -> np.ndarray:
    """y[n] = v[n] + g * y[n - delay], evaluated one delay-length block at a time."""
    y = np.array(v, dtype=np.float64)
    for start in range(delay, len(y), delay):
        end = min(start + delay, len(y))
        y[start:end] += g * y[start - delay : end - delay]
    return y


def _interp_read(buf: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Linear-interpolated read of ``buf`` at fractional ``pos``; zero before index 0."""
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    padded = np.concatenate(([0.0], buf))
    a = padded[np.clip(i0 + 1, 0, len(buf))] * (i0 >= 0)
    b = padded[np.clip(i0 + 2, 0, len(buf))] * (i0 + 1 >= 0)
    return (1.0 - frac) * a + frac * b


def _lfo_delay(n: int, fs: int, base_ms: float, depth_ms: float, rate_hz: float, phase: float) -> np.ndarray:
    t = np.arange(n) / fs
    return (base_ms + depth_ms * np.sin(2.0 * np.pi * rate_hz * t + phase)) * fs / 1000.0


def _modulated_delay(x: np.ndarray, tau: np.ndarray, feedback: float) -> np.ndarray:
    """Delay-line output d[n] = s(n - tau[n]) with s = x + feedback * d."""
    n = np.arange(len(x), dtype=np.float64)
    if feedback == 0.0:
        return _interp_read(x, n - tau)
    # the recursion needs the read point strictly behind the block being written
    tau = np.maximum(tau, 2.0)
    block = max(1, int(math.ceil(tau.min())) - 1)
    s = np.zeros(len(x))
    d = np.zeros(len(x))
    for start in range(0, len(x), block):
        end = min(start + block, len(x))
        d[start:end] = _interp_read(s[:start], n[start:end] - tau[start:end])
        s[start:end] = x[start:end] + feedback * d[start:end]
    return d


# -- processors --------------------------------------------------------------

def echo(x, fs, p: EchoParams, seed=0):
    d = _ms_to_samples(p.delay_ms, fs)
    wet = _feedback_comb(_shift(x, d), d, p.feedback)
    return p.dry * x + p.wet * wet


def flanger(x, fs, p: FlangerParams, seed=0):
    tau = _lfo_delay(len(x), fs, p.base_delay_ms, p.depth_ms, p.lfo_hz, 0.0)
    return p.dry * x + p.wet * _modulated_delay(x, tau, p.feedback)


def chorus(x, fs, p: ChorusParams, seed=0):
    acc = np.zeros(len(x))
    for v, base in enumerate(p.base_delays_ms):
        tau = _lfo_delay(len(x), fs, base, p.depth_ms, p.lfo_hz, p.lfo_phase(v))
        acc += _modulated_delay(x, tau, 0.0)
    return p.dry * x + (p.wet / p.voices) * acc


DC_BLOCK_POLE = 0.995  # about 13 Hz at 16 kHz


def reverb(x, fs, p: ReverbParams, seed=0):
    # the combs have large gain at DC; keep offsets and steps out of the tail
    v = lfilter([1.0, -1.0], [1.0, -DC_BLOCK_POLE], x)
    y = np.zeros(len(x))
    for ms, g in zip(p.comb_delays_ms, p.comb_gains(fs)):
        d = _ms_to_samples(ms, fs)
        y += _feedback_comb(_shift(v, d), d, g)
    g = p.allpass_gain
    for ms in p.allpass_delays_ms:
        d = _ms_to_samples(ms, fs)
        y = _feedback_comb(-g * y + _shift(y, d), d, g)
    return p.dry * x + p.wet * y


def saturate(x, fs, p: TanhSaturationParams, seed=0):
    return np.tanh(p.k * x) / np.tanh(p.k)


def saturate_cubic(x, fs, p: CubicSaturationParams, seed=0):
    u = np.clip(p.drive * x, -1.0, 1.0)
    return p.makeup * np.clip(1.5 * u - 0.5 * u**3, -1.0, 1.0)


def bitcrush(x, fs, p: BitcrushParams, seed=0):
    held = np.repeat(x[:: p.rate_divisor], p.rate_divisor)[: len(x)]
    # a 1-bit depth would give zero levels; it shares the 2-bit grid instead
    levels = max(2 ** (p.bit_depth - 1) - 1, 1)
    return np.round(held * levels) / levels


def overdrive_comp(x, fs, p: OverdriveCompParams, seed=0):
    t = p.clip_threshold
    driven = t * np.tanh(p.drive * x / t)
    alpha = 1.0 - math.exp(-1.0 / (p.comp_window_ms * fs / 1000.0))
    env = np.sqrt(lfilter([alpha], [1.0, alpha - 1.0], driven**2))
    knee = p.comp_threshold * t
    over = np.maximum(env / knee, 1.0)
    gain = over ** (1.0 / p.comp_ratio - 1.0)
    return p.makeup * gain * driven


def _pv_stft(x, n_fft, hop):
    pad = n_fft // 2
    total = len(x) + 2 * pad
    extra = (-(total - n_fft)) % hop
    xp = np.pad(x, (pad, pad + extra))
    win = np.hanning(n_fft + 1)[:-1]
    return np.fft.rfft(frame_signal(xp, n_fft, hop) * win, axis=1).T


def _pv_istft(spec, n_fft, hop, length):
    win = np.hanning(n_fft + 1)[:-1]
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * win
    n_frames = frames.shape[0]
    out = np.zeros(n_fft + hop * (n_frames - 1))
    norm = np.zeros_like(out)
    for i in range(n_frames):
        out[i * hop : i * hop + n_fft] += frames[i]
        norm[i * hop : i * hop + n_fft] += win**2
    nz = norm > 1e-8
    out[nz] /= norm[nz]
    pad = n_fft // 2
    out = out[pad : pad + length]
    return np.pad(out, (0, length - len(out)))


def phase_vocoder(spec: np.ndarray, rate: float, hop: int, n_fft: int) -> np.ndarray:
    """Time-scale a complex STFT by ``1 / rate`` with standard phase accumulation."""
    n_bins, n_frames = spec.shape
    steps = np.arange(0.0, n_frames, rate)
    padded = np.concatenate([spec, np.zeros((n_bins, 2), dtype=spec.dtype)], axis=1)
    idx = steps.astype(np.int64)
    alpha = steps - idx
    c0, c1 = padded[:, idx], padded[:, idx + 1]
    mag = (1.0 - alpha) * np.abs(c0) + alpha * np.abs(c1)

    advance = 2.0 * np.pi * hop * np.arange(n_bins) / n_fft
    dphase = np.angle(c1) - np.angle(c0) - advance[:, None]
    dphase -= 2.0 * np.pi * np.round(dphase / (2.0 * np.pi))
    increments = advance[:, None] + dphase
    phase = np.angle(spec[:, :1]) + np.concatenate(
        [np.zeros((n_bins, 1)), np.cumsum(increments[:, :-1], axis=1)], axis=1
    )
    return mag * np.exp(1j * phase)


def draw_pitch_steps(seed: int) -> int:
    return int(np.random.default_rng(seed).integers(1, 6))


def pitch_shift(x, fs, p: PitchShiftParams, seed=0):
    steps = p.n_steps if p.n_steps is not None else draw_pitch_steps(seed)
    ratio = 2.0 ** (steps / p.bins_per_octave)
    spec = _pv_stft(x, p.fft_size, p.hop)
    stretched_len = int(round(len(x) * ratio))
    stretched = _pv_istft(phase_vocoder(spec, 1.0 / ratio, p.hop, p.fft_size), p.fft_size, p.hop, stretched_len)
    # play the stretched signal back ``ratio`` times faster
    return np.interp(np.arange(len(x)) * ratio, np.arange(stretched_len), stretched, right=0.0)


PROCESSORS = {
    EchoParams: echo,
    FlangerParams: flanger,
    ChorusParams: chorus,
    ReverbParams: reverb,
    TanhSaturationParams: saturate,
    CubicSaturationParams: saturate_cubic,
    BitcrushParams: bitcrush,
    OverdriveCompParams: overdrive_comp,
    PitchShiftParams: pitch_shift,
}


def apply_effect(clip: AudioClip, cfg: EffectConfig) -> AudioClip:
    """Process ``clip`` with ``cfg`` and trim/pad the result to 4 s."""
    cfg.validate()
    if clip.sample_rate != SAMPLE_RATE:
        raise EffectConfigError(f"effects expect {SAMPLE_RATE} Hz audio, got {clip.sample_rate}")
    x = np.asarray(clip.samples, dtype=np.float64)
    y = PROCESSORS[type(cfg.params)](x, clip.sample_rate, cfg.params, cfg.seed)
    return fix_length(AudioClip(y.astype(np.float32), clip.sample_rate))


# -- dataset-level driver ----------------------------------------------------

@dataclass
class AugmentResult:
    manifest: DatasetManifest
    errors: list[tuple[str, str]] = field(default_factory=list)


def _augment_one(job):
    row, kind, variant, seed, out_path = job
    try:
        cfg = default_config(kind, variant, derive_seed(seed, row.example_id))
        save_wav(apply_effect(load_wav(row.path), cfg), out_path)
    except Exception as exc:  # collected and reported by the caller
        return row.example_id, f"{type(exc).__name__}: {exc}"
    return row.example_id, None


def augment_dataset(
    manifest: DatasetManifest,
    kind: str,
    split: str,
    out_dir,
    seed: int = 0,
    variant: str | None = None,
    jobs: int = 1,
) -> AugmentResult:
    """Write one processed WAV per ``split`` row of ``manifest`` under ``out_dir``.

    Variant A is used for the training split and B otherwise unless ``variant``
    is given. Failing files are reported in ``errors`` and left out of the
    returned manifest.
    """
    if kind not in KINDS:
        raise EffectConfigError(f"unknown effect kind {kind!r}")
    variant = variant or ("A" if split == "train" else "B")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = manifest.split(split)
    jobs_list = [(r, kind, variant, seed, out_dir / f"{r.example_id}.wav") for r in rows]
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_augment_one, jobs_list, chunksize=8))
    else:
        results = [_augment_one(j) for j in jobs_list]

    out = DatasetManifest()
    errors = []
    for (row, *_, path), (eid, err) in zip(jobs_list, results):
        if err is None:
            out.append(replace(row, path=str(path), effect=kind))
        else:
            log.warning("augment %s failed for %s: %s", kind, eid, err)
            errors.append((eid, err))
    return AugmentResult(out, errors)
