import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import csd, welch
from scipy.stats import chisquare

from fxrobust import effects as fx
from fxrobust.audio_io import AudioClip, load_wav, save_wav
from fxrobust.manifest import DatasetManifest, Row
from oracles import FS, impulse, notch_frequencies, peak_frequency, schroeder_rt60


def run(params, x, seed=0):
    return fx.PROCESSORS[type(params)](np.asarray(x, dtype=np.float64), FS, params, seed)


def noise(seed=0, n=64000):
    return np.random.default_rng(seed).uniform(-1, 1, n)


# -- parameter records --------------------------------------------------------

def test_every_default_validates():
    for (kind, variant), p in fx.DEFAULTS.items():
        fx.default_config(kind, variant).validate()
    assert {k for k, _ in fx.DEFAULTS} == set(fx.KINDS)


def test_parameter_reference_lists_every_default():
    ref = fx.parameter_reference()
    assert set(ref) == {f"{k}/{v}" for k in fx.KINDS for v in fx.VARIANTS}
    assert ref["echo/A"]["delay_ms"] == 181.7 and ref["echo/A"]["feedback"] == 0.5


@pytest.mark.parametrize(
    "params",
    [
        fx.EchoParams(50.0, 0.5),
        fx.EchoParams(100.0, 1.0),
        fx.FlangerParams(10.0, 5.0, 0.5),
        fx.FlangerParams(2.0, 3.0, 0.5),
        fx.FlangerParams(3.0, 1.0, 0.5, feedback=1.0),
        fx.ChorusParams((), 1.0, 0.5),
        fx.ChorusParams((30.0,), 31.0, 0.5),
        fx.ReverbParams(-1.0),
        fx.ReverbParams(1.0, comb_delays_ms=(30.0, 40.0)),
        fx.BitcrushParams(0, 1),
        fx.BitcrushParams(17, 1),
        fx.BitcrushParams(8, 0),
        fx.TanhSaturationParams(0.0),
        fx.PitchShiftParams(n_steps=6),
        fx.PitchShiftParams(n_steps=0),
    ],
)
def test_invalid_parameters_rejected(params):
    kind = next(k for k, types in fx.PARAM_TYPES.items() if isinstance(params, types))
    with pytest.raises(fx.EffectConfigError):
        fx.apply_effect(AudioClip(np.zeros(16), FS), fx.EffectConfig(kind, "A", params))


def test_wrong_param_type_and_rate_rejected():
    with pytest.raises(fx.EffectConfigError):
        fx.EffectConfig("echo", "A", fx.BitcrushParams()).validate()
    with pytest.raises(fx.EffectConfigError):
        fx.apply_effect(AudioClip(np.zeros(16), 44100), fx.default_config("echo"))


def test_reverb_comb_gains():
    g = fx.ReverbParams(0.5).comb_gains()
    d = np.array([round(ms * 16) for ms in (29.7, 37.1, 41.1, 43.7)]) / FS
    assert np.allclose(g, 10 ** (-3 * d / 0.5))
    assert np.all((g > 0) & (g < 1))


def test_pitch_ratio_is_sub_semitone():
    for n in range(1, 6):
        assert 1 < 2 ** (n / 72) < 2 ** (1 / 12)


# -- per-effect behaviour -----------------------------------------------------

def test_echo_taps():
    y = run(fx.EchoParams(181.7, 0.5, wet=1.0, dry=1.0), impulse())
    taps = np.flatnonzero(np.abs(y) > 1e-9)
    assert taps[:4].tolist() == [0, 2907, 5814, 8721]
    assert np.allclose(y[taps[:4]], [1.0, 1.0, 0.5, 0.25], atol=1e-12)


def test_static_flanger_notches():
    h = run(fx.FlangerParams(1.0, 0.0, 0.0, feedback=0.0, wet=1.0, dry=1.0), impulse())
    found, bin_hz = notch_frequencies(h, [500, 1500, 2500])
    assert np.all(np.abs(found - [500, 1500, 2500]) <= bin_hz)


def test_static_flanger_on_white_noise():
    x = noise(3)
    y = run(fx.FlangerParams(1.0, 0.0, 0.0, wet=1.0, dry=1.0), x)
    # H1 transfer estimate; dips at odd multiples of 500 Hz
    freqs, pxy = csd(x, y, fs=FS, nperseg=4096)
    _, pxx = welch(x, fs=FS, nperseg=4096)
    h = np.abs(pxy / pxx)
    for f in (500, 1500, 2500):
        near = np.abs(freqs - f) <= 100
        assert abs(freqs[near][np.argmin(h[near])] - f) <= FS / 4096


def test_flanger_feedback_recursion():
    # constant delay of 4 samples: taps at 4k with amplitude g^(k-1)
    p = fx.FlangerParams(0.25, 0.0, 0.0, feedback=0.5, wet=1.0, dry=0.0)
    y = run(p, impulse(64))
    assert np.allclose(y[[4, 8, 12, 16]], [1, 0.5, 0.25, 0.125])
    assert np.allclose(np.delete(y, [4, 8, 12, 16])[:12], 0)


def test_fractional_delay_is_linear_interpolation():
    # 1.5 ms = 24 samples; add 1/32 ms = half a sample
    p = fx.FlangerParams(1.5 + 1 / 32, 0.0, 0.0, wet=1.0, dry=0.0)
    y = run(p, impulse(64))
    assert np.allclose(y[24:26], [0.5, 0.5]) and np.allclose(np.delete(y, [24, 25]), 0)


def test_chorus_mix():
    p = fx.ChorusParams((25.0, 35.0), depth_ms=0.0, lfo_hz=0.0, wet=0.8, dry=0.5)
    y = run(p, impulse(1000))
    assert y[0] == pytest.approx(0.5)
    assert y[400] == pytest.approx(0.4) and y[560] == pytest.approx(0.4)
    assert p.lfo_phase(1) == pytest.approx(math.pi)


def test_chorus_has_no_feedback():
    y = run(fx.ChorusParams((30.0,), 0.0, 0.0, wet=1.0, dry=0.0), impulse(2000))
    assert np.flatnonzero(y).tolist() == [480]


@pytest.mark.parametrize("rt60", [0.5, 2.0])
def test_reverb_rt60(rt60):
    h = run(fx.ReverbParams(rt60, wet=1.0, dry=0.0), impulse(int(FS * 4 * max(1.0, rt60))))
    assert schroeder_rt60(h) == pytest.approx(rt60, rel=0.2)


def test_reverb_blocks_dc():
    y = run(fx.ReverbParams(2.0, wet=1.0, dry=0.0), np.ones(64000))
    assert abs(y[-1000:]).max() < 1e-3


def test_saturation():
    p = fx.TanhSaturationParams(2.0)
    assert run(p, [1.0, -1.0, 0.0]).tolist() == pytest.approx([1.0, -1.0, 0.0])
    x = np.linspace(-1, 1, 201)
    assert np.all(np.diff(run(p, x)) > 0)
    c = fx.CubicSaturationParams(1.5, makeup=1.0)
    assert run(c, [0.2])[0] == pytest.approx(1.5 * 0.3 - 0.5 * 0.3**3)
    assert run(c, [1.0, -1.0]).tolist() == [1.0, -1.0]


def test_bitcrush_quantizer():
    assert run(fx.BitcrushParams(2, 1), [0.9])[0] == 1.0
    assert run(fx.BitcrushParams(2, 1), [0.4, -0.6]).tolist() == [0.0, -1.0]
    y = run(fx.BitcrushParams(16, 3), np.arange(7) / 10)
    assert np.allclose(y, np.round(np.array([0, 0, 0, 0.3, 0.3, 0.3, 0.6]) * 32767) / 32767)
    # 1 bit shares the 2-bit grid {-1, 0, 1}
    assert set(run(fx.BitcrushParams(1, 1), noise()[:100]).tolist()) <= {-1.0, 0.0, 1.0}


def test_overdrive_comp():
    p = fx.DEFAULTS[("bitcrush_distortion", "B")]
    x = noise(1)
    y = run(p, x)
    assert np.abs(y).max() <= p.makeup * p.clip_threshold + 1e-12
    quiet = run(p, 0.001 * x)
    # small signals sit below the compressor knee: plain gain of makeup * drive
    assert np.allclose(quiet, p.makeup * p.drive * 0.001 * x, rtol=1e-3, atol=1e-9)


def test_pitch_shift_440_by_three_steps():
    t = np.arange(64000) / FS
    y = run(fx.PitchShiftParams(n_steps=3), 0.5 * np.sin(2 * np.pi * 440 * t))
    assert peak_frequency(y[:48000]) == pytest.approx(440 * 2 ** (3 / 72), rel=1e-3)
    assert peak_frequency(y[:48000]) == pytest.approx(453.0, abs=0.5)


@pytest.mark.parametrize("variant", ["A", "B"])
@pytest.mark.parametrize("f0", [100.0, 1000.0, 3000.0])
def test_pitch_ratio_all_steps(variant, f0):
    base = fx.DEFAULTS[("pitch_shift", variant)]
    t = np.arange(64000) / FS
    x = 0.5 * np.sin(2 * np.pi * f0 * t)
    for n in range(1, 6):
        p = fx.PitchShiftParams(n_steps=n, fft_size=base.fft_size, hop=base.hop)
        assert peak_frequency(run(p, x)[:48000]) / f0 == pytest.approx(2 ** (n / 72), rel=5e-3)


def test_pitch_steps_uniform_chi_square():
    draws = [fx.draw_pitch_steps(fx.derive_seed(0, f"note-{i:05d}")) for i in range(1000)]
    counts = np.bincount(draws, minlength=6)
    assert counts[0] == 0 and counts[1:].sum() == 1000
    assert chisquare(counts[1:]).pvalue > 0.01


def test_derive_seed_stable():
    assert fx.derive_seed(0, "a") == fx.derive_seed(0, "a")
    assert fx.derive_seed(0, "a") != fx.derive_seed(1, "a")
    assert fx.derive_seed(0, "a") != fx.derive_seed(0, "b")


# -- cross-cutting properties -------------------------------------------------

@pytest.mark.parametrize("kind", fx.KINDS)
def test_apply_effect_length_and_determinism(kind):
    x = noise(2, 60000).astype(np.float32) * 0.5
    cfg = fx.default_config(kind, "B", seed=11)
    a = fx.apply_effect(AudioClip(x, FS), cfg)
    b = fx.apply_effect(AudioClip(x, FS), cfg)
    assert len(a) == 64000 and a.sample_rate == FS
    assert a.samples.dtype == np.float32
    assert a.samples.tobytes() == b.samples.tobytes()


@pytest.mark.parametrize("kind", fx.KINDS)
def test_variants_differ(kind):
    x = AudioClip(noise(4).astype(np.float32), FS)
    a = fx.apply_effect(x, fx.default_config(kind, "A", seed=5)).samples
    b = fx.apply_effect(x, fx.default_config(kind, "B", seed=5)).samples
    assert np.sqrt(np.mean((a.astype(np.float64) - b) ** 2)) >= 1e-3


def _bounded_inputs():
    t = np.arange(64000) / FS
    yield noise(5)
    yield noise(6) ** 3
    for f in np.geomspace(20, 6000, 25):
        yield np.sin(2 * np.pi * f * t)
    yield np.ones(64000)
    yield impulse()
    rng = np.random.default_rng(9)
    from fxrobust.toy import make_example

    for label in range(11):
        yield make_example(label, rng).samples / 0.9


@pytest.mark.parametrize("kind", fx.KINDS)
def test_headroom_on_bounded_signals(kind):
    for v in fx.VARIANTS:
        cfg = fx.default_config(kind, v, seed=3)
        for x in _bounded_inputs():
            assert np.abs(x).max() <= 1.0 + 1e-9
            y = fx.apply_effect(AudioClip(x.astype(np.float32), FS), cfg).samples
            assert np.all(np.isfinite(y)) and np.abs(y).max() <= 4.0, (kind, v)


def test_echo_headroom_worst_case():
    # sign-constant input realizes the l1 bound dry + wet / (1 - feedback)
    for v in fx.VARIANTS:
        p = fx.DEFAULTS[("echo", v)]
        y = run(p, np.ones(64000))
        assert np.abs(y).max() <= p.dry + p.wet / (1 - p.feedback) + 1e-9 <= 4.0


@pytest.mark.xfail(strict=True, reason="a linear reverb's worst-case gain is the l1 norm of its impulse "
                   "response, which for the plate tail is far above 4; see the decisions ledger")
def test_reverb_headroom_adversarial():
    p = fx.DEFAULTS[("reverb", "A")]
    h = run(p, impulse())
    n = 32000
    # time-reversed sign of the impulse response drives every tap in phase at sample n - 1
    x = np.zeros(64000)
    x[:n] = np.sign(h[:n][::-1])
    assert np.abs(run(p, x)).max() <= 4.0


@settings(max_examples=12, deadline=None)
@given(
    st.sampled_from(["echo", "flanger", "chorus", "reverb"]),
    st.sampled_from(fx.VARIANTS),
    st.floats(-1.0, 1.0),
    st.integers(0, 1000),
)
def test_linearity(kind, variant, a, seed):
    p = fx.DEFAULTS[(kind, variant)]
    x = np.random.default_rng(seed).uniform(-1, 1, 16000)
    assert np.allclose(run(p, a * x), a * run(p, x), atol=1e-5)


BYPASSES = [
    ("echo", fx.EchoParams(181.7, 0.5, wet=0.0, dry=1.0)),
    ("flanger", fx.FlangerParams(3.0, 2.0, 0.5, feedback=0.3, wet=0.0, dry=1.0)),
    ("chorus", fx.ChorusParams((25.0, 30.0, 35.0), 2.0, 0.3, wet=0.0, dry=1.0)),
    ("reverb", fx.ReverbParams(2.0, wet=0.0, dry=1.0)),
    ("saturation", fx.TanhSaturationParams(k=1e-4)),
]


@pytest.mark.parametrize("kind,params", BYPASSES, ids=[b[0] for b in BYPASSES])
def test_bypass(kind, params):
    x = noise(7).astype(np.float32)
    y = fx.apply_effect(AudioClip(x, FS), fx.EffectConfig(kind, "A", params)).samples
    assert np.max(np.abs(y.astype(np.float64) - x)) <= 1e-6


@pytest.mark.xfail(strict=True, reason="the 16-bit quantizer step is 1/32767, so rounding error reaches "
                   "1/65534 (about 1.5e-5) and cannot meet a 1e-6 bypass tolerance")
def test_bitcrush_bypass_16_bit():
    x = noise(7).astype(np.float32)
    cfg = fx.EffectConfig("bitcrush_distortion", "A", fx.BitcrushParams(16, 1))
    y = fx.apply_effect(AudioClip(x, FS), cfg).samples
    assert np.max(np.abs(y.astype(np.float64) - x)) <= 1e-6


def test_bitcrush_16_bit_error_is_half_a_step():
    x = noise(7).astype(np.float32)
    cfg = fx.EffectConfig("bitcrush_distortion", "A", fx.BitcrushParams(16, 1))
    y = fx.apply_effect(AudioClip(x, FS), cfg).samples
    assert np.max(np.abs(y.astype(np.float64) - x)) <= 0.5 / 32767 + 1e-7


# -- dataset driver -----------------------------------------------------------

def _wav_manifest(tmp_path, n=10, split="train"):
    rng = np.random.default_rng(0)
    rows = DatasetManifest()
    for i in range(n):
        path = tmp_path / "in" / f"c{i}.wav"
        path.parent.mkdir(exist_ok=True)
        save_wav(AudioClip(rng.uniform(-0.5, 0.5, 56000 + 2000 * i), FS), path)
        rows.append(Row(f"c{i}", str(path), i % 11, split))
    return rows


def test_augment_dataset(tmp_path):
    rows = _wav_manifest(tmp_path)
    res = fx.augment_dataset(rows, "echo", "train", tmp_path / "a", seed=1)
    again = fx.augment_dataset(rows, "echo", "train", tmp_path / "b", seed=1)
    assert not res.errors and len(res.manifest) == 10
    for r, s, src in zip(res.manifest, again.manifest, rows):
        assert r.effect == "echo" and r.label == src.label and r.split == "train"
        assert len(load_wav(r.path)) == 64000
        assert open(r.path, "rb").read() == open(s.path, "rb").read()


def test_augment_variant_by_split(tmp_path):
    rows = _wav_manifest(tmp_path, 1, split="test")
    res = fx.augment_dataset(rows, "saturation", "test", tmp_path / "a")
    clip = load_wav(rows[0].path)
    expect = fx.apply_effect(clip, fx.default_config("saturation", "B"))
    save_wav(expect, tmp_path / "expect.wav")
    assert open(res.manifest[0].path, "rb").read() == (tmp_path / "expect.wav").read_bytes()


def test_augment_pitch_uses_per_clip_seed(tmp_path):
    rows = _wav_manifest(tmp_path, 2)
    res = fx.augment_dataset(rows, "pitch_shift", "train", tmp_path / "a", seed=4)
    for row, out in zip(rows, res.manifest):
        steps = fx.draw_pitch_steps(fx.derive_seed(4, row.example_id))
        cfg = fx.EffectConfig("pitch_shift", "A", fx.PitchShiftParams(n_steps=steps))
        save_wav(fx.apply_effect(load_wav(row.path), cfg), tmp_path / "expect.wav")
        assert open(out.path, "rb").read() == (tmp_path / "expect.wav").read_bytes()


def test_augment_parallel_matches_serial(tmp_path):
    rows = _wav_manifest(tmp_path, 6)
    serial = fx.augment_dataset(rows, "pitch_shift", "train", tmp_path / "s", seed=2)
    parallel = fx.augment_dataset(rows, "pitch_shift", "train", tmp_path / "p", seed=2, jobs=2)
    for a, b in zip(serial.manifest, parallel.manifest):
        assert open(a.path, "rb").read() == open(b.path, "rb").read()


def test_augment_collects_errors(tmp_path):
    rows = _wav_manifest(tmp_path, 3)
    rows[1] = Row("broken", str(tmp_path / "missing.wav"), 0, "train")
    res = fx.augment_dataset(rows, "echo", "train", tmp_path / "a")
    assert [e for e, _ in res.errors] == ["broken"]
    assert [r.example_id for r in res.manifest] == ["c0", "c2"]
