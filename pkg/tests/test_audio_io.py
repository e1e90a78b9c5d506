import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import raw_wav
from fxrobust.audio_io import (
    AudioClip,
    MalformedHeaderError,
    MissingFileError,
    UnsupportedEncodingError,
    fix_length,
    load_wav,
    save_wav,
)

STEP = 1 / 32768


def test_pcm16_scaling(tmp_path):
    clip = load_wav(raw_wav(tmp_path / "a.wav", [[16384]]))
    assert clip.samples.tolist() == [0.5]
    assert clip.sample_rate == 16000


def test_nsynth_sized_file(tmp_path):
    clip = load_wav(raw_wav(tmp_path / "a.wav", np.zeros((64000, 1))))
    assert len(clip) == 64000 and clip.sample_rate == 16000


def test_stereo_mean_downmix(tmp_path):
    clip = load_wav(raw_wav(tmp_path / "a.wav", [[1.0, 0.0]], code=3, bits=32))
    assert clip.samples.tolist() == [0.5]


def test_float32_and_extensible(tmp_path):
    x = np.array([[0.25], [-0.75]])
    assert load_wav(raw_wav(tmp_path / "f.wav", x, code=3, bits=32)).samples.tolist() == [0.25, -0.75]
    ext = load_wav(raw_wav(tmp_path / "e.wav", [[-32768], [8192]], extensible=True))
    assert ext.samples.tolist() == [-1.0, 0.25]


def test_distinct_errors_name_the_path(tmp_path):
    missing = tmp_path / "nope.wav"
    with pytest.raises(MissingFileError, match="nope.wav"):
        load_wav(missing)
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a wav at all")
    with pytest.raises(MalformedHeaderError, match="bad.wav"):
        load_wav(bad)
    with pytest.raises(UnsupportedEncodingError, match="u8.wav"):
        load_wav(raw_wav(tmp_path / "u8.wav", [[1]], code=1, bits=8))
    # the three kinds are distinct types
    assert len({MissingFileError, MalformedHeaderError, UnsupportedEncodingError}) == 3
    assert not issubclass(MissingFileError, MalformedHeaderError)


def test_save_zero_and_clamp(tmp_path):
    save_wav(AudioClip(np.zeros(2), 16000), tmp_path / "z.wav")
    assert load_wav(tmp_path / "z.wav").samples.tolist() == [0.0, 0.0]
    save_wav(AudioClip(np.array([2.0, -3.0]), 16000), tmp_path / "c.wav")
    back = load_wav(tmp_path / "c.wav").samples
    assert np.allclose(back, [1.0, -1.0], atol=STEP)


def test_save_rejects_nonfinite(tmp_path):
    with pytest.raises(ValueError):
        save_wav(AudioClip(np.array([np.nan]), 16000), tmp_path / "n.wav")


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.integers(1, 400), elements=st.floats(-1.5, 1.5, width=32)))
def test_round_trip_within_one_step(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("rt") / "x.wav"
    save_wav(AudioClip(x, 16000), path)
    back = load_wav(path).samples.astype(np.float64)
    assert np.max(np.abs(back - np.clip(x.astype(np.float64), -1, 1))) <= STEP


def test_fix_length_examples():
    x = np.arange(70000, dtype=np.float32) / 70000
    assert np.array_equal(fix_length(AudioClip(x, 16000)).samples, x[:64000])
    y = x[:64000]
    assert np.array_equal(fix_length(AudioClip(y, 16000)).samples, y)
    z = fix_length(AudioClip(x[:60000], 16000)).samples
    assert len(z) == 64000 and not z[60000:].any() and np.array_equal(z[:60000], x[:60000])


@given(st.integers(1, 20000), st.sampled_from([8000, 16000, 22050]), st.floats(0.1, 2.0))
@settings(max_examples=50, deadline=None)
def test_fix_length_properties(n, rate, seconds):
    clip = AudioClip(np.ones(n, dtype=np.float32), rate)
    once = fix_length(clip, seconds)
    assert len(once) == round(seconds * rate)
    assert once.sample_rate == rate
    assert np.array_equal(fix_length(once, seconds).samples, once.samples)


def test_fix_length_rejects_nonpositive():
    with pytest.raises(ValueError):
        fix_length(AudioClip(np.ones(4), 16000), 0)
