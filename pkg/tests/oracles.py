"""Independent measurement helpers shared by the effect tests and the acceptance suite."""
import numpy as np

FS = 16000


def impulse(n=64000):
    x = np.zeros(n)
    x[0] = 1.0
    return x


def peak_frequency(y, fs=FS, nfft=1 << 18):
    """Dominant frequency by FFT peak search with quadratic interpolation on log magnitude."""
    mag = np.abs(np.fft.rfft(y * np.hanning(len(y)), nfft))
    k = int(np.argmax(mag))
    a, b, c = np.log(mag[k - 1 : k + 2])
    return (k + 0.5 * (a - c) / (a - 2 * b + c)) * fs / nfft


def schroeder_rt60(h, fs=FS):
    """RT60 from the backward-integrated energy decay curve: time to reach -60 dB."""
    edc = np.cumsum(h[::-1] ** 2)[::-1]
    db = 10 * np.log10(edc / edc[0])
    return np.argmax(db <= -60.0) / fs


def notch_frequencies(h, targets, fs=FS, search_hz=100.0):
    """Frequency of the deepest response dip near each target, plus the bin width."""
    mag = np.abs(np.fft.rfft(h))
    freqs = np.fft.rfftfreq(len(h), 1 / fs)
    found = []
    for f in targets:
        sel = np.flatnonzero(np.abs(freqs - f) <= search_hz)
        found.append(freqs[sel[np.argmin(mag[sel])]])
    return np.array(found), fs / len(h)
