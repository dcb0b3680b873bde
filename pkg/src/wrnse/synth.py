"""Synthetic speech-like signals and noise for tests and augmentation.

Speech stand-in: a glottal pulse train (or noise for unvoiced stretches)
through time-varying formant resonators, with a syllable-rate envelope.
Noise: white, pink, and babble built by summing shuffled speech-like
segments.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import lfilter

from .audio import SAMPLE_RATE, Waveform

# (F1, F2, F3) in Hz for a handful of vowel-ish targets
_FORMANTS = np.array([
    [730, 1090, 2440],
    [270, 2290, 3010],
    [530, 1840, 2480],
    [300, 870, 2240],
    [640, 1190, 2390],
    [490, 1350, 1690],
])
_BANDWIDTHS = (80.0, 110.0, 160.0)


def _resonator(x, freq, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return lfilter([1.0 - r], a, x)


def speech_like(duration, rng, fs=SAMPLE_RATE, level=0.1, floor_db=None):
    """Formant-filtered pulse/noise excitation with syllabic modulation, RMS ``level``.

    ``floor_db`` adds a white recording-noise floor that many dB below the
    speech RMS; by default the signal is noiseless.
    """
    n = int(round(duration * fs))
    seg_len = int(0.12 * fs)
    out = np.zeros(n)
    pos = 0
    f0 = rng.uniform(90, 220)
    while pos < n:
        length = min(seg_len + int(rng.integers(-400, 400)), n - pos)
        voiced = rng.random() < 0.75
        if voiced:
            f0 = float(np.clip(f0 * rng.uniform(0.92, 1.08), 80, 260))
            period = fs / f0
            exc = np.zeros(length)
            exc[(np.arange(0, length, period)).astype(int)] = 1.0
            exc += 0.02 * rng.standard_normal(length)
        else:
            exc = 0.3 * rng.standard_normal(length)
        formants = _FORMANTS[rng.integers(len(_FORMANTS))] * rng.uniform(0.9, 1.1)
        seg = sum(_resonator(exc, f, b, fs) * g for f, b, g in zip(formants, _BANDWIDTHS, (1.0, 0.6, 0.3)))
        env = np.sin(np.pi * np.arange(length) / max(length, 1)) ** 0.6
        out[pos:pos + length] = seg * env * rng.uniform(0.4, 1.0)
        pos += length
    rms = np.sqrt(np.mean(out ** 2))
    out = out * (level / rms) if rms > 0 else out
    if floor_db is not None:
        out = out + level * 10 ** (-floor_db / 20) * rng.standard_normal(n)
    return Waveform(out, fs)


def white_noise(n, rng):
    return rng.standard_normal(n)


def pink_noise(n, rng):
    """1/f noise via spectral shaping of white noise."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.shape[0], dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x / np.std(x)


def babble_noise(n, rng, talkers=6, fs=SAMPLE_RATE):
    """Sum of speech-like streams with shuffled segments."""
    total = np.zeros(n)
    for _ in range(talkers):
        s = speech_like(n / fs + 0.5, rng, fs).samples
        chunks = np.array_split(s, max(1, len(s) // int(0.25 * fs)))
        order = rng.permutation(len(chunks))
        total += np.concatenate([chunks[i] for i in order])[:n]
    return total / np.std(total)


def modulated_noise(n, rate, rng, depth=1.0, fs=SAMPLE_RATE):
    """White noise carrier with a sinusoidal amplitude envelope at ``rate`` Hz."""
    t = np.arange(n) / fs
    env = 1.0 + depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    return rng.standard_normal(n) * env


NOISE_KINDS = ("white", "pink", "babble")


def make_noise(kind, n, rng):
    if kind == "white":
        return white_noise(n, rng)
    if kind == "pink":
        return pink_noise(n, rng)
    if kind == "babble":
        return babble_noise(n, rng)
    raise ValueError(f"unknown noise kind {kind!r}; choose from {NOISE_KINDS}")
