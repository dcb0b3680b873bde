"""Waveform synthesis from an enhanced magnitude and the noisy phase.

Analysis uses the 25 ms periodic Hamming window on the 10 ms grid, zero-padded
to 512 points. Synthesis multiplies each inverse frame by the same window,
overlap-adds, and divides by the summed squared window, which inverts the
analysis exactly wherever the envelope is above its floor.
"""

from __future__ import annotations

import numpy as np
from scipy.fft import ifft

from .audio import SAMPLE_RATE, Waveform
from .autodiff import Tensor
from .frontend import FFT_SIZE, FrameSpec, frame_signal, frame_spectrum, hamming

ENVELOPE_FLOOR = 1e-8
ANALYSIS = FrameSpec(25)


def analysis_spectrum(wave, n_frames=None):
    """Complex 512-point spectra of the 25 ms frames, shape ``(T, 512)``."""
    spec = frame_spectrum(frame_signal(wave, ANALYSIS), FFT_SIZE)
    return spec if n_frames is None else spec[:n_frames]


def spectral_phase(wave, n_frames=None):
    return np.angle(analysis_spectrum(wave, n_frames))


def hermitian(spectrum):
    """Force conjugate symmetry: upper bins mirror lower ones, DC and Nyquist real."""
    spec = np.array(spectrum, dtype=np.complex128, copy=True)
    n = spec.shape[-1]
    half = n // 2
    spec[..., 0] = spec[..., 0].real
    spec[..., half] = spec[..., half].real
    spec[..., half + 1:] = np.conj(spec[..., 1:half][..., ::-1])
    return spec


def overlap_add(frames, window, hop, floor=ENVELOPE_FLOOR):
    """Window, overlap-add and divide by the squared-window envelope."""
    T, L = frames.shape
    n = (T - 1) * hop + L
    out = np.zeros(n)
    env = np.zeros(n)
    w2 = window * window
    for t in range(T):
        out[t * hop:t * hop + L] += frames[t] * window
        env[t * hop:t * hop + L] += w2
    return out / np.maximum(env, floor)


def synthesize(magnitude, phase, return_residue=False):
    """Inverse of the 25 ms analysis given per-frame magnitude and phase."""
    magnitude = np.asarray(magnitude, dtype=np.float64)
    spec = hermitian(magnitude * np.exp(1j * np.asarray(phase)))
    time_frames = ifft(spec, n=FFT_SIZE, axis=-1)
    residue = float(np.max(np.abs(time_frames.imag))) if time_frames.size else 0.0
    L = ANALYSIS.window_len
    out = overlap_add(time_frames.real[:, :L], hamming(L), ANALYSIS.hop_len)
    return (out, residue) if return_residue else out


def enhance_waveform(noisy, model, features=None):
    """Enhance ``noisy`` with ``model`` (a network or any callable on features).

    The network's ``(T, 512)`` output is paired with the noisy 25 ms phase on
    the same frame grid; the result spans ``(T - 1) * 160 + 400`` samples.
    """
    from . import frontend

    if features is None:
        features = frontend.extract_features(noisy)
    frames = features.frames if hasattr(features, "frames") else np.asarray(features)
    out = model(frames)
    mag = np.asarray(out.data if isinstance(out, Tensor) else out)
    mag = mag.reshape(-1, mag.shape[-1])
    phase = spectral_phase(noisy, mag.shape[0])
    return Waveform(synthesize(mag, phase), SAMPLE_RATE)


def bypass_magnitude(noisy):
    """Identity "model": the noisy magnitude on the feature frame grid."""
    from .frontend import n_frames as count

    x = noisy.samples if isinstance(noisy, Waveform) else np.asarray(noisy)
    T = count(x.shape[0], FrameSpec(75).window_len, ANALYSIS.hop_len)
    return np.abs(analysis_spectrum(noisy, T))
