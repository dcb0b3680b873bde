"""Multi-resolution spectral front-end.

Each 10 ms frame is described at three analysis lengths (25, 50 and 75 ms
Hamming windows). For every length the frame contributes a 512-point FFT
magnitude, a log mel filterbank and its cepstrum; the streams are stacked
into one feature vector and normalized per utterance and channel.

Layout for a 16 kHz signal (C = 1900)::

    fft25(512) fft50(512) fft75(512) mel25(32) mel50(50) mel75(100)
    cep25(32)  cep50(50)  cep75(100)

Frames of every length start on the same 160-sample grid, so row ``t`` of
every stream begins at sample ``160 * t``. The 75 ms stream is the shortest
and sets T; the others are truncated to it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct, fft
from scipy.signal import get_window

from .audio import SAMPLE_RATE, Waveform

FFT_SIZE = 512
HOP_MS = 10
WINDOWS_MS = (25, 50, 75)
MEL_BANDS = {25: 32, 50: 50, 75: 100}
MEL_FLOOR = 1e-10


class FeatureError(ValueError):
    """Raised when audio cannot be framed or features are inconsistent."""


@dataclass(frozen=True)
class FrameSpec:
    window_ms: int = 25
    hop_ms: int = HOP_MS
    fft_size: int = FFT_SIZE
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.window_ms not in WINDOWS_MS:
            raise FeatureError(f"window_ms must be one of {WINDOWS_MS}, got {self.window_ms}")
        if not 0 < self.hop_ms < self.window_ms:
            raise FeatureError("hop must be positive and shorter than the window")

    @property
    def window_len(self):
        return self.window_ms * self.sample_rate // 1000

    @property
    def hop_len(self):
        return self.hop_ms * self.sample_rate // 1000


@dataclass(frozen=True)
class ChannelGroup:
    source: str  # "fft" | "mel" | "cep"
    window_ms: int
    dim: int
    offset: int


@dataclass
class FeatureBlock:
    """T x C feature matrix plus its channel layout and normalization stats."""

    frames: np.ndarray
    layout: tuple = ()
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    normalized: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise FeatureError(f"feature frames must be 2-D, got {self.frames.shape}")
        if self.layout and sum(g.dim for g in self.layout) != self.frames.shape[1]:
            raise FeatureError("layout dimensions do not sum to the channel count")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def n_channels(self):
        return self.frames.shape[1]

    def group(self, source, window_ms):
        for g in self.layout:
            if g.source == source and g.window_ms == window_ms:
                return self.frames[:, g.offset:g.offset + g.dim]
        raise KeyError((source, window_ms))

    def split(self):
        """Slice by layout; ``np.concatenate(list(block.split().values()), 1)`` restores it."""
        return {(g.source, g.window_ms): self.frames[:, g.offset:g.offset + g.dim] for g in self.layout}

    def slice_rows(self, start, stop):
        return FeatureBlock(self.frames[start:stop], self.layout, self.mean, self.var, self.normalized)


def build_layout(windows=WINDOWS_MS, fft_size=FFT_SIZE, mel_bands=MEL_BANDS):
    groups, offset = [], 0
    for source in ("fft", "mel", "cep"):
        for w in windows:
            dim = fft_size if source == "fft" else mel_bands[w]
            groups.append(ChannelGroup(source, w, dim, offset))
            offset += dim
    return tuple(groups)


@lru_cache(maxsize=None)
def hamming(n):
    """Periodic Hamming window of length ``n``."""
    w = get_window("hamming", n, fftbins=True)
    w.setflags(write=False)
    return w


def n_frames(n_samples, window_len, hop_len):
    return (n_samples - window_len) // hop_len + 1


def frame_signal(wave, spec):
    """Hamming-windowed frames, shape ``(T, window_len)``.

    ``T = floor((N - L) / H) + 1``. Raises :class:`FeatureError` if the signal
    is shorter than one window.
    """
    x = wave.samples if isinstance(wave, Waveform) else np.asarray(wave, dtype=np.float64)
    L, H = spec.window_len, spec.hop_len
    if x.shape[0] < L:
        raise FeatureError(f"signal has {x.shape[0]} samples; at least {L} are required for a {spec.window_ms} ms window")
    T = n_frames(x.shape[0], L, H)
    idx = np.arange(L)[None, :] + H * np.arange(T)[:, None]
    return x[idx] * hamming(L)


def fold(frames, fft_size=FFT_SIZE):
    """Time-alias frames longer than ``fft_size`` (sum modulo ``fft_size``)."""
    frames = np.asarray(frames, dtype=np.float64)
    L = frames.shape[-1]
    if L <= fft_size:
        return frames
    reps = -(-L // fft_size)
    padded = np.zeros(frames.shape[:-1] + (reps * fft_size,))
    padded[..., :L] = frames
    return padded.reshape(frames.shape[:-1] + (reps, fft_size)).sum(axis=-2)


def frame_spectrum(frames, fft_size=FFT_SIZE):
    """Complex ``fft_size``-point DFT of each (folded) frame along the last axis."""
    return fft(fold(frames, fft_size), n=fft_size, axis=-1)


def fft_magnitude(frame, fft_size=FFT_SIZE):
    """Full ``fft_size``-bin magnitude (both Hermitian halves kept)."""
    return np.abs(frame_spectrum(frame, fft_size))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_weights(n_bands, fft_size=FFT_SIZE, sample_rate=SAMPLE_RATE, fmin=0.0, fmax=None):
    """Triangular mel filters over the one-sided bins, shape ``(n_bands, fft_size//2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_bands + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    w = np.maximum(0.0, np.minimum(rising, falling))
    w.setflags(write=False)
    return w


def mel_filterbank(mag, n_bands):
    """Log mel band energies of a magnitude spectrum (reads bins 0..fft_size/2)."""
    if n_bands not in MEL_BANDS.values():
        raise FeatureError(f"n_bands must be one of {sorted(MEL_BANDS.values())}, got {n_bands}")
    mag = np.asarray(mag, dtype=np.float64)
    fft_size = mag.shape[-1]
    w = mel_weights(n_bands, fft_size)
    power = mag[..., : fft_size // 2 + 1] ** 2
    return np.log(np.maximum(power @ w.T, MEL_FLOOR))


def cepstrum(mel_log):
    """Orthonormal DCT-II of log mel energies; same dimension as the input."""
    return dct(np.asarray(mel_log, dtype=np.float64), type=2, norm="ortho", axis=-1)


def normalize(frames):
    """Per-channel zero-mean / unit-variance; constant channels map to 0.

    Returns ``(normalized, mean, var)``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    mean = frames.mean(axis=0)
    centered = frames - mean
    var = (centered ** 2).mean(axis=0)
    std = np.sqrt(var)
    # tolerance relative to the channel's magnitude so rounding noise counts as constant
    scale = np.maximum(np.abs(frames).max(axis=0, initial=0.0), 1.0)
    live = std > 1e-12 * scale
    out = np.zeros_like(centered)
    out[:, live] = centered[:, live] / std[live]
    return out, mean, var


def min_samples(sample_rate=SAMPLE_RATE):
    return max(WINDOWS_MS) * sample_rate // 1000


def raw_features(wave):
    """Stacked un-normalized features, shape ``(T, 1900)`` for 16 kHz input."""
    x = wave.samples if isinstance(wave, Waveform) else np.asarray(wave, dtype=np.float64)
    need = min_samples()
    if x.shape[0] < need:
        raise FeatureError(f"signal has {x.shape[0]} samples; at least {need} (75 ms) are required")
    streams = {}
    T = None
    for w in WINDOWS_MS:
        frames = frame_signal(x, FrameSpec(w))
        T = frames.shape[0] if T is None else min(T, frames.shape[0])
        streams[w] = frames
    fft_parts, mel_parts, cep_parts = [], [], []
    for w in WINDOWS_MS:
        mag = fft_magnitude(streams[w][:T])
        mel = mel_filterbank(mag, MEL_BANDS[w])
        fft_parts.append(mag)
        mel_parts.append(mel)
        cep_parts.append(cepstrum(mel))
    return np.concatenate(fft_parts + mel_parts + cep_parts, axis=1)


def extract_features(wave, normalize_block=True):
    """Compute the normalized :class:`FeatureBlock` of a 16 kHz waveform."""
    if isinstance(wave, Waveform) and wave.sample_rate != SAMPLE_RATE:
        raise FeatureError(f"expected {SAMPLE_RATE} Hz audio, got {wave.sample_rate}")
    frames = raw_features(wave)
    layout = build_layout()
    if not normalize_block:
        return FeatureBlock(frames, layout)
    normed, mean, var = normalize(frames)
    return FeatureBlock(normed, layout, mean, var, normalized=True)


def clean_log_spectrum(wave, floor=1e-8):
    """Log magnitude of the 25 ms / 512-point analysis, shape ``(T25, 512)``."""
    mag = fft_magnitude(frame_signal(wave, FrameSpec(25)))
    return np.log(np.maximum(mag, floor))


# ---------------------------------------------------------------------------
# binary feature dump

_DUMP_MAGIC = b"WRNFEAT1"


def write_feature_block(path, block):
    """Write one block: magic, T, C, JSON layout descriptor, row-major float64 values."""
    layout = json.dumps([[g.source, g.window_ms, g.dim, g.offset] for g in block.layout]).encode()
    T, C = block.frames.shape
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(struct.pack("<QQI", T, C, len(layout)))
        fh.write(layout)
        fh.write(np.ascontiguousarray(block.frames, dtype="<f8").tobytes())


def read_feature_block(path):
    data = Path(path).read_bytes()
    if data[:8] != _DUMP_MAGIC:
        raise FeatureError(f"{path} is not a feature dump")
    T, C, n = struct.unpack_from("<QQI", data, 8)
    pos = 8 + struct.calcsize("<QQI")
    layout = tuple(ChannelGroup(*g) for g in json.loads(data[pos:pos + n]))
    pos += n
    if len(data) - pos != T * C * 8:
        raise FeatureError(f"{path}: truncated feature dump")
    frames = np.frombuffer(data, dtype="<f8", count=T * C, offset=pos).reshape(T, C).copy()
    return FeatureBlock(frames, layout)
