"""WAV ingestion and output.

Everything downstream assumes mono float64 audio at 16 kHz; :func:`load_waveform`
enforces that by averaging channels and resampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 16000


class AudioError(ValueError):
    """Raised for unreadable, unsupported or empty audio."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise AudioError("waveform contains NaN or Inf")
        if int(self.sample_rate) <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return len(self) / self.sample_rate


def _to_float(data):
    kind = data.dtype
    if kind == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if kind == np.int16:
        return data.astype(np.float64) / 32768.0
    if kind == np.int32:
        # scipy returns 24-bit PCM left-justified in int32
        return data.astype(np.float64) / 2147483648.0
    if kind in (np.float32, np.float64):
        return data.astype(np.float64)
    raise AudioError(f"unsupported sample format {kind}")


def resample(samples, orig_rate, target_rate=SAMPLE_RATE):
    """Polyphase windowed-sinc resampling between integer rates."""
    if orig_rate == target_rate:
        return np.asarray(samples, dtype=np.float64)
    g = gcd(int(orig_rate), int(target_rate))
    up, down = target_rate // g, orig_rate // g
    return resample_poly(np.asarray(samples, dtype=np.float64), up, down, window=("kaiser", 5.0))


def load_waveform(path):
    """Read a PCM/float WAV file as a mono 16 kHz :class:`Waveform`."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError as exc:
        raise AudioError(f"cannot read {path}: file not found") from exc
    except (ValueError, OSError) as exc:
        raise AudioError(f"cannot read {path}: {exc}") from exc
    if data.size == 0:
        raise AudioError(f"{path} contains no audio")
    x = _to_float(data)
    if x.ndim == 2:
        x = x.mean(axis=1)
    x = resample(x, rate, SAMPLE_RATE)
    return Waveform(x, SAMPLE_RATE)


def write_waveform(path, wave, float32=False):
    """Write ``wave`` as 16-bit PCM (default) or 32-bit float WAV."""
    if isinstance(wave, Waveform):
        samples, rate = wave.samples, wave.sample_rate
    else:
        samples, rate = np.asarray(wave, dtype=np.float64), SAMPLE_RATE
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if float32:
        wavfile.write(path, rate, samples.astype(np.float32))
    else:
        pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype(np.int16)
        wavfile.write(path, rate, pcm)
