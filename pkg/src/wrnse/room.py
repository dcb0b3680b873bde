"""Room impulse responses by the image-source method, and noisy mixing.

Room classes and ranges come from the augmentation setup used for training:

=======  ====================  ============  =================
class    dims [x, y, z] (m)    RT60 (s)      max src-mic (m)
=======  ====================  ============  =================
small    [2-6, 2-6, 2.5-3.5]   0.05 - 0.3    4
medium   [6-15, 6-15, 3-5]     0.1 - 0.5     9
large    [10-20, 10-20, 4-6]   0.6 - 0.8     10
=======  ====================  ============  =================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.signal import butter, fftconvolve, sosfiltfilt

from .audio import SAMPLE_RATE, Waveform

SOUND_SPEED = 343.0
WALL_MARGIN = 0.3
MIN_DISTANCE = 0.5
HIGHPASS_HZ = 100.0
MAX_ATTEMPTS = 10000
FRACTIONAL_TAPS = 8

ROOM_CLASSES = {
    "small": {"dims": ((2, 6), (2, 6), (2.5, 3.5)), "rt60": (0.05, 0.3), "max_distance": 4.0},
    "medium": {"dims": ((6, 15), (6, 15), (3, 5)), "rt60": (0.1, 0.5), "max_distance": 9.0},
    "large": {"dims": ((10, 20), (10, 20), (4, 6)), "rt60": (0.6, 0.8), "max_distance": 10.0},
}


class RoomError(ValueError):
    pass


@dataclass
class RoomSpec:
    dims: tuple
    rt60: float
    source_pos: tuple
    mic_pos: tuple
    sound_speed: float = SOUND_SPEED
    max_order: int | None = None
    room_class: str = ""

    def __post_init__(self):
        self.dims = tuple(float(d) for d in self.dims)
        self.source_pos = tuple(float(p) for p in self.source_pos)
        self.mic_pos = tuple(float(p) for p in self.mic_pos)
        if self.rt60 <= 0:
            raise RoomError(f"rt60 must be positive, got {self.rt60}")
        for name, p in (("source", self.source_pos), ("mic", self.mic_pos)):
            if not all(0 < c < d for c, d in zip(p, self.dims)):
                raise RoomError(f"{name} position {p} lies outside the room {self.dims}")

    @property
    def distance(self):
        return float(np.linalg.norm(np.subtract(self.source_pos, self.mic_pos)))

    @property
    def volume(self):
        x, y, z = self.dims
        return x * y * z

    @property
    def surface(self):
        x, y, z = self.dims
        return 2 * (x * y + x * z + y * z)

    def as_dict(self):
        return {
            "room_class": self.room_class,
            "dims": list(self.dims),
            "rt60": self.rt60,
            "source_pos": list(self.source_pos),
            "mic_pos": list(self.mic_pos),
            "sound_speed": self.sound_speed,
            "max_order": self.max_order,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["dims"]), float(d["rt60"]), tuple(d["source_pos"]), tuple(d["mic_pos"]),
                   float(d.get("sound_speed", SOUND_SPEED)), d.get("max_order"), d.get("room_class", ""))


@dataclass
class Rir:
    taps: np.ndarray
    room: RoomSpec | None = None
    sample_rate: int = SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    @property
    def first_tap(self):
        """Index of the direct-path arrival."""
        return int(self.meta.get("direct_delay_samples", int(np.argmax(np.abs(self.taps)))))


def sabine_absorption(dims, rt60):
    x, y, z = dims
    return 0.161 * x * y * z / (2 * (x * y + x * z + y * z) * rt60)


def sample_room(room_class, rng):
    """Draw a :class:`RoomSpec` uniformly within a class's ranges."""
    if room_class not in ROOM_CLASSES:
        raise RoomError(f"unknown room class {room_class!r}; choose from {sorted(ROOM_CLASSES)}")
    spec = ROOM_CLASSES[room_class]
    for _ in range(MAX_ATTEMPTS):
        dims = np.array([rng.uniform(lo, hi) for lo, hi in spec["dims"]])
        rt60 = rng.uniform(*spec["rt60"])
        if sabine_absorption(dims, rt60) > 0.99:
            continue
        inner = dims - 2 * WALL_MARGIN
        dist = rng.uniform(MIN_DISTANCE, spec["max_distance"])
        src = WALL_MARGIN + rng.uniform(size=3) * inner
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        mic = src + dist * direction
        if np.all(mic >= WALL_MARGIN) and np.all(mic <= dims - WALL_MARGIN):
            return RoomSpec(tuple(dims), float(rt60), tuple(src), tuple(mic), room_class=room_class)
    raise RoomError(f"could not place source and microphone in a {room_class} room after {MAX_ATTEMPTS} attempts")


def _enumerate_images(room, fs, n_taps):
    """Distances and reflection counts of every image arriving within ``n_taps``."""
    c = room.sound_speed
    L = np.asarray(room.dims)
    src = np.asarray(room.source_pos)
    mic = np.asarray(room.mic_pos)
    max_dist = n_taps / fs * c
    coords, counts = [], []
    for axis in range(3):
        n = np.arange(-int(math.ceil(max_dist / (2 * L[axis]))) - 1, int(math.ceil(max_dist / (2 * L[axis]))) + 2)
        # images at 2nL + s (|2n| reflections) and 2nL - s (|2n - 1| reflections)
        coords.append(np.concatenate([2 * n * L[axis] + src[axis], 2 * n * L[axis] - src[axis]]) - mic[axis])
        counts.append(np.concatenate([np.abs(2 * n), np.abs(2 * n - 1)]))
    dx, dy, dz = np.meshgrid(*coords, indexing="ij", sparse=True)
    kx, ky, kz = np.meshgrid(*counts, indexing="ij", sparse=True)
    dist = np.sqrt(dx ** 2 + dy ** 2 + dz ** 2)
    order = kx + ky + kz
    keep = dist * fs / c < n_taps + FRACTIONAL_TAPS
    if room.max_order is not None:
        keep &= order <= room.max_order
    return dist[keep], order[keep]


def _fit_decay(edc, fs, lo_db=-5.0, hi_db=-35.0):
    edc_db = 10 * np.log10(np.maximum(edc / edc[0], 1e-300))
    sel = (edc_db <= lo_db) & (edc_db >= hi_db)
    if np.count_nonzero(sel) < 2:
        return np.inf
    slope, _ = np.polyfit(np.nonzero(sel)[0] / fs, edc_db[sel], 1)
    return -60.0 / slope if slope < 0 else np.inf


def _image_energy_rt60(beta, dist, order, fs, c, n_taps):
    # incoherent energy of the image set, binned by arrival sample
    idx = np.minimum((dist * fs / c).astype(np.int64), n_taps - 1)
    energy = np.bincount(idx, weights=beta ** (2 * order) / (4 * np.pi * dist) ** 2, minlength=n_taps)
    return _fit_decay(np.cumsum(energy[::-1])[::-1], fs)


def reflection_coefficient(room, law="calibrated", fs=SAMPLE_RATE, n_taps=None, images=None):
    """Uniform wall reflection coefficient for ``room.rt60``; returns ``(beta, clamped)``.

    ``law="sabine"``: ``alpha = 0.161 V / (S T60)``; ``"eyring"``:
    ``alpha = 1 - exp(-0.161 V / (S T60))``. Neither reproduces T60 in the image
    method for non-cubic rooms or low-order responses, so ``"calibrated"``
    (default) root-finds the beta whose image-set energy decay, fitted from -5
    to -35 dB, has slope -60 dB per T60. ``alpha = 1 - beta**2`` is capped at 0.99.
    """
    if law == "calibrated":
        n_taps = int(math.ceil(1.25 * room.rt60 * fs)) if n_taps is None else n_taps
        dist, order = _enumerate_images(room, fs, n_taps) if images is None else images
        c = room.sound_speed
        beta_min, beta_max = math.sqrt(0.01), 0.999

        def err(beta):
            return math.log(_image_energy_rt60(beta, dist, order, fs, c, n_taps) / room.rt60)

        # the fitted decay is not monotone in beta when few reflections dominate,
        # so scan a grid and refine inside the best bracketing interval
        grid = np.linspace(beta_min, beta_max, 64)
        errs = np.array([err(b) for b in grid])
        best = int(np.argmin(np.abs(errs)))
        for lo, hi in ((best - 1, best), (best, best + 1)):
            if 0 <= lo and hi < grid.size and np.sign(errs[lo]) != np.sign(errs[hi]):
                if np.isfinite(errs[lo]) and np.isfinite(errs[hi]):
                    return brentq(err, grid[lo], grid[hi], xtol=1e-10), False
        return float(grid[best]), best == 0 and errs[best] > 0
    x = 0.161 * room.volume / (room.surface * room.rt60)
    if law == "sabine":
        alpha = x
    elif law == "eyring":
        alpha = 1.0 - math.exp(-x)
    else:
        raise RoomError(f"unknown absorption law {law!r}")
    clamped = alpha > 0.99
    alpha = min(alpha, 0.99)
    return math.sqrt(1.0 - alpha), clamped


def _highpass(cutoff, fs):
    return butter(2, cutoff, "highpass", fs=fs, output="sos")


def _fractional_kernel(frac, taps=FRACTIONAL_TAPS):
    # Hann-windowed sinc centred at (taps/2 - 1) + frac
    n = np.arange(taps)
    t = n[None, :] - (taps // 2 - 1) - frac[:, None]
    win = 0.5 * (1 + np.cos(np.pi * t / (taps // 2 + 1)))
    return np.sinc(t) * win


def image_source_rir(room, fs=SAMPLE_RATE, length=None, law="calibrated", beta=None, highpass_hz=HIGHPASS_HZ):
    """Impulse response from source to microphone by mirrored image sources.

    Each image contributes ``beta ** reflections / (4 pi d)`` at delay ``d / c``.
    Fractional delays use an 8-tap windowed sinc. Length defaults to
    ``ceil(1.25 * rt60 * fs)`` samples. ``room.max_order`` caps the total
    reflection count; ``beta`` overrides the RT60-derived coefficient.

    With uniform positive reflection coefficients the late images add
    coherently at low frequency; a zero-phase high-pass at ``highpass_hz``
    (``None`` disables it) removes that build-up so the tail decays like the
    image-set energy.
    """
    c = room.sound_speed
    n_taps = int(math.ceil(1.25 * room.rt60 * fs)) if length is None else int(length)
    d, k = _enumerate_images(room, fs, n_taps)
    clamped = False
    explicit = beta is not None
    if beta is None:
        beta, clamped = reflection_coefficient(room, law, fs, n_taps, images=(d, k))
    amp = beta ** k / (4 * np.pi * d)
    delay = d * fs / c
    whole = np.floor(delay).astype(np.int64)
    kern = _fractional_kernel(delay - whole) * amp[:, None]
    idx = whole[:, None] + np.arange(FRACTIONAL_TAPS)[None, :] - (FRACTIONAL_TAPS // 2 - 1)
    valid = (idx >= 0) & (idx < n_taps)
    taps = np.zeros(n_taps)
    np.add.at(taps, idx[valid], kern[valid])
    if highpass_hz:
        taps = sosfiltfilt(_highpass(highpass_hz, fs), taps, padlen=min(3 * 7, n_taps - 1))
    meta = {
        "beta": beta,
        "alpha_clamped": clamped,
        "direct_delay_samples": int(math.floor(room.distance * fs / c)),
        "n_images": int(d.size),
        "absorption_law": "explicit" if explicit else law,
    }
    return Rir(taps, room, fs, meta)


def schroeder_rt60(taps, fs=SAMPLE_RATE, lo_db=-5.0, hi_db=-35.0):
    """RT60 from a straight-line fit to the backward-integrated energy decay curve."""
    energy = np.asarray(taps, dtype=np.float64) ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    edc_db = 10 * np.log10(np.maximum(edc / edc[0], 1e-300))
    sel = (edc_db <= lo_db) & (edc_db >= hi_db)
    if np.count_nonzero(sel) < 2:
        raise RoomError("energy decay curve does not span the fit range")
    t = np.nonzero(sel)[0] / fs
    slope, _ = np.polyfit(t, edc_db[sel], 1)
    return -60.0 / slope


def energy_decay_curve(taps):
    energy = np.asarray(taps, dtype=np.float64) ** 2
    return np.cumsum(energy[::-1])[::-1]


# ---------------------------------------------------------------------------
# mixing


@dataclass
class MixSpec:
    snr_db: float
    noise_source: str = ""

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise RoomError("snr_db must be finite")


@dataclass
class Mixture:
    noisy: np.ndarray
    reverberant: np.ndarray
    noise: np.ndarray
    noise_gain: float
    peak_gain: float
    noise_offset: int

    @property
    def snr_db(self):
        """Achieved SNR of the two addends, before peak normalization."""
        return 10 * np.log10(np.mean(self.reverberant ** 2) / np.mean(self.noise ** 2))


def noise_gain(signal_power, noise_power, snr_db):
    """Amplitude gain putting scaled noise ``snr_db`` below ``signal_power``."""
    return math.sqrt(signal_power / (noise_power * 10.0 ** (snr_db / 10.0)))


def reverberate(speech, rir):
    x = speech.samples if isinstance(speech, Waveform) else np.asarray(speech, dtype=np.float64)
    h = rir.taps if isinstance(rir, Rir) else np.asarray(rir, dtype=np.float64)
    return fftconvolve(x, h)[: x.shape[0]]


def _noise_segment(noise, n, rng):
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[0] >= n:
        offset = int(rng.integers(0, noise.shape[0] - n + 1))
        return noise[offset:offset + n], offset
    offset = int(rng.integers(0, noise.shape[0]))
    reps = -(-(n + offset) // noise.shape[0])
    return np.tile(noise, reps)[offset:offset + n], offset


def mix_components(speech, rir, noise, mix, rng, peak=0.95):
    """Reverberate ``speech`` and add noise at ``mix.snr_db``; keep both addends."""
    rev = reverberate(speech, rir)
    p_rev = float(np.mean(rev ** 2))
    if p_rev == 0.0:
        raise RoomError("speech is silent; SNR is undefined")
    noise = noise.samples if isinstance(noise, Waveform) else noise
    seg, offset = _noise_segment(noise, rev.shape[0], rng)
    p_noise = float(np.mean(seg ** 2))
    if p_noise == 0.0:
        raise RoomError("noise is silent; SNR is undefined")
    g = noise_gain(p_rev, p_noise, mix.snr_db)
    scaled = g * seg
    noisy = rev + scaled
    top = float(np.max(np.abs(noisy)))
    peak_gain = peak / top if top > 1.0 else 1.0
    return Mixture(noisy * peak_gain, rev, scaled, g, peak_gain, offset)


def corrupt(speech, rir, noise, mix, rng):
    """Noisy reverberant :class:`Waveform`; see :func:`mix_components`."""
    return Waveform(mix_components(speech, rir, noise, mix, rng).noisy, SAMPLE_RATE)
