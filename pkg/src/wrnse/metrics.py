"""Objective quality measures: CD, LLR, FWsegSNR (intrusive) and SRMR.

All intrusive measures share a 25 ms Hamming / 10 ms analysis and score only
frames whose reference power is within 40 dB of the utterance mean frame
power. Test signals are trimmed or zero-padded to the reference length.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.fft import rfft
from scipy.signal import gammatone, hilbert, lfilter, sosfilt, tf2sos

from .audio import SAMPLE_RATE, Waveform
from .frontend import FFT_SIZE, FrameSpec, frame_signal, hz_to_mel, mel_to_hz

LPC_ORDER = 16
GATE_DB = 40.0
CD_RANGE = (0.0, 10.0)
LLR_RANGE = (0.0, 2.0)
FWSEG_RANGE = (-10.0, 35.0)
FWSEG_BANDS = 25
FWSEG_GAMMA = 0.2
LLR_TRIM = 0.95


class MetricError(ValueError):
    pass


def _samples(x):
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def _align(reference, test):
    ref, tst = _samples(reference), _samples(test)
    if tst.shape[0] >= ref.shape[0]:
        tst = tst[: ref.shape[0]]
    else:
        tst = np.pad(tst, (0, ref.shape[0] - tst.shape[0]))
    if not np.any(ref):
        raise MetricError("reference signal is silent")
    return ref, tst


def _frames(x):
    return frame_signal(x, FrameSpec(25))


def speech_gate(ref_frames, gate_db=GATE_DB):
    """Frames whose power is no more than ``gate_db`` below the mean frame power."""
    power = np.mean(ref_frames ** 2, axis=1)
    return power > np.mean(power) * 10 ** (-gate_db / 10)


# ---------------------------------------------------------------------------
# linear prediction


def autocorrelation(frame, order=LPC_ORDER):
    frame = np.asarray(frame, dtype=np.float64)
    n = frame.shape[0]
    return np.array([frame[: n - k] @ frame[k:] for k in range(order + 1)])


def levinson(r, order=LPC_ORDER):
    """Levinson-Durbin: ``A(z) = 1 + a_1 z^-1 + ... + a_p z^-p`` from autocorrelation ``r``.

    Returns ``(a, prediction_error)`` with ``a[0] == 1``. Raises
    :class:`MetricError` if the autocorrelation is not positive definite.
    """
    if r[0] <= 0:
        raise MetricError("zero-energy frame")
    a = np.zeros(order + 1)
    a[0] = 1.0
    err = r[0]
    for i in range(1, order + 1):
        k = -(r[i] + a[1:i] @ r[i - 1:0:-1]) / err
        a[1:i] = a[1:i] + k * a[i - 1:0:-1]
        a[i] = k
        err *= 1.0 - k * k
        if err <= r[0] * 1e-12:
            raise MetricError("autocorrelation is numerically singular")
    return a, err


def lpc_cepstrum(a, n_coeffs=LPC_ORDER):
    """Cepstrum of ``1 / A(z)`` for ``k = 1..n_coeffs`` by the standard recursion."""
    p = a.shape[0] - 1
    c = np.zeros(n_coeffs + 1)
    for n in range(1, n_coeffs + 1):
        acc = -a[n] if n <= p else 0.0
        for k in range(max(1, n - p), n):
            acc -= (k / n) * c[k] * a[n - k]
        c[n] = acc
    return c[1:]


def _frame_lpcs(ref, tst):
    rf, tf = _frames(ref), _frames(tst)
    gate = speech_gate(rf)
    out, skipped = [], 0
    for t in np.nonzero(gate)[0]:
        try:
            r_ref = autocorrelation(rf[t])
            a_ref, _ = levinson(r_ref)
            a_tst, _ = levinson(autocorrelation(tf[t]))
        except MetricError:
            skipped += 1
            continue
        out.append((r_ref, a_ref, a_tst))
    return out, skipped


def cepstral_distance_frames(reference, test):
    ref, tst = _align(reference, test)
    frames, skipped = _frame_lpcs(ref, tst)
    scale = 10.0 / math.log(10.0)
    dist = np.array([
        scale * math.sqrt(2.0 * np.sum((lpc_cepstrum(a_ref) - lpc_cepstrum(a_tst)) ** 2))
        for _, a_ref, a_tst in frames
    ])
    return np.clip(dist, *CD_RANGE), skipped


def cepstral_distance(reference, test):
    """Mean LPC-cepstral distance in dB over speech-active frames."""
    d, _ = cepstral_distance_frames(reference, test)
    if d.size == 0:
        raise MetricError("no scorable frames")
    return float(d.mean())


def toeplitz_quadratic(a, r):
    """``a R a^T`` for the symmetric Toeplitz matrix built from ``r`` (no matrix formed)."""
    p = a.shape[0]
    total = r[0] * (a @ a)
    for k in range(1, p):
        total += 2.0 * r[k] * (a[:-k] @ a[k:])
    return total


def llr_frames(reference, test):
    ref, tst = _align(reference, test)
    frames, skipped = _frame_lpcs(ref, tst)
    vals = np.array([
        math.log(max(toeplitz_quadratic(a_tst, r_ref) / toeplitz_quadratic(a_ref, r_ref), 1.0))
        for r_ref, a_ref, a_tst in frames
    ])
    return np.clip(vals, *LLR_RANGE), skipped


def llr(reference, test):
    """Log-likelihood ratio, averaged over the lowest 95 % of frame values."""
    v, _ = llr_frames(reference, test)
    if v.size == 0:
        raise MetricError("no scorable frames")
    v = np.sort(v)
    keep = max(1, int(math.floor(LLR_TRIM * v.size)))
    return float(v[:keep].mean())


# ---------------------------------------------------------------------------
# frequency-weighted segmental SNR


def fwseg_filters(n_bands=FWSEG_BANDS, fft_size=FFT_SIZE, fs=SAMPLE_RATE):
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(fs / 2), n_bands + 2))
    freqs = np.arange(fft_size // 2 + 1) * fs / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    return np.maximum(0.0, np.minimum((freqs - lo) / (mid - lo), (hi - freqs) / (hi - mid)))


def fwsegsnr_frames(reference, test):
    ref, tst = _align(reference, test)
    rf, tf = _frames(ref), _frames(tst)
    gate = speech_gate(rf)
    filt = fwseg_filters()
    X = np.abs(rfft(rf, n=FFT_SIZE, axis=1)) @ filt.T
    Y = np.abs(rfft(tf, n=FFT_SIZE, axis=1)) @ filt.T
    err = (X - Y) ** 2
    lo, hi = FWSEG_RANGE
    with np.errstate(divide="ignore", invalid="ignore"):
        band = 10 * np.log10(X ** 2 / err)
    band = np.where(err == 0, hi, band)
    W = X ** FWSEG_GAMMA
    band = np.where(W > 0, band, 0.0)
    num = (W * band).sum(axis=1)
    den = W.sum(axis=1)
    frame = np.where(den > 0, num / np.where(den > 0, den, 1.0), lo)
    return np.clip(frame, lo, hi)[gate]


def fwsegsnr(reference, test):
    """Frequency-weighted segmental SNR (dB) over speech-active frames."""
    v = fwsegsnr_frames(reference, test)
    if v.size == 0:
        raise MetricError("no scorable frames")
    return float(v.mean())


# ---------------------------------------------------------------------------
# speech-to-reverberation modulation energy ratio

SRMR_CHANNELS = 23
SRMR_MOD_BANDS = 8
SRMR_MOD_RANGE = (4.0, 128.0)
SRMR_MOD_Q = 2.0
SRMR_FRAME_S = 0.256
SRMR_HOP_S = 0.064


def erb_space(low, high, n):
    """Center frequencies uniformly spaced on the ERB-rate scale, highest first.

    Glasberg & Moore parameters; ``high`` itself is excluded, ``low`` is the
    last entry.
    """
    ear_q, min_bw = 9.26449, 24.7
    i = np.arange(1, n + 1)
    return -(ear_q * min_bw) + np.exp(i * (-np.log(high + ear_q * min_bw) + np.log(low + ear_q * min_bw)) / n) * (high + ear_q * min_bw)


def _modulation_filters(fs):
    centers = np.geomspace(*SRMR_MOD_RANGE, SRMR_MOD_BANDS)
    filters = []
    for fc in centers:
        w0 = 2 * np.pi * fc / fs
        bw = w0 / SRMR_MOD_Q
        # second-order resonator with unit peak gain
        r = np.exp(-bw / 2)
        b = np.array([1.0, 0.0, -1.0]) * (1 - r * r) / 2
        a = np.array([1.0, -2 * r * np.cos(w0), r * r])
        filters.append((b, a))
    return centers, filters


def srmr_energies(test, fs=SAMPLE_RATE):
    """Modulation energy per (channel, modulation band), summed over frames."""
    x = _samples(test)
    frame = int(round(SRMR_FRAME_S * fs))
    hop = int(round(SRMR_HOP_S * fs))
    if x.shape[0] < frame:
        raise MetricError(f"SRMR needs at least {frame} samples ({SRMR_FRAME_S * 1000:.0f} ms)")
    if not np.any(x):
        raise MetricError("test signal is silent")
    cfs = erb_space(125.0, fs / 2, SRMR_CHANNELS)
    _, mod_filters = _modulation_filters(fs)
    n_frames = (x.shape[0] - frame) // hop + 1
    win = np.hamming(frame)
    energy = np.zeros((SRMR_CHANNELS, SRMR_MOD_BANDS))
    for ch, cf in enumerate(cfs):
        # direct-form 8th order is ill-conditioned at low center frequencies
        env = np.abs(hilbert(sosfilt(tf2sos(*gammatone(cf, "iir", fs=fs)), x)))
        for m, (mb, ma) in enumerate(mod_filters):
            y = lfilter(mb, ma, env)
            idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
            energy[ch, m] = np.sum((y[idx] * win) ** 2)
    return energy


def srmr(test, fs=SAMPLE_RATE):
    """Ratio of modulation energy in bands 1-4 to bands 5-8, over all channels and frames."""
    e = srmr_energies(test, fs)
    high = e[:, 4:].sum()
    if high <= 0:
        raise MetricError("no energy in the high modulation bands")
    return float(e[:, :4].sum() / high)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    cd: float | None = None
    llr: float | None = None
    fwsegsnr_db: float | None = None
    srmr: float | None = None
    frame_counts: dict = field(default_factory=dict)
    clip_flags: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)


def score(test, reference=None):
    """All applicable metrics for one utterance."""
    report = MetricReport()
    report.srmr = srmr(test)
    if reference is None:
        return report
    cd_frames, cd_skipped = cepstral_distance_frames(reference, test)
    llr_vals, _ = llr_frames(reference, test)
    fw = fwsegsnr_frames(reference, test)
    report.cd = float(cd_frames.mean()) if cd_frames.size else None
    report.llr = llr(reference, test) if llr_vals.size else None
    report.fwsegsnr_db = float(fw.mean()) if fw.size else None
    report.frame_counts = {"cd": int(cd_frames.size), "llr": int(llr_vals.size), "fwsegsnr": int(fw.size),
                           "skipped": int(cd_skipped)}
    report.clip_flags = {
        "cd": bool(np.any(cd_frames >= CD_RANGE[1])),
        "llr": bool(np.any(llr_vals >= LLR_RANGE[1])),
        "fwsegsnr": bool(np.any((fw <= FWSEG_RANGE[0]) | (fw >= FWSEG_RANGE[1]))),
    }
    return report
