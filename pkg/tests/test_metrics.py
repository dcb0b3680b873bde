import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import solve_toeplitz, toeplitz

from wrnse import metrics
from wrnse.frontend import FrameSpec, frame_signal
from wrnse.metrics import MetricError

FS = 16000


def sine(freq, n, amp=0.5):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / FS)


def voiced(rng, n=8000):
    # harmonic tone plus a little noise keeps every LPC frame well conditioned
    t = np.arange(n) / FS
    x = sum(np.sin(2 * np.pi * 140 * k * t) / k for k in range(1, 12))
    return 0.3 * x + 0.01 * rng.standard_normal(n)


class TestLinearPrediction:
    def test_levinson_matches_toeplitz_solve(self, rng):
        frame = rng.standard_normal(400)
        r = metrics.autocorrelation(frame)
        a, err = metrics.levinson(r)
        direct = solve_toeplitz(r[:-1], -r[1:])
        np.testing.assert_allclose(a[1:], direct, rtol=1e-9, atol=1e-12)
        assert err == pytest.approx(r[0] + r[1:] @ a[1:], rel=1e-9)

    def test_cepstrum_matches_fft_cepstrum(self, rng):
        a, _ = metrics.levinson(metrics.autocorrelation(rng.standard_normal(400)))
        n = 1 << 14
        # cepstrum of 1/A from the log spectrum; minimum phase so the complex log is unwrapped
        log_inv = -np.log(np.fft.fft(a, n))
        c = np.fft.ifft(log_inv).real
        np.testing.assert_allclose(metrics.lpc_cepstrum(a), c[1:17], atol=1e-9)

    def test_toeplitz_quadratic_matches_matrix(self, rng):
        for _ in range(5):
            a = rng.standard_normal(17)
            r = metrics.autocorrelation(rng.standard_normal(400))
            assert metrics.toeplitz_quadratic(a, r) == pytest.approx(a @ toeplitz(r) @ a, rel=1e-10)

    def test_singular_autocorrelation(self):
        with pytest.raises(MetricError):
            metrics.levinson(np.zeros(17))


class TestCepstralDistance:
    def test_identity_is_zero(self, rng):
        x = voiced(rng)
        assert metrics.cepstral_distance(x, x) == 0.0

    def test_matches_loop_reference(self, rng):
        ref = voiced(rng)
        tst = ref + 0.05 * rng.standard_normal(ref.shape[0])
        rf = frame_signal(ref, FrameSpec(25))
        tf = frame_signal(tst, FrameSpec(25))
        power = np.mean(rf ** 2, axis=1)
        vals = []
        for t in range(rf.shape[0]):
            if power[t] <= power.mean() * 1e-4:
                continue
            ca = metrics.lpc_cepstrum(metrics.levinson(metrics.autocorrelation(rf[t]))[0])
            cb = metrics.lpc_cepstrum(metrics.levinson(metrics.autocorrelation(tf[t]))[0])
            d = 10 / math.log(10) * math.sqrt(2 * sum((ca[k] - cb[k]) ** 2 for k in range(16)))
            vals.append(min(max(d, 0.0), 10.0))
        assert metrics.cepstral_distance(ref, tst) == pytest.approx(np.mean(vals), abs=1e-9)

    def test_scale_invariant(self, rng):
        ref = voiced(rng)
        tst = ref + 0.05 * rng.standard_normal(ref.shape[0])
        base = metrics.cepstral_distance(ref, tst)
        for c in (1e-3, 7.0):
            assert metrics.cepstral_distance(c * ref, c * tst) == pytest.approx(base, abs=1e-9)

    def test_frames_clipped(self, rng):
        ref = voiced(rng)
        d, _ = metrics.cepstral_distance_frames(ref, rng.standard_normal(ref.shape[0]))
        assert np.all((d >= 0) & (d <= 10))


class TestLLR:
    def test_identity_is_zero(self, rng):
        x = voiced(rng)
        assert metrics.llr(x, x) == 0.0

    def test_matches_matrix_form(self, rng):
        ref = voiced(rng)
        tst = ref + 0.05 * rng.standard_normal(ref.shape[0])
        rf = frame_signal(ref, FrameSpec(25))
        tf = frame_signal(tst, FrameSpec(25))
        vals, _ = metrics.llr_frames(ref, tst)
        power = np.mean(rf ** 2, axis=1)
        active = np.nonzero(power > power.mean() * 1e-4)[0]
        expected = []
        for t in active:
            r = metrics.autocorrelation(rf[t])
            R = toeplitz(r)
            a_ref = metrics.levinson(r)[0]
            a_tst = metrics.levinson(metrics.autocorrelation(tf[t]))[0]
            expected.append(np.clip(math.log(max((a_tst @ R @ a_tst) / (a_ref @ R @ a_ref), 1.0)), 0, 2))
        np.testing.assert_allclose(vals, expected, atol=1e-10)

    def test_trimmed_mean(self, rng):
        ref = voiced(rng)
        tst = ref + 0.2 * rng.standard_normal(ref.shape[0])
        v = np.sort(metrics.llr_frames(ref, tst)[0])
        assert metrics.llr(ref, tst) == pytest.approx(v[: int(0.95 * v.size)].mean(), abs=1e-12)

    def test_nonnegative(self, rng):
        ref = voiced(rng)
        v, _ = metrics.llr_frames(ref, ref + rng.standard_normal(ref.shape[0]))
        assert np.all((v >= 0) & (v <= 2))


class TestFWSegSNR:
    def test_identity_is_upper_clip(self, rng):
        x = voiced(rng)
        assert metrics.fwsegsnr(x, x) == 35.0

    def test_matches_loop_reference(self):
        ref = sine(440, 8000)
        tst = ref + 0.01 * np.cos(2 * np.pi * 1234 * np.arange(8000) / FS)
        rf = frame_signal(ref, FrameSpec(25))
        tf = frame_signal(tst, FrameSpec(25))
        filt = metrics.fwseg_filters()
        power = np.mean(rf ** 2, axis=1)
        out = []
        for t in range(rf.shape[0]):
            if power[t] <= power.mean() * 1e-4:
                continue
            X = np.abs(np.fft.rfft(rf[t], 512))
            Y = np.abs(np.fft.rfft(tf[t], 512))
            num = den = 0.0
            for j in range(25):
                xj = sum(filt[j, k] * X[k] for k in range(257))
                yj = sum(filt[j, k] * Y[k] for k in range(257))
                w = xj ** 0.2
                num += w * 10 * math.log10(xj ** 2 / (xj - yj) ** 2)
                den += w
            out.append(min(max(num / den, -10.0), 35.0))
        assert metrics.fwsegsnr(ref, tst) == pytest.approx(np.mean(out), abs=1e-9)

    @given(seed=st.integers(0, 2 ** 31), c=st.floats(1e-3, 1e3))
    @settings(max_examples=20, deadline=None)
    def test_scale_invariant(self, seed, c):
        rng = np.random.default_rng(seed)
        ref = rng.standard_normal(4000)
        tst = ref + 0.3 * rng.standard_normal(4000)
        assert metrics.fwsegsnr(c * ref, c * tst) == pytest.approx(metrics.fwsegsnr(ref, tst), abs=1e-9)

    def test_silent_test_signal(self, rng):
        # every band error equals the band energy, so each frame scores exactly 0 dB
        x = voiced(rng)
        np.testing.assert_allclose(metrics.fwsegsnr_frames(x, np.zeros_like(x)), 0.0, atol=1e-12)

    def test_frames_within_clip_range(self, rng):
        x = voiced(rng)
        v = metrics.fwsegsnr_frames(x, -3 * x + rng.standard_normal(x.shape[0]))
        assert np.all((v >= -10) & (v <= 35))

    def test_length_mismatch_pads_test(self, rng):
        x = voiced(rng)
        assert metrics.fwsegsnr(x, x[:-100]) == pytest.approx(metrics.fwsegsnr(x, np.r_[x[:-100], np.zeros(100)]))

    def test_silent_reference(self):
        with pytest.raises(MetricError):
            metrics.fwsegsnr(np.zeros(4000), np.ones(4000))


class TestSRMR:
    @staticmethod
    def modulated(rate, n=FS * 2):
        t = np.arange(n) / FS
        carrier = np.random.default_rng(0).standard_normal(n)
        return (1 + 0.9 * np.sin(2 * np.pi * rate * t)) * carrier

    def test_slow_modulation_scores_higher(self):
        assert metrics.srmr(self.modulated(4)) > metrics.srmr(self.modulated(64))

    def test_scale_invariant(self):
        x = self.modulated(8)
        assert metrics.srmr(5 * x) == pytest.approx(metrics.srmr(x), rel=1e-9)

    def test_erb_space(self):
        cfs = metrics.erb_space(125.0, 8000.0, 23)
        assert cfs.shape == (23,)
        assert cfs[-1] == pytest.approx(125.0)
        assert np.all(np.diff(cfs) < 0)

    def test_too_short(self):
        with pytest.raises(MetricError, match="at least"):
            metrics.srmr(np.ones(1000))

    def test_silent(self):
        with pytest.raises(MetricError):
            metrics.srmr(np.zeros(FS))


class TestScore:
    def test_reference_free(self, rng):
        rep = metrics.score(voiced(rng))
        assert rep.cd is None and rep.srmr > 0

    def test_identity_report(self, rng):
        x = voiced(rng)
        rep = metrics.score(x, x)
        assert rep.cd == 0.0 and rep.llr == 0.0 and rep.fwsegsnr_db == 35.0
        assert rep.clip_flags["fwsegsnr"] and not rep.clip_flags["cd"]
        assert rep.frame_counts["cd"] == rep.frame_counts["fwsegsnr"] > 0
