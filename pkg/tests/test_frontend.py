import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from wrnse import frontend
from wrnse.audio import AudioError, Waveform, load_waveform, write_waveform
from wrnse.frontend import FeatureError, FrameSpec


def dft_matrix(n):
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def dct2_ortho_matrix(n):
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * k * (2 * i + 1) / (2 * n))
    m[0] /= np.sqrt(2.0)
    return m


@pytest.fixture
def speech():
    rng = np.random.default_rng(3)
    t = np.arange(16000) / 16000
    return Waveform(0.3 * np.sin(2 * np.pi * 220 * t) * (1 + 0.5 * np.sin(2 * np.pi * 3 * t))
                    + 0.01 * rng.standard_normal(16000))


class TestLoadWaveform:
    def test_one_second_mono(self, tmp_path):
        p = tmp_path / "a.wav"
        wavfile.write(p, 16000, (np.ones(16000) * 1000).astype(np.int16))
        w = load_waveform(p)
        assert w.sample_rate == 16000
        assert len(w) == 16000

    def test_48k_resampled(self, tmp_path):
        p = tmp_path / "b.wav"
        wavfile.write(p, 48000, np.zeros(48000, dtype=np.float32))
        assert len(load_waveform(p)) == 16000

    def test_stereo_antiphase_averages_to_zero(self, tmp_path):
        c = (np.random.default_rng(0).standard_normal(1600) * 3000).astype(np.int16)
        p = tmp_path / "s.wav"
        wavfile.write(p, 16000, np.stack([c, -c], axis=1))
        np.testing.assert_array_equal(load_waveform(p).samples, 0.0)

    @pytest.mark.parametrize("dtype,scale", [(np.uint8, None), (np.int16, 32768.0), (np.int32, 2.0 ** 31)])
    def test_integer_formats(self, tmp_path, dtype, scale):
        p = tmp_path / "i.wav"
        if dtype is np.uint8:
            data = np.array([128, 192, 64] * 100, dtype=np.uint8)
            expected = (data.astype(float) - 128) / 128
        else:
            data = np.array([0, 1 << 8, -(1 << 8)] * 100).astype(dtype) * (1 if dtype is np.int16 else 1 << 16)
            expected = data / scale
        wavfile.write(p, 16000, data)
        np.testing.assert_allclose(load_waveform(p).samples, expected, atol=1e-12)

    def test_missing_and_empty(self, tmp_path):
        with pytest.raises(AudioError, match="not found"):
            load_waveform(tmp_path / "nope.wav")
        p = tmp_path / "e.wav"
        wavfile.write(p, 16000, np.zeros(0, dtype=np.int16))
        with pytest.raises(AudioError, match="no audio"):
            load_waveform(p)

    def test_non_finite_rejected(self):
        with pytest.raises(AudioError):
            Waveform(np.array([0.0, np.nan]))

    def test_float_round_trip(self, tmp_path, speech):
        write_waveform(tmp_path / "f.wav", speech, float32=True)
        np.testing.assert_allclose(load_waveform(tmp_path / "f.wav").samples, speech.samples, atol=1e-7)


class TestFraming:
    def test_frame_counts(self):
        assert frontend.frame_signal(np.zeros(16000), FrameSpec(25)).shape == (98, 400)
        assert frontend.frame_signal(np.zeros(400), FrameSpec(25)).shape == (1, 400)

    def test_ones_give_window(self):
        frames = frontend.frame_signal(np.ones(400), FrameSpec(25))
        np.testing.assert_array_equal(frames[0], frontend.hamming(400))

    def test_periodic_hamming(self):
        n = np.arange(400)
        np.testing.assert_allclose(frontend.hamming(400), 0.54 - 0.46 * np.cos(2 * np.pi * n / 400), atol=1e-15)

    def test_short_signal_names_minimum(self):
        with pytest.raises(FeatureError, match="1200"):
            frontend.extract_features(np.zeros(1000))

    def test_bad_window(self):
        with pytest.raises(FeatureError):
            FrameSpec(30)

    @given(n=st.integers(1200, 6000), w=st.sampled_from([25, 50, 75]))
    @settings(max_examples=40, deadline=None)
    def test_frame_count_formula(self, n, w):
        spec = FrameSpec(w)
        T = frontend.frame_signal(np.zeros(n), spec).shape[0]
        assert T == (n - spec.window_len) // spec.hop_len + 1


class TestFFTMagnitude:
    def test_zero_and_impulse(self):
        np.testing.assert_array_equal(frontend.fft_magnitude(np.zeros(400)), 0.0)
        delta = np.zeros(512)
        delta[0] = 1.0
        np.testing.assert_allclose(frontend.fft_magnitude(delta), 1.0, atol=1e-15)

    def test_cosine_bin_32_against_direct_dft(self):
        x = np.cos(2 * np.pi * 32 * np.arange(512) / 512)
        mag = frontend.fft_magnitude(x)
        oracle = np.abs(dft_matrix(512) @ x)
        np.testing.assert_allclose(mag, oracle, atol=1e-9)
        assert mag[32] == pytest.approx(256.0) and mag[480] == pytest.approx(256.0)
        assert np.max(np.delete(mag, [32, 480])) < 1e-9

    def test_fold_matches_long_dft_decimation(self):
        # folding modulo 512 equals sampling the 1200-point DTFT at 512 points
        x = np.random.default_rng(1).standard_normal(1200)
        n = np.arange(1200)
        k = np.arange(512)[:, None]
        oracle = np.abs(np.exp(-2j * np.pi * k * n / 512) @ x)
        np.testing.assert_allclose(frontend.fft_magnitude(x), oracle, rtol=1e-9, atol=1e-9)

    @given(seed=st.integers(0, 2 ** 32 - 1), scale=st.floats(1e-3, 1e3), n=st.integers(1, 512))
    @settings(max_examples=30, deadline=None)
    def test_parseval(self, seed, scale, n):
        x = np.zeros(512)
        x[:n] = scale * np.random.default_rng(seed).uniform(-1, 1, n)
        lhs = np.sum(frontend.fft_magnitude(x) ** 2)
        assert lhs == pytest.approx(512 * np.sum(x ** 2), rel=1e-9, abs=1e-12)


class TestMelAndCepstrum:
    def test_zero_magnitude_floor(self):
        out = frontend.mel_filterbank(np.zeros(512), 32)
        np.testing.assert_allclose(out, np.log(1e-10))

    @pytest.mark.parametrize("bands", [32, 50, 100])
    def test_flat_magnitude_gives_weight_sums(self, bands):
        # independent triangle construction over bins 0..256
        mel = lambda f: 2595 * np.log10(1 + f / 700)
        inv = lambda m: 700 * (10 ** (m / 2595) - 1)
        edges = inv(np.linspace(0, mel(8000), bands + 2))
        freqs = np.arange(257) * 16000 / 512
        sums = []
        for b in range(bands):
            lo, mid, hi = edges[b:b + 3]
            w = [max(0.0, min((f - lo) / (mid - lo), (hi - f) / (hi - mid))) for f in freqs]
            sums.append(sum(w))
        out = frontend.mel_filterbank(np.ones(512), bands)
        assert out.shape == (bands,)
        np.testing.assert_allclose(out, np.log(np.maximum(sums, 1e-10)), rtol=1e-12)

    def test_unsupported_band_count(self):
        with pytest.raises(FeatureError):
            frontend.mel_filterbank(np.ones(512), 40)

    def test_reads_only_lower_half(self):
        mag = np.ones(512)
        mag2 = mag.copy()
        mag2[257:] = 99.0
        np.testing.assert_array_equal(frontend.mel_filterbank(mag, 50), frontend.mel_filterbank(mag2, 50))

    def test_cepstrum_constant_and_zero(self):
        out = frontend.cepstrum(np.full(32, 2.5))
        np.testing.assert_allclose(out, np.r_[2.5 * np.sqrt(32), np.zeros(31)], atol=1e-12)
        np.testing.assert_array_equal(frontend.cepstrum(np.zeros(50)), 0.0)

    def test_cepstrum_unit_vector_is_matrix_column(self):
        e0 = np.zeros(32)
        e0[0] = 1.0
        np.testing.assert_allclose(frontend.cepstrum(e0), dct2_ortho_matrix(32)[:, 0], atol=1e-14)

    @given(st.lists(st.floats(-20, 20), min_size=100, max_size=100))
    @settings(max_examples=25, deadline=None)
    def test_cepstrum_matches_matrix(self, values):
        x = np.array(values)
        np.testing.assert_allclose(frontend.cepstrum(x), dct2_ortho_matrix(100) @ x, atol=1e-9)


class TestExtractFeatures:
    def test_shape_and_layout(self, speech):
        block = frontend.extract_features(speech)
        assert block.frames.shape == (93, 1900)
        assert sum(g.dim for g in block.layout) == 1900
        assert [(g.source, g.window_ms, g.dim) for g in block.layout[:3]] == [
            ("fft", 25, 512), ("fft", 50, 512), ("fft", 75, 512)]

    def test_normalized_moments(self, speech):
        f = frontend.extract_features(speech).frames
        np.testing.assert_allclose(f.mean(axis=0), 0.0, atol=1e-6)
        var = f.var(axis=0)
        live = var > 0
        np.testing.assert_allclose(var[live], 1.0, atol=1e-4)

    def test_constant_channel_is_zero(self):
        block = frontend.FeatureBlock(np.c_[np.ones(10), np.arange(10.0)])
        out, _, _ = frontend.normalize(block.frames)
        np.testing.assert_array_equal(out[:, 0], 0.0)

    def test_deterministic(self, speech):
        a = frontend.extract_features(speech).frames
        b = frontend.extract_features(Waveform(speech.samples.copy())).frames
        np.testing.assert_array_equal(a, b)

    def test_amplitude_invariance_after_normalization(self, speech):
        a = frontend.extract_features(speech)
        b = frontend.extract_features(Waveform(2.0 * speech.samples))
        for src in ("fft", "mel", "cep"):
            for w in (25, 50, 75):
                np.testing.assert_allclose(a.group(src, w), b.group(src, w), atol=1e-6)

    def test_normalization_idempotent(self, speech):
        f = frontend.extract_features(speech).frames
        again, _, _ = frontend.normalize(f)
        assert np.max(np.abs(again - f)) <= 1e-9

    def test_layout_round_trip(self, speech):
        block = frontend.extract_features(speech)
        rebuilt = np.concatenate(list(block.split().values()), axis=1)
        np.testing.assert_array_equal(rebuilt, block.frames)

    def test_rows_share_grid(self, speech):
        raw = frontend.extract_features(speech, normalize_block=False)
        t = 17
        seg = speech.samples[160 * t:160 * t + 800] * frontend.hamming(800)
        np.testing.assert_allclose(raw.group("fft", 50)[t], frontend.fft_magnitude(seg), rtol=1e-12)

    def test_feature_dump_round_trip(self, tmp_path, speech):
        block = frontend.extract_features(speech)
        frontend.write_feature_block(tmp_path / "x.feat", block)
        back = frontend.read_feature_block(tmp_path / "x.feat")
        np.testing.assert_array_equal(back.frames, block.frames)
        assert back.layout == block.layout
