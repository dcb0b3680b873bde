import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wrnse import room
from wrnse.room import MixSpec, RoomError, RoomSpec


def free_field_room(distance, **kw):
    src = (5.0, 5.0, 2.0)
    return RoomSpec((10.0, 10.0, 4.0), 0.3, src, (src[0] + distance, src[1], src[2]), max_order=0, **kw)


class TestSampleRoom:
    @pytest.mark.parametrize("cls", ["small", "medium", "large"])
    def test_ranges(self, cls):
        spec = room.ROOM_CLASSES[cls]
        rng = np.random.default_rng(0)
        for _ in range(50):
            r = room.sample_room(cls, rng)
            for d, (lo, hi) in zip(r.dims, spec["dims"]):
                assert lo <= d <= hi
            assert spec["rt60"][0] <= r.rt60 <= spec["rt60"][1]
            assert room.MIN_DISTANCE <= r.distance <= spec["max_distance"] + 1e-9
            for p in (r.source_pos, r.mic_pos):
                assert all(room.WALL_MARGIN - 1e-12 <= c <= d - room.WALL_MARGIN + 1e-12 for c, d in zip(p, r.dims))

    def test_table_values(self):
        assert room.ROOM_CLASSES["small"]["dims"] == ((2, 6), (2, 6), (2.5, 3.5))
        assert room.ROOM_CLASSES["large"]["rt60"] == (0.6, 0.8)

    def test_deterministic(self):
        a = room.sample_room("medium", np.random.default_rng(9))
        b = room.sample_room("medium", np.random.default_rng(9))
        assert a == b

    def test_unknown_class(self):
        with pytest.raises(RoomError):
            room.sample_room("huge", np.random.default_rng(0))

    def test_position_validation(self):
        with pytest.raises(RoomError, match="outside"):
            RoomSpec((3, 3, 3), 0.2, (1, 1, 1), (4, 1, 1))

    def test_dict_round_trip(self):
        r = room.sample_room("small", np.random.default_rng(1))
        assert RoomSpec.from_dict(r.as_dict()) == r


class TestImageSourceRir:
    def test_free_field_exact_amplitude(self):
        # 0.686 m at 343 m/s is exactly 32 samples, so the sinc kernel reduces to one tap
        r = free_field_room(0.686)
        rir = room.image_source_rir(r, beta=0.5, highpass_hz=None)
        peak = int(np.argmax(np.abs(rir.taps)))
        assert peak == 32
        assert rir.taps[peak] == pytest.approx(1 / (4 * np.pi * 0.686), rel=1e-9)
        np.testing.assert_allclose(np.delete(rir.taps, peak), 0.0, atol=1e-12)

    def test_one_metre_delay(self):
        rir = room.image_source_rir(free_field_room(1.0), beta=0.5, highpass_hz=None)
        assert abs(int(np.argmax(np.abs(rir.taps))) - 46) <= 1
        assert rir.first_tap == math.floor(16000 / 343)

    @given(d=st.floats(0.5, 4.0))
    @settings(max_examples=25, deadline=None)
    def test_free_field_delay_property(self, d):
        rir = room.image_source_rir(free_field_room(d), beta=0.5)
        assert abs(int(np.argmax(np.abs(rir.taps))) - math.floor(d * 16000 / 343)) <= 1

    def test_length(self):
        r = room.sample_room("small", np.random.default_rng(2))
        assert room.image_source_rir(r).taps.shape[0] == math.ceil(1.25 * r.rt60 * 16000)

    def test_medium_rt60_0_3(self):
        rng = np.random.default_rng(4)
        r = room.sample_room("medium", rng)
        r = RoomSpec(r.dims, 0.3, r.source_pos, r.mic_pos, room_class="medium")
        est = room.schroeder_rt60(room.image_source_rir(r).taps)
        assert abs(est - 0.3) / 0.3 <= 0.2

    def test_decay_curve_monotone(self):
        rir = room.image_source_rir(room.sample_room("large", np.random.default_rng(5)))
        edc = room.energy_decay_curve(rir.taps)
        assert np.all(np.diff(edc) <= 1e-15)

    def test_sabine_clamp_flag(self):
        r = RoomSpec((3, 3, 3), 0.01, (1, 1, 1), (2, 2, 2))
        beta, clamped = room.reflection_coefficient(r, law="sabine")
        assert clamped and beta == pytest.approx(math.sqrt(0.01))

    def test_sabine_formula(self):
        r = RoomSpec((10, 8, 4), 0.6, (1, 1, 1), (2, 2, 2))
        beta, clamped = room.reflection_coefficient(r, law="sabine")
        alpha = 0.161 * 320 / (2 * (80 + 40 + 32) * 0.6)
        assert not clamped and beta == pytest.approx(math.sqrt(1 - alpha), rel=1e-12)

    def test_unknown_law(self):
        with pytest.raises(RoomError):
            room.reflection_coefficient(free_field_room(1.0), law="millington")


class TestMixing:
    def test_gain_formula(self):
        assert room.noise_gain(1.0, 1.0, 20.0) == pytest.approx(0.1)
        assert room.noise_gain(2.0, 2.0, 0.0) == pytest.approx(1.0)

    def test_identity_rir_snr_20(self):
        rng = np.random.default_rng(0)
        s = rng.standard_normal(4000)
        n = rng.standard_normal(4000)
        n *= np.sqrt(np.mean(s ** 2) / np.mean(n ** 2))
        mix = room.mix_components(s * 0.01, np.array([1.0]), n * 0.01, MixSpec(20.0), np.random.default_rng(1))
        assert mix.noise_gain == pytest.approx(0.1, rel=1e-12)

    @given(seed=st.integers(0, 2 ** 31), snr=st.floats(-5, 30))
    @settings(max_examples=30, deadline=None)
    def test_snr_contract(self, seed, snr):
        rng = np.random.default_rng(seed)
        s = rng.standard_normal(3000) * 0.1
        rir = np.r_[1.0, rng.standard_normal(50) * 0.1]
        mix = room.mix_components(s, rir, rng.standard_normal(2000), MixSpec(snr), rng)
        assert abs(mix.snr_db - snr) < 0.01

    def test_peak_normalization(self):
        rng = np.random.default_rng(3)
        mix = room.mix_components(rng.standard_normal(2000), np.array([1.0]), rng.standard_normal(2000),
                                  MixSpec(0.0), rng)
        assert np.max(np.abs(mix.noisy)) == pytest.approx(0.95)
        assert mix.peak_gain < 1.0

    def test_linear_in_speech_without_noise(self):
        rng = np.random.default_rng(4)
        s = rng.standard_normal(1000)
        h = rng.standard_normal(30)
        np.testing.assert_allclose(room.reverberate(3 * s, h), 3 * room.reverberate(s, h), atol=1e-12)

    def test_silent_inputs(self):
        rng = np.random.default_rng(0)
        with pytest.raises(RoomError):
            room.mix_components(np.zeros(100), np.array([1.0]), np.ones(100), MixSpec(10.0), rng)
        with pytest.raises(RoomError):
            room.mix_components(np.ones(100), np.array([1.0]), np.zeros(100), MixSpec(10.0), rng)

    def test_short_noise_is_looped(self):
        rng = np.random.default_rng(0)
        mix = room.mix_components(rng.standard_normal(1000) * 0.1, np.array([1.0]), rng.standard_normal(300),
                                  MixSpec(10.0), rng)
        assert mix.noise.shape[0] == 1000

    def test_non_finite_snr(self):
        with pytest.raises(RoomError):
            MixSpec(float("inf"))
