import numpy as np
import pytest

from roomsense import features as F
from roomsense.features import (
    build_gammatone_bank, gammatone_filter, gammatone_spectrogram,
    frame_count, featurize, wrap_phase, phase_derivative, phase_features,
    erb_hz, hz_to_erbscale, erbscale_to_hz,
)

FS = 16000


class TestErbScale:
    def test_round_trip(self):
        for f in (50.0, 500.0, 1000.0, 2000.0):
            assert erbscale_to_hz(hz_to_erbscale(f)) == pytest.approx(f, rel=1e-10)

    def test_bandwidth_increases_with_frequency(self):
        assert erb_hz(2000.0) > erb_hz(500.0) > erb_hz(50.0)


class TestBank:
    def test_grid_layout(self):
        bank = build_gammatone_bank()
        centers = bank.center_freqs_hz
        assert centers.size == 20
        assert centers[0] == pytest.approx(50.0)
        assert centers[-1] == pytest.approx(2000.0)
        assert np.sum(centers < 500.0) == 5
        assert centers[5] == 500.0
        assert np.all(np.diff(centers) > 0)

    def test_unit_gain_at_center(self):
        # a real cosine carries amplitude 1/2 at +fc, so the complex
        # band output settles at magnitude 0.5 when the filter gain is 1
        bank = build_gammatone_bank()
        t = np.arange(int(FS * 0.5)) / FS
        for idx in (0, 5, 12, 19):
            fc = bank.center_freqs_hz[idx]
            tone = np.cos(2 * np.pi * fc * t)
            out = gammatone_filter(bank, tone)[idx]
            tail = np.abs(out[int(FS * 0.3):])
            assert tail.mean() == pytest.approx(0.5, rel=0.01)


class TestFraming:
    def test_frame_counts(self):
        assert frame_count(64000) == 1997
        assert frame_count(32000) == 997

    def test_block_shape(self):
        rng = np.random.default_rng(0)
        block = featurize(rng.standard_normal(32000))
        assert block.values.shape == (30, 997)
        assert block.values.dtype == np.float32

    def test_four_second_shape(self):
        rng = np.random.default_rng(1)
        block = featurize(rng.standard_normal(64000))
        assert block.values.shape == (30, 1997)


class TestPhase:
    def test_wrap_range(self):
        x = np.linspace(-10, 10, 1001)
        w = wrap_phase(x)
        assert np.all(w > -np.pi - 1e-12)
        assert np.all(w <= np.pi + 1e-12)
        # wrapping is exact modulo 2*pi
        np.testing.assert_allclose(np.cos(w), np.cos(x), atol=1e-9)

    def test_phase_rows_bounded(self):
        rng = np.random.default_rng(2)
        vals = featurize(rng.standard_normal(16000)).values
        phase = vals[20:25]
        assert np.all(phase > -np.pi - 1e-6)
        assert np.all(phase <= np.pi + 1e-6)

    def test_derivative_first_row_copies_second(self):
        rng = np.random.default_rng(3)
        spec = gammatone_spectrogram(rng.standard_normal(16000))
        phase = phase_features(spec)
        deriv = phase_derivative(phase)
        np.testing.assert_array_equal(deriv[0], deriv[1])
        assert deriv.shape == phase.shape


class TestFeaturize:
    def test_deterministic(self):
        rng = np.random.default_rng(4)
        audio = rng.standard_normal(16000)
        a = featurize(audio).values
        b = featurize(audio).values
        np.testing.assert_array_equal(a, b)

    def test_silence_hits_log_floor(self):
        vals = featurize(np.zeros(16000)).values
        np.testing.assert_allclose(vals[:20], np.log(F.LOG_FLOOR), atol=1e-6)
        # angle of zero is zero by convention
        np.testing.assert_allclose(vals[20:25], 0.0, atol=1e-12)

    def test_tone_energy_in_matching_band(self):
        bank = build_gammatone_bank()
        t = np.arange(16000) / FS
        tone = np.cos(2 * np.pi * bank.center_freqs_hz[10] * t)
        vals = featurize(tone).values
        means = vals[:20].mean(axis=1)
        assert np.argmax(means) == 10
