import numpy as np
import pytest

from roomsense.rirgen import (
    ShoeboxRoom, InsufficientDecayError, simulate_rir, sabine_rt60,
    schroeder_decay, schroeder_decay_samples, estimate_rt60,
    sample_room_geometry, EnergyDecayCurve,
)

FS = 16000


def make_room(**kw):
    defaults = dict(length_m=5.0, width_m=4.0, height_m=3.0, absorption=0.3)
    defaults.update(kw)
    return ShoeboxRoom(**defaults)


class TestShoeboxRoom:
    def test_volume_and_surface(self):
        room = make_room()
        assert room.volume_m3 == pytest.approx(60.0)
        assert room.surface_m2 == pytest.approx(2 * (20 + 15 + 12))

    def test_rejects_bad_dimensions(self):
        with pytest.raises(ValueError):
            make_room(length_m=-1.0)
        with pytest.raises(ValueError):
            make_room(absorption=0.0)
        with pytest.raises(ValueError):
            make_room(absorption=1.5)


class TestSabine:
    def test_hand_value(self):
        # 0.161 * 60 / (0.3 * 94)
        assert sabine_rt60(60.0, 94.0, 0.3) == pytest.approx(0.34255, rel=1e-4)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            sabine_rt60(0.0, 94.0, 0.3)


class TestSimulateRir:
    def test_direct_path_dominates_at_high_absorption(self):
        # absorption 0.99 leaves reflections ~100x below the direct spike
        room = make_room(absorption=0.99, max_image_order=8)
        src, mic = [1.0, 1.0, 1.0], [4.0, 3.0, 2.0]
        d = float(np.linalg.norm(np.subtract(mic, src)))
        rir = simulate_rir(room, src, mic)
        peak = int(np.argmax(np.abs(rir.samples)))
        assert peak == int(round(FS * d / 343.0))
        assert rir.samples[peak] == pytest.approx(1.0 / d, rel=1e-6)

    def test_positions_validated(self):
        room = make_room()
        with pytest.raises(ValueError):
            simulate_rir(room, [0.0, 1.0, 1.0], [2.0, 2.0, 2.0])
        with pytest.raises(ValueError):
            simulate_rir(room, [1.0, 1.0, 1.0], [5.0, 2.0, 2.0])

    def test_deterministic_and_labeled(self):
        room = make_room(max_image_order=12)
        a = simulate_rir(room, [1.2, 1.1, 1.0], [3.5, 2.8, 2.1])
        b = simulate_rir(room, [1.2, 1.1, 1.0], [3.5, 2.8, 2.1])
        np.testing.assert_array_equal(a.samples, b.samples)
        assert a.volume_m3 == pytest.approx(60.0)
        assert a.rt60_s > 0


class TestSchroeder:
    def test_edc_starts_at_zero_and_decreases(self):
        room = make_room(max_image_order=12)
        rir = simulate_rir(room, [1.2, 1.1, 1.0], [3.5, 2.8, 2.1])
        edc = schroeder_decay(rir)
        assert edc.values_db[0] == 0.0
        finite = edc.values_db[np.isfinite(edc.values_db)]
        assert np.all(np.diff(finite) <= 1e-12)

    @pytest.mark.parametrize("t60", [0.3, 1.0, 3.0])
    def test_exponential_decay_recovered(self, t60):
        # e^{-6.91 t / T60} amplitude envelope has an exact 60 dB decay time
        errs = []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            n = int(FS * 0.7 * t60)
            t = np.arange(n) / FS
            h = np.exp(-6.91 * t / t60) * rng.standard_normal(n)
            est = estimate_rt60(schroeder_decay_samples(h, FS))
            errs.append(abs(est - t60) / t60)
        assert np.mean(errs) < 0.05

    def test_insufficient_decay_raises(self):
        with pytest.raises(InsufficientDecayError):
            estimate_rt60(EnergyDecayCurve(np.array([0.0, -1.0, -2.0]), FS))

    def test_zero_rir_rejected(self):
        with pytest.raises(ValueError):
            schroeder_decay_samples(np.zeros(100), FS)


class TestGeometry:
    def test_placement_inside_and_deterministic(self):
        room = make_room()
        src1, recs1 = sample_room_geometry(room, n_receivers=5, seed=3)
        src2, recs2 = sample_room_geometry(room, n_receivers=5, seed=3)
        np.testing.assert_array_equal(src1, src2)
        assert len(recs1) == 5
        for pos in [src1] + recs1:
            assert np.all(pos > 0) and np.all(pos < room.dims)
        for a, b in zip(recs1, recs2):
            np.testing.assert_array_equal(a, b)

    def test_distinct_seeds_move_the_source(self):
        room = make_room()
        src1, _ = sample_room_geometry(room, seed=1)
        src2, _ = sample_room_geometry(room, seed=2)
        assert not np.array_equal(src1, src2)
