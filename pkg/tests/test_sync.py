import numpy as np
import pytest

from uvtdoa import Scene, estimate_start, generate_pilot, ranges, render_frame, synchronize_frame
from uvtdoa.channel import pilot_rate_profile
from uvtdoa.scene import SPEED_OF_LIGHT
from uvtdoa.sync import (
    SyncError,
    SyncResult,
    WindowOverrunError,
    arrival_times,
    correlate,
    pilot_from_text,
    pilot_to_text,
    slot_search_window,
)

from conftest import make_budget, make_signal


def brute_force_scores(counts, seq, n, window):
    """Naive double-loop correlation oracle."""
    out = []
    for t in window:
        s = 0
        for i in range(len(seq)):
            u = int(counts[t + n * i : t + n * (i + 1)].sum())
            s += (2 * int(seq[i]) - 1) * u
        out.append(s)
    return np.array(out, dtype=np.int64)


class TestGeneratePilot:
    def test_deterministic(self):
        a = generate_pilot(256, seed=5)
        b = generate_pilot(256, seed=5)
        assert np.array_equal(a, b)

    def test_balance_window(self):
        for seed in range(8):
            seq = generate_pilot(256, seed)
            assert abs(int(seq.sum()) - 128) <= 16

    def test_small_length_autocorrelation(self):
        # Exhaustive check at L=4: cyclic +/-1 autocorrelation sidelobes must
        # stay below the mainlobe for every shift.
        for seed in range(16):
            seq = generate_pilot(4, seed)
            s = 2 * seq - 1
            main = int(np.dot(s, s))
            for shift in range(1, 4):
                side = int(np.dot(s, np.roll(s, shift)))
                assert side < main

    def test_rejects_short_lengths(self):
        with pytest.raises(SyncError):
            generate_pilot(1, 0)

    def test_text_round_trip(self):
        seq = generate_pilot(64, 2)
        assert np.array_equal(pilot_from_text(pilot_to_text(seq)), seq)


class TestCorrelate:
    def test_all_zero_counts(self):
        seq = generate_pilot(8, 1)
        scores = correlate(np.zeros(200, dtype=np.int64), seq, 4, range(0, 64))
        assert np.array_equal(scores, np.zeros(64, dtype=np.int64))

    def test_noiseless_peak_at_true_start(self):
        seq = generate_pilot(8, 1)
        n, t0 = 4, 17
        counts = np.zeros(200, dtype=np.int64)
        for i, bit in enumerate(seq):
            if bit:
                counts[t0 + n * i : t0 + n * (i + 1)] = 1000
        window = range(0, 64)
        scores = correlate(counts, seq, n, window)
        assert np.array_equal(scores, brute_force_scores(counts, seq, n, window))
        assert estimate_start(scores) == t0

    def test_random_trace_matches_brute_force(self):
        rng = np.random.default_rng(42)
        seq = generate_pilot(8, 3)
        counts = rng.poisson(2.0, size=120)
        window = range(0, 64)
        scores = correlate(counts, seq, 4, window)
        assert np.array_equal(scores, brute_force_scores(counts, seq, 4, window))

    def test_window_overrun(self):
        seq = generate_pilot(8, 1)
        with pytest.raises(WindowOverrunError):
            correlate(np.zeros(60, dtype=np.int64), seq, 4, range(0, 64))

    def test_linearity(self):
        rng = np.random.default_rng(11)
        seq = generate_pilot(8, 1)
        a = rng.poisson(1.0, size=120)
        b = rng.poisson(3.0, size=120)
        w = range(0, 40)
        assert np.array_equal(
            correlate(a + b, seq, 4, w),
            correlate(a, seq, 4, w) + correlate(b, seq, 4, w),
        )

    def test_shift_covariance(self):
        rng = np.random.default_rng(5)
        seq = generate_pilot(16, 1)
        n = 4
        base = np.zeros(400, dtype=np.int64)
        t0 = 30
        for i, bit in enumerate(seq):
            if bit:
                base[t0 + n * i : t0 + n * (i + 1)] = rng.poisson(60, size=n)
        w = range(0, 200)
        ref = estimate_start(correlate(base, seq, n, w))
        for k in (1, 5, 17):
            shifted = np.roll(base, k)
            assert estimate_start(correlate(shifted, seq, n, w)) == ref + k


class TestEstimateStart:
    def test_argmax(self):
        assert estimate_start([0, 5, 3]) == 1

    def test_tie_breaks_to_smallest_index(self):
        assert estimate_start([7, 7, 2]) == 0

    def test_empty_rejected(self):
        with pytest.raises(SyncError):
            estimate_start([])


class TestDetectionProbability:
    def test_high_rate_zero_error_probability(self):
        # With no background and a strong signal the start estimate should be
        # exact in at least 99% of trials.
        lam_s, length, n = 50.0, 256, 100
        seq = generate_pilot(length, 1)
        half = 50
        total = 2 * half + length * n + 1
        rng = np.random.default_rng(999)
        hits = 0
        trials = 1000
        for _ in range(trials):
            rate = pilot_rate_profile(seq, n, lam_s, 0.0, float(half), total)
            counts = rng.poisson(rate)
            start = estimate_start(correlate(counts, seq, n, range(0, 2 * half + 1)))
            hits += start == half
        assert hits / trials >= 0.99


class TestArrivalTimes:
    def test_zero_chips(self):
        params = make_signal(length=16, n=4, slot_s=40e-6)
        t_a, t_b, t_c = arrival_times(SyncResult(0, 0, 0, (1.0, 1.0, 1.0)), params)
        assert (t_b - t_a, t_c - t_b) == (0.0, 0.0)

    def test_linear_scaling(self):
        params = make_signal(length=16, n=100, rate_hz=1e6, slot_s=300e-6)
        t_a, t_b, t_c = arrival_times(SyncResult(0, 10, 0, (1.0, 1.0, 1.0)), params)
        assert t_b - t_a == pytest.approx(100e-9, rel=1e-12)

    def test_end_to_end_flight_time_difference(self):
        # Full frame with strong signal and no clock error: each anchor's
        # arrival estimate lands within half a chip of its flight time, so
        # the recovered differences land within one chip (two half-chip
        # quantizations) of the geometric truth.
        params = make_signal(length=64, n=20, rate_hz=1e6, slot_s=200e-6).with_rates(
            80.0, 80.0, 80.0
        )
        budget = make_budget(lambda_b=0.5)
        scene = Scene(tx_a=(0, 0), tx_b=(75.6, 0), tx_c=(32.2, 76.6), rx_true=(30.0, 22.0))
        trace = render_frame(scene, params, budget, (0, 0, 0), 0.0, 77)
        sync = synchronize_frame(trace, params)
        arrivals = arrival_times(sync, params)
        flights = [r / SPEED_OF_LIGHT for r in ranges(scene, scene.rx_true)]
        for est, truth in zip(arrivals, flights):
            assert abs(est - truth) <= params.chip_s / 2
        t_a, t_b, t_c = arrivals
        assert abs((t_b - t_a) - (flights[1] - flights[0])) <= params.chip_s
        assert abs((t_c - t_b) - (flights[2] - flights[1])) <= params.chip_s


class TestSlotWindow:
    def test_window_bounds(self):
        params = make_signal(length=16, n=4, slot_s=40e-6)
        w = slot_search_window(params, 1)
        assert w.start == params.slot_chips
        assert w.stop - 1 == 2 * params.slot_chips - params.pilot_chips

    def test_guard_too_large(self):
        params = make_signal(length=16, n=4, slot_s=17e-6)
        with pytest.raises(SyncError):
            slot_search_window(params, 0, guard_chips=10_000)
