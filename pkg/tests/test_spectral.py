import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probelab.noise import InsufficientDataError
from probelab.probing import AccessTrace
from probelab.spectral import binarize, score_peak, welch_psd


def make_trace(times, duration, start=0):
    return AccessTrace(detections=list(times), duration=duration, set_id=(0, 0), start=start)


def test_binarize_empty_trace_all_zero():
    out = binarize(make_trace([], 10_000), sample_period=500)
    assert out.sum() == 0 and len(out) == 20


def test_binarize_single_event_single_sample():
    out = binarize(make_trace([1250], 10_000), sample_period=500)
    assert out.sum() == 1 and out[2] == 1


def test_binarize_periodic_spacing():
    period, T = 5000, 500
    times = list(range(0, 100_000, period))
    out = binarize(make_trace(times, 100_000), sample_period=T)
    ones = np.nonzero(out)[0]
    assert (np.diff(ones) == period // T).all()


def test_binarize_respects_trace_start_offset():
    out = binarize(make_trace([10_500, 11_000], 2_000, start=10_000), sample_period=500)
    assert out.tolist() == [0, 1, 1, 0]


@settings(max_examples=40)
@given(st.integers(min_value=1, max_value=5000), st.integers(min_value=1, max_value=200))
def test_binarize_length_property(duration, period):
    out = binarize(make_trace([], duration), sample_period=period)
    assert len(out) == math.ceil(duration / period)


def test_welch_requires_enough_samples():
    with pytest.raises(InsufficientDataError):
        welch_psd(np.zeros(100), segment_length=256)


def test_welch_bin_count_invariant():
    psd = welch_psd(np.random.default_rng(0).normal(size=4096), segment_length=256)
    assert len(psd.power) == 129
    assert (psd.power >= 0).all()


def test_welch_sinusoid_peak_at_expected_bin():
    fs, seg = 4e6, 256
    f0 = 20 * fs / seg  # exactly bin-centered
    t = np.arange(8192) / fs
    x = np.sin(2 * np.pi * f0 * t)
    psd = welch_psd(x, segment_length=seg, sample_rate=fs)
    assert int(np.argmax(psd.power)) == 20


def test_welch_white_noise_flat():
    x = np.random.default_rng(3).normal(size=2**14)
    psd = welch_psd(x, segment_length=256, sample_rate=1.0)
    body = psd.power[2:-1]
    assert body.max() / body.mean() < 10.0


def test_welch_square_wave_odd_harmonics():
    fs, seg = 1.0, 256
    period = 16  # base frequency bin 16 at seg 256
    x = np.tile([1.0] * (period // 2) + [0.0] * (period // 2), 2**13 // period)
    psd = welch_psd(x, segment_length=seg, sample_rate=fs)
    base_bin = seg // period
    p1 = psd.power[base_bin]
    p2 = psd.power[2 * base_bin]
    p3 = psd.power[3 * base_bin]
    assert p1 > 50 * p2 and p3 > 10 * p2  # even harmonic suppressed


def test_welch_matches_direct_dft_periodogram_single_segment():
    """Independent oracle: hand-rolled windowed periodogram of one segment."""
    rng = np.random.default_rng(5)
    seg = 128
    x = rng.normal(size=seg)
    fs = 2.0
    psd = welch_psd(x, segment_length=seg, sample_rate=fs)
    w = np.hanning(seg)
    d = (x - x.mean()) * w
    ref = np.abs(np.fft.rfft(d)) ** 2 / (fs * (w * w).sum())
    ref[1:-1] *= 2
    assert np.max(np.abs(psd.power - ref)) < 1e-9 * max(1.0, np.max(ref))


def test_welch_parseval_total_power_tracks_variance():
    rng = np.random.default_rng(8)
    x = rng.normal(size=2**15)
    fs = 1.0
    psd = welch_psd(x, segment_length=512, sample_rate=fs)
    total = psd.power.sum() * psd.bin_width
    assert abs(total - x.var()) / x.var() < 0.05


def test_score_peak_victim_period_case():
    """A 4850-cycle access period on the 2 GHz clock (with the victim's
    characteristic timing jitter) peaks within one bin of 0.41 MHz."""
    clock_hz, sample_period = 2e9, 500
    fs = clock_hz / sample_period
    rng = np.random.default_rng(2)
    times, t = [], 0
    while t < 1_000_000:
        times.append(t)
        t += 4850 + int(rng.integers(-500, 501))
    samples = binarize(make_trace(times, 1_000_000), sample_period)
    psd = welch_psd(samples, segment_length=256, sample_rate=fs)
    f_expected = clock_hz / 4850
    score = score_peak(psd, f_expected)
    assert score > 8.0
    peak_bin = int(np.argmax(psd.power[2:])) + 2
    assert abs(peak_bin - 0.41e6 / psd.bin_width) <= 1.0 + 0.5


def test_score_peak_noise_only_below_threshold():
    rng = np.random.default_rng(11)
    clock_hz, sample_period = 2e9, 500
    fs = clock_hz / sample_period
    # memoryless arrivals at the cloud rate
    gaps = rng.exponential(scale=2e6 / 11.5, size=64)
    times = np.cumsum(gaps).astype(int)
    times = times[times < 1_000_000].tolist()
    samples = binarize(make_trace(times, 1_000_000), sample_period)
    psd = welch_psd(samples, segment_length=256, sample_rate=fs)
    assert score_peak(psd, clock_hz / 4850) < 8.0


def test_score_peak_zero_trace_scores_zero():
    samples = np.zeros(2048)
    psd = welch_psd(samples, segment_length=256, sample_rate=4e6)
    assert score_peak(psd, 0.41e6) == 0.0


def test_score_peak_rejects_out_of_band_frequency():
    psd = welch_psd(np.zeros(1024), segment_length=256, sample_rate=4e6)
    with pytest.raises(ValueError):
        score_peak(psd, 3e6)
