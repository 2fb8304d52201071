"""Frequency-domain target-set identification.

Detection timestamps from a monitored set are binarized into a uniformly
sampled 0/1 signal, its power spectral density is estimated with Welch's
method (averaged Hann-windowed, mean-removed, 50%-overlapping periodograms),
and a set is flagged as the victim's when the spectrum shows a dominant peak
at the victim's expected access frequency. The scanner sweeps candidate sets
round-robin until a trace passes the count pre-filter, the spectral score,
and an optional decoded-bits degeneracy check.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .noise import InsufficientDataError
from .probing import PARALLEL, AccessTrace, Monitor, MonitorStrategy
from .pruning import EvictionSet
from .timing import AttackOracle


def binarize(trace, sample_period: int, duration: int | None = None) -> np.ndarray:
    """0/1 samples: sample i is 1 iff a detection falls in [i*T, (i+1)*T).

    `trace` is an AccessTrace (timestamps taken relative to its start) or a
    plain sequence of already-relative timestamps, in which case `duration`
    is required.
    """
    if sample_period <= 0:
        raise ValueError("sample_period must be positive")
    if isinstance(trace, AccessTrace):
        times = np.asarray(trace.detections, dtype=np.int64) - trace.start
        duration = trace.duration
    else:
        if duration is None:
            raise ValueError("duration required for raw timestamp sequences")
        times = np.asarray(list(trace), dtype=np.int64)
    n = max(1, -(-duration // sample_period))
    out = np.zeros(n, dtype=np.int8)
    if len(times):
        idx = times // sample_period
        idx = idx[(idx >= 0) & (idx < n)]
        out[idx] = 1
    return out


@dataclass
class PsdEstimate:
    freqs: np.ndarray
    power: np.ndarray
    sample_rate: float
    segment_length: int
    overlap: float

    def __post_init__(self) -> None:
        assert len(self.power) == self.segment_length // 2 + 1
        assert (self.power >= 0).all()

    @property
    def bin_width(self) -> float:
        return self.sample_rate / self.segment_length

    def rows(self):
        return [(float(f), float(p)) for f, p in zip(self.freqs, self.power)]


def welch_psd(
    samples,
    segment_length: int = 256,
    overlap: float = 0.5,
    sample_rate: float = 1.0,
) -> PsdEstimate:
    """Mean of one-sided periodograms over overlapping Hann-windowed segments."""
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < segment_length:
        raise InsufficientDataError(
            f"need at least {segment_length} samples, got {len(x)}"
        )
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must be in [0, 1)")
    window = np.hanning(segment_length)
    scale = 1.0 / (sample_rate * (window * window).sum())
    hop = max(1, int(round(segment_length * (1.0 - overlap))))
    acc = np.zeros(segment_length // 2 + 1)
    count = 0
    for start in range(0, len(x) - segment_length + 1, hop):
        seg = x[start : start + segment_length]
        seg = (seg - seg.mean()) * window
        spec = np.abs(np.fft.rfft(seg)) ** 2 * scale
        spec[1:-1] *= 2.0  # one-sided: fold negative frequencies
        acc += spec
        count += 1
    power = acc / count
    freqs = np.fft.rfftfreq(segment_length, d=1.0 / sample_rate)
    return PsdEstimate(
        freqs=freqs,
        power=power,
        sample_rate=sample_rate,
        segment_length=segment_length,
        overlap=overlap,
    )


def score_peak(
    psd: PsdEstimate,
    f_expected: float,
    tolerance_bins: int = 1,
    harmonics: int = 3,
) -> float:
    """Peak power near the expected frequency (and harmonics) over the floor.

    Score = max power within +-tolerance_bins of f, 2f, ..., (1+harmonics)f,
    divided by the median power of the remaining bins (DC region excluded).
    An all-zero spectrum scores 0.
    """
    if not 0 < f_expected <= psd.sample_rate / 2:
        raise ValueError("expected frequency outside the Nyquist range")
    power = psd.power
    if not power.any():
        return 0.0
    n = len(power)
    signal = np.zeros(n, dtype=bool)
    for h in range(1, harmonics + 2):
        center = int(round(h * f_expected / psd.bin_width))
        if center >= n:
            break
        lo = max(0, center - tolerance_bins)
        signal[lo : min(n, center + tolerance_bins + 1)] = True
    floor_mask = ~signal
    floor_mask[:2] = False  # DC and first bin carry the train's rate offset
    floor = float(np.median(power[floor_mask])) if floor_mask.any() else 0.0
    peak = float(power[signal].max()) if signal.any() else 0.0
    if floor <= 0.0:
        return float("inf") if peak > 0 else 0.0
    return peak / floor


@dataclass
class ScanReport:
    found: EvictionSet | None
    set_id: tuple[int, int] | None
    score: float
    elapsed_cycles: int
    traces_scored: int
    sweeps: int
    rejected_count_filter: int = 0
    rejected_degenerate: int = 0

    def to_json_dict(self) -> dict:
        return {
            "found": self.found is not None,
            "set_id": list(self.set_id) if self.set_id else None,
            "score": self.score if self.score != float("inf") else 1e18,
            "elapsed_cycles": self.elapsed_cycles,
            "traces_scored": self.traces_scored,
            "sweeps": self.sweeps,
            "rejected_count_filter": self.rejected_count_filter,
            "rejected_degenerate": self.rejected_degenerate,
        }


@dataclass
class ScanConfig:
    trace_duration: int = 1_000_000  # cycles; 500 us on the 2 GHz clock
    sample_period: int = 500  # cycles; 250 ns
    segment_length: int = 256
    overlap: float = 0.5
    score_threshold: float = 8.0
    tolerance_bins: int = 1
    count_filter: tuple[int, int] = (50, 400)
    min_decoded_bits: int = 16
    max_bit_bias: float = 0.95


def scan(
    oracle: AttackOracle,
    eviction_sets: list[EvictionSet],
    expected_period: int,
    timeout: int,
    config: ScanConfig | None = None,
    bit_decoder=None,
) -> ScanReport:
    """Round-robin over candidate sets until one looks like the victim's.

    A trace must pass the access-count pre-filter and score above the
    threshold at the victim's expected frequency. When a decoder is supplied
    (whole-system scans), traces whose decoded bit stream is too short or
    heavily biased are treated as false positives and skipped.
    """
    cfg = config or ScanConfig()
    machine = oracle.machine
    clock_hz = machine.config.clock_ghz * 1e9
    sample_rate = clock_hz / cfg.sample_period
    f_expected = clock_hz / expected_period
    t0 = machine.clock
    deadline = t0 + timeout
    monitors = [Monitor(oracle, MonitorStrategy(kind=PARALLEL, evset=ev)) for ev in eviction_sets]
    report = ScanReport(
        found=None, set_id=None, score=0.0, elapsed_cycles=0, traces_scored=0, sweeps=0
    )
    while machine.clock < deadline:
        report.sweeps += 1
        for mon in monitors:
            if machine.clock >= deadline:
                break
            trace = mon.run(cfg.trace_duration)
            lo, hi = cfg.count_filter
            if not lo <= len(trace) <= hi:
                report.rejected_count_filter += 1
                continue
            samples = binarize(trace, cfg.sample_period)
            try:
                psd = welch_psd(samples, cfg.segment_length, cfg.overlap, sample_rate)
            except InsufficientDataError:
                continue
            score = score_peak(psd, f_expected, cfg.tolerance_bins)
            report.traces_scored += 1
            if score <= cfg.score_threshold:
                continue
            if bit_decoder is not None:
                bits = bit_decoder(trace)
                if len(bits) < cfg.min_decoded_bits:
                    report.rejected_degenerate += 1
                    continue
                ones = sum(bits) / len(bits)
                if not (1.0 - cfg.max_bit_bias) <= ones <= cfg.max_bit_bias:
                    report.rejected_degenerate += 1
                    continue
            report.found = mon.strategy.evset
            report.set_id = mon.pair
            report.score = score
            report.elapsed_cycles = machine.clock - t0
            return report
    report.elapsed_cycles = machine.clock - t0
    return report
