"""Cardiac landmark detection and fixed-length windowing.

PCG: band-pass 25-400 Hz, normalized Shannon energy envelope smoothed over
20 ms, local maxima with a 0.3 s refractory and an adaptive threshold at half
the moving median of candidate peak heights. One main peak per heart cycle.

ECG: four-sample difference y[n] = x[n] - x[n-4] (steep QRS slopes dominate),
rectified and smoothed, same adaptive-threshold scheme with a 0.25 s
refractory, then each detection is snapped to the local absolute maximum of
the raw signal within +/-40 ms to undo filter delay.

Both detectors work on amplitude ratios only, so scaling the input leaves the
detected indices unchanged.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy import signal as sps

from .signal_io import Waveform

PCG_BAND_HZ = (25.0, 400.0)
PCG_REFRACTORY_S = 0.3
ECG_REFRACTORY_S = 0.25
ECG_SNAP_S = 0.04
_ENVELOPE_SMOOTH_S = 0.02
_ECG_SMOOTH_S = 0.08
_BLOCK_S = 1.0  # heart-cycle-scale blocks for the envelope-maxima median
_MEDIAN_HALF_BLOCKS = 2
_THRESHOLD_RATIO = 0.5
_FLOOR_RATIO = 0.05

PCG_WINDOW_S = 3.5
ECG_WINDOW_S = 3.3


@dataclass
class PeakList:
    """Ascending sample indices of detected peaks."""

    indices: np.ndarray
    fs: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size and np.any(np.diff(self.indices) <= 0):
            raise ValueError("peak indices must be strictly ascending")

    def __len__(self):
        return int(self.indices.size)


@dataclass
class SegmentWindow:
    """Half-open sample window [start, start+length) anchored on a peak.

    ``start`` may be negative (or the end may pass the signal) for centered
    windows; extraction zero-pads the out-of-range part.
    """

    start: int
    length: int
    anchor: int
    record_id: str = ""
    modality: str = ""

    @property
    def end(self) -> int:
        return self.start + self.length


def _moving_average(x: np.ndarray, width: int) -> np.ndarray:
    width = max(int(width), 1)
    return np.convolve(x, np.full(width, 1.0 / width), mode="same")


def _threshold_candidates(envelope: np.ndarray, fs: int, refractory_s: float) -> np.ndarray:
    """Local maxima ≥ refractory apart, kept above half the moving median of
    the envelope's per-block (heart-cycle scale) maxima, with a floor at 5%
    of the global envelope maximum to reject quiet-segment noise.

    Ratio-based throughout, so the result is amplitude-scale invariant.
    """
    distance = max(int(round(refractory_s * fs)), 1)
    cand, _ = sps.find_peaks(envelope, distance=distance)
    if cand.size == 0:
        return cand
    block = max(int(round(_BLOCK_S * fs)), 1)
    n_blocks = -(-envelope.size // block)
    maxima = np.array(
        [envelope[i * block : (i + 1) * block].max() for i in range(n_blocks)]
    )
    half = _MEDIAN_HALF_BLOCKS
    med = np.array(
        [np.median(maxima[max(0, i - half) : i + half + 1]) for i in range(n_blocks)]
    )
    heights = envelope[cand]
    keep = heights >= _THRESHOLD_RATIO * med[np.minimum(cand // block, n_blocks - 1)]
    keep &= heights >= _FLOOR_RATIO * envelope.max()
    keep &= heights > 0
    return cand[keep]


def pcg_peaks(w: Waveform) -> PeakList:
    """Detect the main peak of each heart cycle in a PCG recording."""
    x = w.samples.astype(np.float64)
    if x.size == 0 or not np.any(x):
        return PeakList(np.empty(0, dtype=np.int64), w.fs)
    high = min(PCG_BAND_HZ[1], 0.45 * w.fs)
    sos = sps.butter(4, [PCG_BAND_HZ[0], high], btype="bandpass", output="sos", fs=w.fs)
    xf = sps.sosfiltfilt(sos, x)
    peak = np.abs(xf).max()
    if peak == 0.0:
        return PeakList(np.empty(0, dtype=np.int64), w.fs)
    xn = xf / peak
    sq = xn * xn
    energy = -sq * np.log(sq + 1e-12)
    envelope = _moving_average(energy, int(round(_ENVELOPE_SMOOTH_S * w.fs)))
    return PeakList(_threshold_candidates(envelope, w.fs, PCG_REFRACTORY_S), w.fs)


def ecg_rpeaks(w: Waveform) -> PeakList:
    """Detect R peaks; indices point at the raw signal's local extremum."""
    x = w.samples.astype(np.float64)
    if x.size < 5 or x.max() == x.min():
        return PeakList(np.empty(0, dtype=np.int64), w.fs)
    diff = np.zeros_like(x)
    diff[4:] = x[4:] - x[:-4]
    envelope = _moving_average(np.abs(diff), int(round(_ECG_SMOOTH_S * w.fs)))
    cand = _threshold_candidates(envelope, w.fs, ECG_REFRACTORY_S)
    if cand.size == 0:
        return PeakList(cand, w.fs)
    snap = max(int(round(ECG_SNAP_S * w.fs)), 1)
    absx = np.abs(x)
    snapped = np.empty(cand.size, dtype=np.int64)
    for i, c in enumerate(cand):
        lo = max(0, c - snap)
        hi = min(x.size, c + snap + 1)
        snapped[i] = lo + int(np.argmax(absx[lo:hi]))
    # snapping can pull two detections closer than the refractory interval;
    # keep the larger-amplitude one
    refractory = max(int(round(ECG_REFRACTORY_S * w.fs)), 1)
    kept: list[int] = []
    for idx in snapped:
        if kept and idx - kept[-1] < refractory:
            if absx[idx] > absx[kept[-1]]:
                kept[-1] = int(idx)
        elif not kept or idx != kept[-1]:
            kept.append(int(idx))
    return PeakList(np.asarray(kept, dtype=np.int64), w.fs)


def windows_nonoverlap(w: Waveform, peaks: PeakList, duration_s: float) -> list[SegmentWindow]:
    """Greedy left-to-right non-overlapping windows, each starting at a peak.

    A peak is skipped when its window would run past the end of the signal or
    overlap the previously emitted window.
    """
    if duration_s <= 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    length = int(round(duration_s * w.fs))
    windows = []
    prev_end = 0
    for p in peaks.indices:
        start = int(p)
        if start < prev_end or start + length > w.samples.size:
            continue
        windows.append(SegmentWindow(start=start, length=length, anchor=start))
        prev_end = start + length
    return windows


def window_center_median_peak(w: Waveform, peaks: PeakList, duration_s: float) -> SegmentWindow:
    """One window centered on the floor(n/2)-th peak (1-based; n=1 uses peak 1)."""
    n = len(peaks)
    if n == 0:
        raise ValueError("no peaks: cannot place a centered window")
    k = max(n // 2, 1)
    center = int(peaks.indices[k - 1])
    length = int(round(duration_s * w.fs))
    return SegmentWindow(start=center - length // 2, length=length, anchor=center)


def windows_simultaneous(
    pcg: Waveform, ecg: Waveform, duration_s: float = PCG_WINDOW_S, peaks: PeakList = None
) -> list[tuple[SegmentWindow, SegmentWindow]]:
    """PCG-anchored non-overlap windows, mirrored onto the ECG timeline.

    Both recordings are assumed aligned at t=0; each PCG window's start/end
    time is converted to ECG sample indices at the ECG rate. ``peaks``
    defaults to running the PCG detector.
    """
    if pcg is None or ecg is None:
        raise ValueError("both PCG and ECG waveforms are required")
    if peaks is None:
        peaks = pcg_peaks(pcg)
    pairs = []
    ecg_length = int(round(duration_s * ecg.fs))
    for pw in windows_nonoverlap(pcg, peaks, duration_s):
        start_time = pw.start / pcg.fs
        ew = SegmentWindow(
            start=int(round(start_time * ecg.fs)),
            length=ecg_length,
            anchor=int(round(pw.anchor / pcg.fs * ecg.fs)),
        )
        pairs.append((replace(pw, modality="pcg"), replace(ew, modality="ecg")))
    return pairs


def extract(w: Waveform, window: SegmentWindow) -> np.ndarray:
    """Cut the window's samples, zero-padding any out-of-range part."""
    out = np.zeros(window.length, dtype=np.float32)
    lo = max(window.start, 0)
    hi = min(window.end, w.samples.size)
    if hi > lo:
        out[lo - window.start : hi - window.start] = w.samples[lo:hi]
    return out
