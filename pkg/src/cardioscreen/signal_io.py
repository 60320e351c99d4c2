"""Waveform and manifest I/O plus rate canonicalization.

PCG recordings arrive as 16-bit PCM mono WAV, ECG as one-float-per-line CSV.
A manifest CSV ties record ids to files, labels and sampling rates. All
waveforms are resampled to canonical rates (PCG 1000 Hz, ECG 300 Hz) before
segmentation so scalogram geometry stays fixed across heterogeneous sources.
"""

import csv
import math
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import signal as sps

PCG_CANONICAL_FS = 1000
ECG_CANONICAL_FS = 300

LABEL_NORMAL = "normal"
LABEL_ABNORMAL = "abnormal"
LABEL_UNLABELED = "unlabeled"
_LABELS = (LABEL_NORMAL, LABEL_ABNORMAL, LABEL_UNLABELED)
LABEL_TO_INT = {LABEL_NORMAL: 0, LABEL_ABNORMAL: 1}

MANIFEST_COLUMNS = ("record_id", "label", "pcg_path", "ecg_path", "fs_pcg", "fs_ecg")


class FormatError(ValueError):
    """Malformed input file; the message names the offending field."""


@dataclass
class Waveform:
    """Mono signal: float32 samples (nominal [-1, 1]) at an integer rate in Hz."""

    samples: np.ndarray
    fs: int

    def __post_init__(self):
        self.samples = np.ascontiguousarray(np.asarray(self.samples, dtype=np.float32))
        if self.samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {self.samples.shape}")
        self.fs = int(self.fs)
        if self.fs <= 0:
            raise ValueError(f"fs must be positive, got {self.fs}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")

    @property
    def duration(self) -> float:
        return self.samples.size / self.fs


@dataclass
class ManifestEntry:
    """One manifest row: where a record's modality files live."""

    record_id: str
    label: str
    pcg_path: Optional[str] = None
    ecg_path: Optional[str] = None
    fs_pcg: Optional[int] = None
    fs_ecg: Optional[int] = None


@dataclass
class WaveformRecord:
    """One subject recording with loaded waveforms."""

    record_id: str
    label: str
    pcg: Optional[Waveform] = None
    ecg: Optional[Waveform] = None
    source: str = ""

    def __post_init__(self):
        if self.pcg is None and self.ecg is None:
            raise ValueError(f"record {self.record_id}: no modality present")


def read_wav_pcm16(path) -> Waveform:
    """Read a RIFF/WAVE file (16-bit PCM, mono) into a Waveform.

    Integer samples are scaled by 1/32768 so that full-scale negative maps
    exactly to -1.0.
    """
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            comptype = wf.getcomptype()
            fs = wf.getframerate()
            if comptype != "NONE":
                raise FormatError(f"{path}: compression type {comptype!r}, expected PCM")
            if n_channels != 1:
                raise FormatError(f"{path}: {n_channels} channels, expected mono")
            if sampwidth != 2:
                raise FormatError(f"{path}: sample width {8 * sampwidth} bits, expected 16")
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise FormatError(f"{path}: malformed WAV header: {exc}") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float32) / 32768.0, fs)


def write_wav_pcm16(path, w: Waveform) -> None:
    """Write a Waveform as 16-bit PCM mono WAV (inverse of read_wav_pcm16)."""
    pcm = np.clip(np.rint(w.samples.astype(np.float64) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.fs)
        wf.writeframes(pcm.astype("<i2").tobytes())


def read_csv_signal(path, fs: int) -> Waveform:
    """Read a one-float-per-line CSV signal; blank lines are ignored."""
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                values.append(float(text))
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: not a number: {text!r}") from exc
    if not values:
        raise FormatError(f"{path}: empty signal")
    return Waveform(np.asarray(values, dtype=np.float32), fs)


def write_csv_signal(path, w: Waveform) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for v in w.samples:
            fh.write(f"{float(v):.6f}\n")


def read_manifest(path) -> list[ManifestEntry]:
    """Parse a dataset manifest CSV.

    Schema: ``record_id,label,pcg_path,ecg_path,fs_pcg,fs_ecg``; empty path
    fields mean the modality is absent. Labels are case-insensitive.
    """
    entries = []
    seen = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        if header != MANIFEST_COLUMNS:
            raise FormatError(
                f"{path}: manifest header {header} != expected {MANIFEST_COLUMNS}"
            )
        for lineno, row in enumerate(reader, start=2):
            rid = (row["record_id"] or "").strip()
            if not rid:
                raise FormatError(f"{path}: line {lineno}: empty record_id")
            if rid in seen:
                raise FormatError(f"{path}: line {lineno}: duplicate record_id {rid!r}")
            seen.add(rid)
            label = (row["label"] or "").strip().lower()
            if label not in _LABELS:
                raise FormatError(f"{path}: line {lineno}: unknown label {row['label']!r}")
            pcg_path = (row["pcg_path"] or "").strip() or None
            ecg_path = (row["ecg_path"] or "").strip() or None
            if pcg_path is None and ecg_path is None:
                raise FormatError(f"{path}: line {lineno}: record {rid!r} has no modality paths")
            entries.append(
                ManifestEntry(
                    record_id=rid,
                    label=label,
                    pcg_path=pcg_path,
                    ecg_path=ecg_path,
                    fs_pcg=_parse_fs(row["fs_pcg"], path, lineno, "fs_pcg"),
                    fs_ecg=_parse_fs(row["fs_ecg"], path, lineno, "fs_ecg"),
                )
            )
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in entries:
            writer.writerow(
                [
                    e.record_id,
                    e.label,
                    e.pcg_path or "",
                    e.ecg_path or "",
                    "" if e.fs_pcg is None else e.fs_pcg,
                    "" if e.fs_ecg is None else e.fs_ecg,
                ]
            )


def _parse_fs(text, path, lineno, name):
    text = (text or "").strip()
    if not text:
        return None
    try:
        fs = int(text)
    except ValueError as exc:
        raise FormatError(f"{path}: line {lineno}: {name} not an integer: {text!r}") from exc
    if fs <= 0:
        raise FormatError(f"{path}: line {lineno}: {name} must be positive, got {fs}")
    return fs


def load_record(entry: ManifestEntry, base_dir, source: str = "") -> WaveformRecord:
    """Load the waveforms referenced by a manifest entry.

    ``.wav`` paths go through the PCM reader (rate from the header); anything
    else is treated as CSV and needs the matching fs_* manifest column.
    """
    base = Path(base_dir)
    pcg = _load_channel(base, entry.pcg_path, entry.fs_pcg, entry.record_id, "pcg")
    ecg = _load_channel(base, entry.ecg_path, entry.fs_ecg, entry.record_id, "ecg")
    return WaveformRecord(entry.record_id, entry.label, pcg=pcg, ecg=ecg, source=source)


def _load_channel(base, rel_path, fs, record_id, name):
    if rel_path is None:
        return None
    path = base / rel_path
    if path.suffix.lower() == ".wav":
        return read_wav_pcm16(path)
    if fs is None:
        raise FormatError(f"record {record_id}: fs_{name} required for CSV signal {rel_path}")
    return read_csv_signal(path, fs)


def _design_lowpass(up: int, down: int, taps_per_phase: int = 64, beta: float = 8.6):
    # Windowed-sinc low-pass at the tighter of the two Nyquist rates. Each
    # polyphase branch is renormalized to exact unit DC gain, otherwise a
    # constant input picks up ~1e-5 periodic ripple.
    n_taps = 2 * (taps_per_phase * max(up, down) // 2) + 1
    h = sps.firwin(n_taps, 1.0 / max(up, down), window=("kaiser", beta))
    for p in range(up):
        s = h[p::up].sum()
        if s != 0.0:
            h[p::up] /= s * up
    return h


def resample(w: Waveform, target_fs: int) -> Waveform:
    """Polyphase resample to target_fs, preserving duration within one sample."""
    target_fs = int(target_fs)
    if target_fs <= 0:
        raise ValueError(f"target_fs must be positive, got {target_fs}")
    if target_fs == w.fs:
        return Waveform(w.samples.copy(), w.fs)
    g = math.gcd(w.fs, target_fs)
    up, down = target_fs // g, w.fs // g
    h = _design_lowpass(up, down)
    y = sps.resample_poly(w.samples.astype(np.float64), up, down, window=h, padtype="line")
    return Waveform(y, target_fs)
