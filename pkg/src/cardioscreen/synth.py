"""Seeded synthetic PCG/ECG corpus for desk-scale experiments and tests.

Each record is a time-aligned pair: the PCG is a train of Gaussian-enveloped
heart-sound bursts (S1, softer S2), the ECG a per-beat sum of Gaussians
(P-QRS-T) whose R peaks sit just before the S1 bursts. Abnormal records draw
a phenotype so the two channels carry complementary evidence:

  * murmur    - adds a 120-180 Hz systolic band between S1 and S2 (PCG cue),
  * conduction - widens the QRS and roughens the RR rhythm (ECG cue),
  * both      - the two combined.

Generation is fully determined by (seed, record id), so a rerun reproduces
the corpus byte for byte.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeds import rng_for
from .signal_io import (
    LABEL_ABNORMAL,
    LABEL_NORMAL,
    ManifestEntry,
    Waveform,
    write_csv_signal,
    write_manifest,
    write_wav_pcm16,
)

MURMUR_BAND_HZ = (120.0, 180.0)
_MURMUR_TONES = ((125.0, 1.0), (140.0, 0.8), (155.0, 0.6), (170.0, 0.45))

PHENOTYPES = ("murmur", "conduction", "both")


@dataclass
class SynthConfig:
    n_records: int = 40
    seed: int = 0
    duration_s: float = 11.0
    abnormal_fraction: float = 0.5
    pcg_fs: int = 2000
    ecg_fs: int = 500

    def __post_init__(self):
        if self.n_records < 2:
            raise ValueError("need at least 2 records")
        if not 0.0 < self.abnormal_fraction < 1.0:
            raise ValueError("abnormal_fraction must be in (0, 1)")


def _gauss(t: np.ndarray, center: float, sigma: float) -> np.ndarray:
    return np.exp(-0.5 * ((t - center) / sigma) ** 2)


def _beat_times(rng, duration_s: float, period: float, jitter_sd: float) -> np.ndarray:
    times = []
    t = 0.45 + rng.uniform(0.0, 0.25)
    while t < duration_s - 0.3:
        times.append(t)
        t += period + rng.normal(0.0, jitter_sd)
    return np.asarray(times)


def _smooth_gate(t: np.ndarray, start: float, stop: float, ramp: float = 0.02) -> np.ndarray:
    # 0/1 plateau with cosine ramps; keeps the murmur band free of clicks
    up = np.clip((t - start) / ramp, 0.0, 1.0)
    down = np.clip((stop - t) / ramp, 0.0, 1.0)
    return 0.5 * (1 - np.cos(np.pi * up)) * 0.5 * (1 - np.cos(np.pi * down))


def synth_pcg(rng, beats: np.ndarray, period: float, cfg: SynthConfig,
              murmur: bool) -> Waveform:
    n = int(round(cfg.duration_s * cfg.pcg_fs))
    t = np.arange(n) / cfg.pcg_fs
    x = rng.normal(0.0, 0.008, n)
    s2_delay = 0.35 * period
    for tb in beats:
        a1 = rng.uniform(0.9, 1.1)
        x += a1 * _gauss(t, tb, 0.045) * np.sin(2 * np.pi * 45.0 * (t - tb) + rng.uniform(0, 2 * np.pi))
        a2 = 0.55 * rng.uniform(0.85, 1.15)
        tc = tb + s2_delay
        x += a2 * _gauss(t, tc, 0.035) * np.sin(2 * np.pi * 55.0 * (t - tc) + rng.uniform(0, 2 * np.pi))
        if murmur:
            gate = _smooth_gate(t, tb + 0.10, tb + s2_delay - 0.05)
            band = np.zeros_like(t)
            for freq, weight in _MURMUR_TONES:
                band += weight * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
            x += 0.22 * rng.uniform(0.9, 1.1) * gate * band / len(_MURMUR_TONES)
    peak = np.abs(x).max()
    if peak > 0:
        x = 0.85 * x / peak
    return Waveform(x, cfg.pcg_fs)


def synth_ecg(rng, beats: np.ndarray, period: float, cfg: SynthConfig,
              wide_qrs: bool) -> Waveform:
    n = int(round(cfg.duration_s * cfg.ecg_fs))
    t = np.arange(n) / cfg.ecg_fs
    x = rng.normal(0.0, 0.006, n)
    qrs_sigma = 0.030 if wide_qrs else 0.012
    for tb in beats:
        tr = tb - 0.04  # R peak slightly before S1
        x += 0.12 * _gauss(t, tr - 0.17, 0.030)  # P
        x -= 0.12 * _gauss(t, tr - 0.030, 0.012)  # Q
        x += 1.00 * rng.uniform(0.92, 1.08) * _gauss(t, tr, qrs_sigma)  # R
        x -= 0.18 * _gauss(t, tr + 0.032, 0.014)  # S
        x += 0.28 * _gauss(t, tr + min(0.30, 0.35 * period), 0.055)  # T
    peak = np.abs(x).max()
    if peak > 0:
        x = 0.9 * x / peak
    return Waveform(x, cfg.ecg_fs)


def synth_record(record_id: str, label: str, seed: int, cfg: SynthConfig):
    """Generate one aligned (PCG, ECG) pair; returns (pcg, ecg, info)."""
    rng = rng_for(seed, "record", record_id)
    heart_rate = rng.uniform(55.0, 95.0)
    period = 60.0 / heart_rate
    phenotype = None
    if label == LABEL_ABNORMAL:
        u = rng.random()
        phenotype = PHENOTYPES[0] if u < 0.4 else PHENOTYPES[1] if u < 0.8 else PHENOTYPES[2]
    conduction = phenotype in ("conduction", "both")
    murmur = phenotype in ("murmur", "both")
    jitter_sd = (0.09 if conduction else 0.012) * period
    beats = _beat_times(rng, cfg.duration_s, period, jitter_sd)
    pcg = synth_pcg(rng, beats, period, cfg, murmur)
    ecg = synth_ecg(rng, beats, period, cfg, wide_qrs=conduction)
    info = {"beats": beats, "phenotype": phenotype, "heart_rate": heart_rate}
    return pcg, ecg, info


def synthesize_corpus(cfg: SynthConfig, out_dir) -> dict:
    """Write WAV/CSV pairs plus manifest.csv; byte-identical for a fixed seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_abnormal = int(round(cfg.n_records * cfg.abnormal_fraction))
    labels = [LABEL_ABNORMAL] * n_abnormal + [LABEL_NORMAL] * (cfg.n_records - n_abnormal)
    order = rng_for(cfg.seed, "labels").permutation(len(labels))
    labels = [labels[i] for i in order]
    entries = []
    phenotypes = {p: 0 for p in PHENOTYPES}
    for k, label in enumerate(labels):
        rid = f"r{k:04d}"
        pcg, ecg, info = synth_record(rid, label, cfg.seed, cfg)
        write_wav_pcm16(out_dir / f"{rid}.wav", pcg)
        write_csv_signal(out_dir / f"{rid}.csv", ecg)
        if info["phenotype"]:
            phenotypes[info["phenotype"]] += 1
        entries.append(
            ManifestEntry(
                record_id=rid,
                label=label,
                pcg_path=f"{rid}.wav",
                ecg_path=f"{rid}.csv",
                fs_pcg=cfg.pcg_fs,
                fs_ecg=cfg.ecg_fs,
            )
        )
    manifest_path = out_dir / "manifest.csv"
    write_manifest(manifest_path, entries)
    return {
        "manifest": str(manifest_path),
        "n_records": cfg.n_records,
        "n_abnormal": n_abnormal,
        "n_normal": cfg.n_records - n_abnormal,
        "phenotypes": phenotypes,
    }
