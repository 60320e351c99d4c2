"""Dataset assembly: record-identity splits, balancing, scalogram caching.

Three dataset styles mirror the acquisition settings: setting 1 cuts
non-overlapping 3.5 s PCG windows starting at envelope peaks, setting 2 cuts
one 3.3 s ECG window centered on the median R peak, setting 3 cuts PCG-style
windows from simultaneous recordings and mirrors them onto the ECG channel.
Splits are assigned per record id (never per sample) at 70/10/20, stratified
by label, BEFORE any windowing statistics are looked at.

On-disk layout per dataset: ``samples.csv`` index, ``split.json``, and a
``cache/`` directory of .sgm scalograms referenced by relative path.
"""

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp, segmentation
from .seeds import rng_for
from .signal_io import (
    ECG_CANONICAL_FS,
    LABEL_TO_INT,
    PCG_CANONICAL_FS,
    Waveform,
    load_record,
    read_manifest,
    resample,
)

log = logging.getLogger(__name__)

SAMPLES_CSV_COLUMNS = ("sample_id", "record_id", "label", "split", "pcg_sgm", "ecg_sgm")
SPLITS = ("train", "val", "test")


class DataError(RuntimeError):
    """Dataset construction failed; the message names the record involved."""


@dataclass
class SampleEntry:
    """One windowed sample: scalogram refs are paths relative to the dataset dir."""

    sample_id: str
    record_id: str
    label: int
    split: str
    pcg_sgm: str = ""
    ecg_sgm: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not (self.pcg_sgm or self.ecg_sgm):
            raise ValueError(f"sample {self.sample_id}: no scalogram reference")


@dataclass
class SplitAssignment:
    """record_id -> split mapping produced by one seeded shuffle."""

    by_record: dict
    seed: int

    def counts(self) -> dict:
        out = {s: 0 for s in SPLITS}
        for s in self.by_record.values():
            out[s] += 1
        return out


@dataclass
class BuildConfig:
    """Knobs for dataset construction; defaults follow the pipeline constants."""

    out_dir: Path
    seed: int = 0
    pcg_fs: int = PCG_CANONICAL_FS
    ecg_fs: int = ECG_CANONICAL_FS
    pcg_scale_range: tuple = dsp.PCG_SCALE_RANGE
    ecg_scale_range: tuple = dsp.ECG_SCALE_RANGE
    n_scales: int = dsp.N_SCALES
    cmor_bandwidth: float = 1.5
    cmor_center: float = 1.0
    pcg_window_s: float = segmentation.PCG_WINDOW_S
    ecg_window_s: float = segmentation.ECG_WINDOW_S
    image_height: int = dsp.IMAGE_HEIGHT
    image_width: int = dsp.IMAGE_WIDTH
    ratios: tuple = (0.7, 0.1, 0.2)

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)


def split_by_record(records, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitAssignment:
    """Stratified record-identity split into train/val/test.

    ``records`` is an iterable of (record_id, label) pairs. Within each class
    the ids are shuffled by the seed and partitioned at the cumulative-floor
    cut points, so 407 records at (0.7, 0.1, 0.2) give exactly 285/40/82.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ValueError(f"ratios must be three values summing to 1, got {ratios}")
    by_label: dict = {}
    seen = set()
    for rid, label in records:
        if rid in seen:
            raise DataError(f"duplicate record_id {rid!r}")
        seen.add(rid)
        by_label.setdefault(label, []).append(rid)
    total = sum(len(v) for v in by_label.values())
    if total < 3:
        raise DataError(f"need at least 3 labeled records, got {total}")
    r_train, r_val, r_test = ratios
    assignment: dict = {}
    for label in sorted(by_label):
        ids = sorted(by_label[label])
        order = rng_for(seed, "split", label).permutation(len(ids))
        shuffled = [ids[i] for i in order]
        n = len(ids)
        cut_val = math.floor(n * r_val + 1e-9)
        cut_test = math.floor(n * (r_val + r_test) + 1e-9)
        for rid in shuffled[:cut_val]:
            assignment[rid] = "val"
        for rid in shuffled[cut_val:cut_test]:
            assignment[rid] = "test"
        for rid in shuffled[cut_test:]:
            assignment[rid] = "train"
        split_sizes = (n - cut_test, cut_val, cut_test - cut_val)
        if min(split_sizes) == 0:
            warnings.warn(
                f"class {label}: only {n} records, split sizes {split_sizes} "
                "leave a split without this class",
                stacklevel=2,
            )
    return SplitAssignment(by_record=assignment, seed=seed)


def balance(entries, seed: int, unit: str = "sample"):
    """Undersample the majority class to the minority count, seeded.

    ``unit='sample'`` drops individual samples (used for training sets);
    ``unit='record'`` drops whole records (used for balanced test sets). The
    result is a deterministically reshuffled subset of the input.
    """
    if unit not in ("sample", "record"):
        raise ValueError(f"unit must be 'sample' or 'record', got {unit!r}")
    groups = {0: [], 1: []}
    for e in entries:
        groups[e.label].append(e)
    if not groups[0] or not groups[1]:
        raise DataError("balance needs both classes non-empty")
    if unit == "sample":
        m = min(len(groups[0]), len(groups[1]))
        kept = []
        for label in (0, 1):
            g = groups[label]
            if len(g) > m:
                order = rng_for(seed, "balance", "sample", label).permutation(len(g))
                g = [g[i] for i in sorted(order[:m])]
            kept.extend(g)
    else:
        rec_labels = {}
        for e in entries:
            prev = rec_labels.setdefault(e.record_id, e.label)
            if prev != e.label:
                raise DataError(f"record {e.record_id!r} has conflicting labels")
        recs = {0: sorted(r for r, l in rec_labels.items() if l == 0),
                1: sorted(r for r, l in rec_labels.items() if l == 1)}
        m = min(len(recs[0]), len(recs[1]))
        keep_ids = set()
        for label in (0, 1):
            ids = recs[label]
            if len(ids) > m:
                order = rng_for(seed, "balance", "record", label).permutation(len(ids))
                ids = [ids[i] for i in order[:m]]
            keep_ids.update(ids)
        kept = [e for e in entries if e.record_id in keep_ids]
    order = rng_for(seed, "balance", "order").permutation(len(kept))
    return [kept[i] for i in order]


def one_hot(labels, n_classes: int = 2) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes), dtype=np.float32)
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass
class SplitData:
    """Materialized arrays for one split, ready for batching."""

    sample_ids: list
    record_ids: list
    labels: np.ndarray
    inputs: dict = field(default_factory=dict)  # modality -> (N, 1, H, W) float32

    def __len__(self):
        return int(self.labels.size)


def load_split(dataset_dir, split: str, modalities=None, entries=None) -> SplitData:
    """Load a split's scalograms from the dataset cache into memory."""
    dataset_dir = Path(dataset_dir)
    if entries is None:
        entries = read_samples_csv(dataset_dir / "samples.csv")
    chosen = [e for e in entries if e.split == split]
    if modalities is None:
        modalities = []
        if any(e.pcg_sgm for e in chosen):
            modalities.append("pcg")
        if any(e.ecg_sgm for e in chosen):
            modalities.append("ecg")
    inputs = {}
    for m in modalities:
        mats = []
        for e in chosen:
            ref = e.pcg_sgm if m == "pcg" else e.ecg_sgm
            if not ref:
                raise DataError(f"sample {e.sample_id}: no {m} scalogram in dataset")
            mats.append(dsp.load_sgm(dataset_dir / ref).data[None, :, :])
        inputs[m] = (
            np.stack(mats).astype(np.float32)
            if mats
            else np.zeros((0, 1, 0, 0), np.float32)
        )
    return SplitData(
        sample_ids=[e.sample_id for e in chosen],
        record_ids=[e.record_id for e in chosen],
        labels=np.asarray([e.label for e in chosen], dtype=np.int64),
        inputs=inputs,
    )


def batches(data: SplitData, batch_size: int, seed: int, epoch: int):
    """Per-epoch deterministic shuffle; yields (inputs dict, one-hot labels).

    The final partial batch is emitted.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(data)
    order = rng_for(seed, "batches", epoch).permutation(n)
    targets = one_hot(data.labels)
    for lo in range(0, n, batch_size):
        idx = order[lo : lo + batch_size]
        yield {m: arr[idx] for m, arr in data.inputs.items()}, targets[idx]


# ---------------------------------------------------------------------------
# dataset builds


def _wavelet_for(modality: str, cfg: BuildConfig):
    if modality == "pcg":
        spec = dsp.MorletReal()
        grid = dsp.make_scales(*cfg.pcg_scale_range, cfg.n_scales)
    else:
        spec = dsp.ComplexMorlet(cfg.cmor_bandwidth, cfg.cmor_center)
        grid = dsp.make_scales(*cfg.ecg_scale_range, cfg.n_scales)
    return spec, grid


def window_scalogram(samples: np.ndarray, fs: int, modality: str, cfg: BuildConfig,
                     meta: dict) -> dsp.Scalogram:
    """Window samples -> CWT -> normalized magnitude -> pooled image."""
    spec, grid = _wavelet_for(modality, cfg)
    coeffs = dsp.cwt(Waveform(samples, fs), grid, spec)
    s = dsp.scalogram_of(coeffs, meta)
    return dsp.pool_to(s, cfg.image_height, cfg.image_width)


def _require(entry, modality: str):
    path = entry.pcg_path if modality == "pcg" else entry.ecg_path
    if not path:
        raise DataError(f"record {entry.record_id!r}: missing {modality} modality")


def _labeled_entries(manifest_entries, need_pcg: bool, need_ecg: bool):
    out = []
    for e in manifest_entries:
        if e.label not in LABEL_TO_INT:
            raise DataError(f"record {e.record_id!r}: unlabeled record in training manifest")
        if need_pcg:
            _require(e, "pcg")
        if need_ecg:
            _require(e, "ecg")
        out.append(e)
    return out


def _cached_scalogram(path: Path, compute) -> bool:
    """Write the scalogram unless the cache file already exists. True on hit."""
    if path.exists():
        return True
    dsp.save_sgm(path, compute())
    return False


def _finish_build(cfg: BuildConfig, setting: int, samples, split, skipped, cache_hits):
    write_samples_csv(cfg.out_dir / "samples.csv", samples)
    write_split_json(cfg.out_dir / "split.json", split, cfg.ratios)
    counts = {s: {0: 0, 1: 0} for s in SPLITS}
    for e in samples:
        counts[e.split][e.label] += 1
    return {
        "setting": setting,
        "n_records": len(split.by_record),
        "n_samples": len(samples),
        "skipped_records": skipped,
        "cache_hits": cache_hits,
        "counts": counts,
    }


def build_setting3(manifest_path, cfg: BuildConfig) -> dict:
    """Simultaneous PCG+ECG windows from dual-modality records."""
    entries = _labeled_entries(read_manifest(manifest_path), need_pcg=True, need_ecg=True)
    base_dir = Path(manifest_path).parent
    split = split_by_record(
        [(e.record_id, LABEL_TO_INT[e.label]) for e in entries], cfg.ratios, cfg.seed
    )
    cache_dir = cfg.out_dir / "cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    samples, skipped, hits = [], [], 0
    for entry in sorted(entries, key=lambda e: e.record_id):
        rid = entry.record_id
        try:
            rec = load_record(entry, base_dir, source="setting3")
            pcg = resample(rec.pcg, cfg.pcg_fs)
            ecg = resample(rec.ecg, cfg.ecg_fs)
            pairs = segmentation.windows_simultaneous(pcg, ecg, cfg.pcg_window_s)
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"record {rid!r}: {exc}") from exc
        if not pairs:
            log.warning("record %r: no PCG peaks, skipped", rid)
            skipped.append(rid)
            continue
        for i, (pw, ew) in enumerate(pairs):
            sample_id = f"{rid}_w{i:03d}"
            refs = {}
            for modality, win, wav in (("pcg", pw, pcg), ("ecg", ew, ecg)):
                ref = f"cache/{sample_id}_{modality}.sgm"
                meta = {"record_id": rid, "window": i, "modality": modality,
                        "scale_grid": modality}
                cut = segmentation.extract(wav, win)
                fs = wav.fs
                hits += _cached_scalogram(
                    cfg.out_dir / ref,
                    lambda c=cut, f=fs, m=modality, mt=meta: window_scalogram(c, f, m, cfg, mt),
                )
                refs[modality] = ref
            samples.append(
                SampleEntry(
                    sample_id=sample_id,
                    record_id=rid,
                    label=LABEL_TO_INT[entry.label],
                    split=split.by_record[rid],
                    pcg_sgm=refs["pcg"],
                    ecg_sgm=refs["ecg"],
                )
            )
    return _finish_build(cfg, 3, samples, split, skipped, hits)


def _build_single_modality(manifest_path, cfg: BuildConfig, modality: str, setting: int) -> dict:
    entries = _labeled_entries(
        read_manifest(manifest_path), need_pcg=modality == "pcg", need_ecg=modality == "ecg"
    )
    base_dir = Path(manifest_path).parent
    split = split_by_record(
        [(e.record_id, LABEL_TO_INT[e.label]) for e in entries], cfg.ratios, cfg.seed
    )
    cache_dir = cfg.out_dir / "cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    samples, skipped, hits = [], [], 0
    for entry in sorted(entries, key=lambda e: e.record_id):
        rid = entry.record_id
        try:
            rec = load_record(entry, base_dir, source=f"setting{setting}")
            if modality == "pcg":
                wav = resample(rec.pcg, cfg.pcg_fs)
                peaks = segmentation.pcg_peaks(wav)
                windows = segmentation.windows_nonoverlap(wav, peaks, cfg.pcg_window_s)
            else:
                wav = resample(rec.ecg, cfg.ecg_fs)
                peaks = segmentation.ecg_rpeaks(wav)
                windows = (
                    [segmentation.window_center_median_peak(wav, peaks, cfg.ecg_window_s)]
                    if len(peaks)
                    else []
                )
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"record {rid!r}: {exc}") from exc
        if not windows:
            log.warning("record %r: no %s landmarks, skipped", rid, modality)
            skipped.append(rid)
            continue
        for i, win in enumerate(windows):
            sample_id = f"{rid}_w{i:03d}"
            ref = f"cache/{sample_id}_{modality}.sgm"
            meta = {"record_id": rid, "window": i, "modality": modality,
                    "scale_grid": modality}
            cut = segmentation.extract(wav, win)
            hits += _cached_scalogram(
                cfg.out_dir / ref,
                lambda c=cut, f=wav.fs, mt=meta: window_scalogram(c, f, modality, cfg, mt),
            )
            samples.append(
                SampleEntry(
                    sample_id=sample_id,
                    record_id=rid,
                    label=LABEL_TO_INT[entry.label],
                    split=split.by_record[rid],
                    pcg_sgm=ref if modality == "pcg" else "",
                    ecg_sgm=ref if modality == "ecg" else "",
                )
            )
    return _finish_build(cfg, setting, samples, split, skipped, hits)


def build_setting1(manifest_path, cfg: BuildConfig) -> dict:
    """PCG-only: non-overlapping peak-anchored windows."""
    return _build_single_modality(manifest_path, cfg, "pcg", 1)


def build_setting2(manifest_path, cfg: BuildConfig) -> dict:
    """ECG-only: one window per record, centered on the median R peak."""
    return _build_single_modality(manifest_path, cfg, "ecg", 2)


# ---------------------------------------------------------------------------
# on-disk index


def write_samples_csv(path, samples) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SAMPLES_CSV_COLUMNS)
        for e in samples:
            writer.writerow(
                [e.sample_id, e.record_id, e.label, e.split, e.pcg_sgm, e.ecg_sgm]
            )


def read_samples_csv(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SAMPLES_CSV_COLUMNS:
            raise DataError(f"{path}: unexpected samples.csv header {reader.fieldnames}")
        for row in reader:
            out.append(
                SampleEntry(
                    sample_id=row["sample_id"],
                    record_id=row["record_id"],
                    label=int(row["label"]),
                    split=row["split"],
                    pcg_sgm=row["pcg_sgm"],
                    ecg_sgm=row["ecg_sgm"],
                )
            )
    return out


def write_split_json(path, split: SplitAssignment, ratios) -> None:
    payload = {
        "seed": split.seed,
        "ratios": list(ratios),
        "assignment": dict(sorted(split.by_record.items())),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_split_json(path) -> SplitAssignment:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return SplitAssignment(by_record=payload["assignment"], seed=payload["seed"])
