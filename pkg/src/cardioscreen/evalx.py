"""Confusion metrics, G-mean, ROC/AUC, threshold search, record aggregation.

Abnormal is the positive class and a sample is called positive when its score
is >= the threshold (boundary inclusive, which favors sensitivity at ties).
Record-wise evaluation first averages the sample scores of each record, then
applies the same machinery to the aggregated scores.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np


class EvaluationError(RuntimeError):
    """Metrics are undefined for the given inputs (e.g. one-class data)."""


@dataclass(frozen=True)
class ScoredSample:
    sample_id: str
    record_id: str
    label: int
    score: float

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be finite in [0, 1], got {self.score}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def sensitivity(self) -> float:
        pos = self.tp + self.fn
        return self.tp / pos if pos else 0.0

    @property
    def specificity(self) -> float:
        neg = self.tn + self.fp
        return self.tn / neg if neg else 0.0

    @property
    def accuracy(self) -> float:
        total = self.tp + self.tn + self.fp + self.fn
        return (self.tp + self.tn) / total if total else 0.0


@dataclass
class MetricsReport:
    """Everything the evaluation commands report for one model/split/mode."""

    mode: str
    threshold: float
    tp: int
    tn: int
    fp: int
    fn: int
    sensitivity: float
    specificity: float
    accuracy: float
    gmean: float
    auc: float
    roc: list = field(default_factory=list)  # (fpr, tpr, threshold) triples

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "threshold": self.threshold,
            "counts": {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn},
            "metrics_percent": {
                "sensitivity": round(100.0 * self.sensitivity, 2),
                "specificity": round(100.0 * self.specificity, 2),
                "accuracy": round(100.0 * self.accuracy, 2),
                "gmean": round(100.0 * self.gmean, 2),
                "auc": round(100.0 * self.auc, 2),
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _scores_labels(scored):
    scores = np.asarray([s.score for s in scored], dtype=np.float64)
    labels = np.asarray([s.label for s in scored], dtype=np.int64)
    return scores, labels


def confusion(scored, threshold: float) -> ConfusionCounts:
    """Count outcomes calling Abnormal iff score >= threshold."""
    if not scored:
        raise EvaluationError("cannot compute a confusion matrix on empty input")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    scores, labels = _scores_labels(scored)
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def gmean(sensitivity: float, specificity: float) -> float:
    """Geometric mean of sensitivity and specificity."""
    if not (0.0 <= sensitivity <= 1.0 and 0.0 <= specificity <= 1.0):
        raise ValueError("sensitivity and specificity must be in [0, 1]")
    return math.sqrt(sensitivity * specificity)


def _gmean_at(scores, labels, threshold):
    pred = scores >= threshold
    pos = labels == 1
    tp = np.sum(pred & pos)
    fn = np.sum(~pred & pos)
    tn = np.sum(~pred & ~pos)
    fp = np.sum(pred & ~pos)
    sen = tp / (tp + fn) if tp + fn else 0.0
    spe = tn / (tn + fp) if tn + fp else 0.0
    return math.sqrt(sen * spe)


def optimal_threshold(val_scored) -> float:
    """Threshold maximizing G-mean on validation scores.

    Candidates are the midpoints between adjacent distinct sorted scores plus
    the endpoints 0 and 1; ties are broken toward the lowest threshold.
    """
    scores, labels = _scores_labels(val_scored)
    if len(set(labels.tolist())) < 2:
        raise EvaluationError("optimal threshold needs both classes in the validation set")
    distinct = np.unique(scores)
    candidates = [0.0]
    candidates.extend(((distinct[:-1] + distinct[1:]) / 2.0).tolist())
    candidates.append(1.0)
    best_t, best_g = 0.0, -1.0
    for t in candidates:
        g = _gmean_at(scores, labels, t)
        if g > best_g:
            best_t, best_g = t, g
    return best_t


def roc_auc(scored):
    """ROC points (fpr, tpr, threshold) and trapezoidal AUC.

    Thresholds sweep the distinct scores descending, plus +/-inf endpoints.
    Tied scores advance both counts at once, so the trapezoids give tied
    positive/negative pairs half credit and the AUC equals the Mann-Whitney
    statistic exactly (integer accumulation, one final division).
    """
    scores, labels = _scores_labels(scored)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    points = [(0.0, 0.0, math.inf)]
    tp = fp = 0
    area2 = 0  # sum of dFP * (TP_prev + TP_cur), exact in ints
    i = 0
    while i < scores.size:
        j = i
        while j < scores.size and scores[j] == scores[i]:
            j += 1
        dp = int(np.sum(labels[i:j] == 1))
        dn = (j - i) - dp
        tp += dp
        fp += dn
        area2 += dn * (2 * tp - dp)
        points.append((fp / n_neg, tp / n_pos, float(scores[i])))
        i = j
    points.append((1.0, 1.0, -math.inf))
    return points, area2 / (2 * n_pos * n_neg)


def aggregate_records(scored) -> list:
    """Collapse samples to one ScoredSample per record (mean of scores)."""
    by_record: dict = {}
    order = []
    for s in scored:
        if s.record_id not in by_record:
            by_record[s.record_id] = []
            order.append(s.record_id)
        by_record[s.record_id].append(s)
    out = []
    for rid in order:
        group = by_record[rid]
        labels = {g.label for g in group}
        if len(labels) != 1:
            raise EvaluationError(f"record {rid!r} has conflicting labels")
        score = float(np.mean([g.score for g in group]))
        out.append(ScoredSample(sample_id=rid, record_id=rid, label=group[0].label, score=score))
    return out


def evaluate(scored, threshold: float, mode: str = "sample_wise") -> MetricsReport:
    """Full metrics at a threshold, sample-wise or record-wise."""
    if mode not in ("sample_wise", "record_wise"):
        raise ValueError(f"mode must be 'sample_wise' or 'record_wise', got {mode!r}")
    if mode == "record_wise":
        scored = aggregate_records(scored)
    counts = confusion(scored, threshold)
    points, auc = roc_auc(scored)
    return MetricsReport(
        mode=mode,
        threshold=float(threshold),
        tp=counts.tp,
        tn=counts.tn,
        fp=counts.fp,
        fn=counts.fn,
        sensitivity=counts.sensitivity,
        specificity=counts.specificity,
        accuracy=counts.accuracy,
        gmean=gmean(counts.sensitivity, counts.specificity),
        auc=auc,
        roc=points,
    )


def write_roc_csv(points, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fpr,tpr,threshold\n")
        for fpr, tpr, thr in points:
            fh.write(f"{fpr:.6f},{tpr:.6f},{thr}\n")


def write_roc_svg(points, path, size: int = 360, margin: int = 40) -> None:
    """Standalone SVG line plot of the ROC curve (no plotting dependency)."""
    span = size - 2 * margin

    def sx(v):
        return margin + v * span

    def sy(v):
        return size - margin - v * span

    coords = " ".join(f"{sx(f):.1f},{sy(t):.1f}" for f, t, _ in points)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" '
        'fill="white" stroke="black"/>',
        f'<line x1="{sx(0):.1f}" y1="{sy(0):.1f}" x2="{sx(1):.1f}" y2="{sy(1):.1f}" '
        'stroke="#bbbbbb" stroke-dasharray="4 4"/>',
        f'<polyline points="{coords}" fill="none" stroke="#c0392b" stroke-width="1.5"/>',
        f'<text x="{size / 2:.0f}" y="{size - 8}" text-anchor="middle" '
        'font-size="12">False positive rate</text>',
        f'<text x="12" y="{size / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size / 2:.0f})">True positive rate</text>',
        "</svg>",
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
