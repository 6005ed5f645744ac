"""Threshold-free OOD detection metrics.

Scores are "higher = more in-distribution" and a sample is accepted as
in-distribution when ``score >= threshold``. All reported values are
percentages in [0, 100].
"""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import FormatError, UsageError

TARGET_TPR = 0.95


def _scores(x, name):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise UsageError(f"{name} is empty")
    if not np.all(np.isfinite(x)):
        raise UsageError(f"{name} contains non-finite scores")
    return x


def threshold_at_tpr(in_scores, target_tpr=TARGET_TPR):
    """Largest ``t`` with at least ``target_tpr`` of ``in_scores >= t``."""
    s = _scores(in_scores, "in_scores")
    if not 0.0 < target_tpr <= 1.0:
        raise UsageError("target_tpr must lie in (0, 1]")
    # round() guards against 0.95 * 100 landing a hair above 95
    k = math.ceil(round(target_tpr * s.size, 9))
    return float(np.sort(s)[::-1][k - 1])


def fpr_at_tpr(in_scores, out_scores, target_tpr=TARGET_TPR):
    in_s = _scores(in_scores, "in_scores")
    out_s = _scores(out_scores, "out_scores")
    t = threshold_at_tpr(in_s, target_tpr)
    return 100.0 * float(np.mean(out_s >= t))


def realized_tpr(in_scores, target_tpr=TARGET_TPR):
    in_s = _scores(in_scores, "in_scores")
    return float(np.mean(in_s >= threshold_at_tpr(in_s, target_tpr)))


def detection_error(in_scores, out_scores, target_tpr=TARGET_TPR):
    """``0.5 (1 - TPR) + 0.5 FPR`` with TPR pinned to ``target_tpr``.

    The threshold rule guarantees a realised TPR of at least the target; the
    miss term uses the target itself so a perfect detector scores exactly
    ``50 (1 - target_tpr)`` (2.5 at 95 %) for any sample count.
    """
    fpr = fpr_at_tpr(in_scores, out_scores, target_tpr)
    # 100 * target first: 100 * 0.95 rounds to 95 exactly, 1 - 0.95 does not
    return 0.5 * (100.0 - 100.0 * target_tpr) + 0.5 * fpr


def auroc(in_scores, out_scores):
    """Trapezoidal ROC area over all distinct thresholds (ties count ½)."""
    in_s = _scores(in_scores, "in_scores")
    out_s = _scores(out_scores, "out_scores")
    tpr, fpr = _roc_points(in_s, out_s)
    return 100.0 * float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) * 0.5))


def _sweep(pos, neg):
    """Cumulative (TP, FP) counts at each distinct threshold, descending."""
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_pos = scores[order], is_pos[order]
    last = np.r_[np.flatnonzero(np.diff(scores) != 0), scores.size - 1]
    tp = np.cumsum(is_pos)[last]
    fp = (last + 1) - tp
    return tp, fp


def _roc_points(in_s, out_s):
    tp, fp = _sweep(in_s, out_s)
    tpr = np.r_[0.0, tp / in_s.size]
    fpr = np.r_[0.0, fp / out_s.size]
    return tpr, fpr


def roc_curve(in_scores, out_scores):
    """``(fpr, tpr)`` arrays as fractions, starting at (0, 0)."""
    tpr, fpr = _roc_points(_scores(in_scores, "in_scores"), _scores(out_scores, "out_scores"))
    return fpr, tpr


def aupr(pos_scores, neg_scores):
    """Step-wise area under the precision/recall curve: Σ (R_i - R_{i-1}) P_i."""
    pos = _scores(pos_scores, "pos_scores")
    neg = _scores(neg_scores, "neg_scores")
    tp, fp = _sweep(pos, neg)
    precision = tp / (tp + fp)
    recall = tp / pos.size
    d_recall = np.diff(np.r_[0.0, recall])
    return 100.0 * float(np.sum(d_recall * precision))


def aupr_in(in_scores, out_scores):
    return aupr(in_scores, out_scores)


def aupr_out(in_scores, out_scores):
    return aupr(-np.asarray(out_scores, dtype=np.float64), -np.asarray(in_scores, dtype=np.float64))


# -- brute-force oracles -------------------------------------------------------------


def auroc_pair_count(in_scores, out_scores):
    """O(N·M) probability that an in-sample outranks an out-sample, ties ½."""
    in_s = _scores(in_scores, "in_scores")[:, None]
    out_s = _scores(out_scores, "out_scores")[None, :]
    wins = np.sum(in_s > out_s) + 0.5 * np.sum(in_s == out_s)
    return 100.0 * float(wins) / (in_s.size * out_s.size)


def aupr_enumerate(pos_scores, neg_scores):
    """AUPR by counting TP/FP afresh at every candidate threshold."""
    pos = _scores(pos_scores, "pos_scores")
    neg = _scores(neg_scores, "neg_scores")
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(pos.tolist()) | set(neg.tolist()), reverse=True):
        tp = int(np.count_nonzero(pos >= t))
        fp = int(np.count_nonzero(neg >= t))
        recall = tp / pos.size
        area += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return 100.0 * area


# -- reports -------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreRecord:
    score: float
    is_in_distribution: bool
    predicted_class: int = None
    true_class: int = None


@dataclass(frozen=True)
class MetricsReport:
    fpr_at_95_tpr: float
    detection_error: float
    auroc: float
    aupr_in: float
    aupr_out: float
    tnr_at_95_tpr: float
    detection_accuracy: float
    n_in: int
    n_out: int

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_csv(self, header=True):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = [f.name for f in fields(self)]
        if header:
            w.writerow(names)
        w.writerow([repr(getattr(self, k)) for k in names])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d):
        return cls(**{f.name: (int if f.name.startswith("n_") else float)(d[f.name]) for f in fields(cls)})


def evaluate_scores(in_scores, out_scores):
    in_s = _scores(in_scores, "in_scores")
    out_s = _scores(out_scores, "out_scores")
    fpr = fpr_at_tpr(in_s, out_s)
    err = detection_error(in_s, out_s)
    return MetricsReport(
        fpr_at_95_tpr=fpr,
        detection_error=err,
        auroc=auroc(in_s, out_s),
        aupr_in=aupr_in(in_s, out_s),
        aupr_out=aupr_out(in_s, out_s),
        tnr_at_95_tpr=100.0 - fpr,
        detection_accuracy=100.0 - err,
        n_in=int(in_s.size),
        n_out=int(out_s.size),
    )


def evaluate(in_records, out_records):
    """Full metric suite from two collections of :class:`ScoreRecord`."""
    return evaluate_scores([r.score for r in in_records], [r.score for r in out_records])


# -- score files ---------------------------------------------------------------------

SCORE_HEADER = ["score", "is_in", "predicted_class", "true_class"]


def write_score_csv(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for r in records:
            w.writerow([repr(float(r.score)), int(bool(r.is_in_distribution)),
                        "" if r.predicted_class is None else int(r.predicted_class),
                        "" if r.true_class is None else int(r.true_class)])


def read_score_csv(path):
    """Parse a score file; the two class columns are optional."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"score", "is_in"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: header must contain score,is_in")
        records = []
        for lineno, row in enumerate(reader, start=2):
            try:
                pred = row.get("predicted_class") or None
                true = row.get("true_class") or None
                records.append(ScoreRecord(
                    float(row["score"]), row["is_in"].strip().lower() in ("1", "true"),
                    None if pred is None else int(pred), None if true is None else int(true)))
            except (TypeError, ValueError):
                raise FormatError(f"{path}: malformed row at line {lineno}") from None
    return records


def split_records(records):
    in_r = [r for r in records if r.is_in_distribution]
    out_r = [r for r in records if not r.is_in_distribution]
    return in_r, out_r
