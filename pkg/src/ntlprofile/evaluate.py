"""Detection metrics: confusion counts, precision/recall/F1, ROC and AUC.

The positive class is NTL. Point predictions use ``score > threshold``; the ROC
sweep uses ``score >= t`` at every distinct score so that it reaches (1, 1).
"""

from __future__ import annotations

import csv
import hashlib
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import IO, Sequence

import numpy as np


@dataclass(frozen=True)
class ScoredSample:
    sample_id: str
    customer_id: str
    score: float
    truth: int  # 1 = NTL, 0 = normal

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"{self.sample_id}: score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class Counts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def confusion(scores, truths, threshold: float = 0.5) -> Counts:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths).astype(bool)
    pred = scores > threshold
    return Counts(
        tp=int(np.sum(pred & truths)),
        fp=int(np.sum(pred & ~truths)),
        tn=int(np.sum(~pred & ~truths)),
        fn=int(np.sum(~pred & truths)),
    )


def prf(counts: Counts) -> PRF:
    """Precision, recall and F1 of the positive class; 0/0 counts as 0."""
    p = _ratio(counts.tp, counts.tp + counts.fp)
    r = _ratio(counts.tp, counts.tp + counts.fn)
    return PRF(p, r, _ratio(2 * p * r, p + r))


def prf_negative(counts: Counts) -> PRF:
    mirrored = Counts(tp=counts.tn, fp=counts.fn, tn=counts.tp, fn=counts.fp)
    return prf(mirrored)


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    precision: np.ndarray
    auc: float


def roc_auc(scores, truths) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths).astype(bool)
    n_pos = int(truths.sum())
    n_neg = len(truths) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC/AUC needs at least one sample of each class")
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truths[order]
    tp = np.cumsum(t)
    fp = np.cumsum(~t)
    # last index of each run of equal scores
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    predicted = tp[last] + fp[last]
    precision = np.r_[1.0, tp[last] / predicted]
    # trapezoids on integer counts, one division at the end
    tps = np.r_[0, tp[last]].astype(np.int64)
    fps = np.r_[0, fp[last]].astype(np.int64)
    auc = float(np.sum(np.diff(fps) * (tps[1:] + tps[:-1])) / (2.0 * n_pos * n_neg))
    return RocCurve(thresholds, fpr, tpr, precision, auc)


def rank_auc(scores, truths) -> float:
    """Probability a random positive outscores a random negative (ties 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths).astype(bool)
    pos, neg = np.sort(scores[truths]), np.sort(scores[~truths])
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("rank AUC needs both classes")
    below = np.searchsorted(neg, pos, side="left")
    ties = np.searchsorted(neg, pos, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (len(pos) * len(neg)))


@dataclass
class MetricsReport:
    counts: Counts
    ntl: PRF
    normal: PRF
    auc: float | None
    threshold: float
    roc: RocCurve | None = field(default=None, repr=False)
    per_customer: dict | None = None
    config_hash: str = ""

    def to_dict(self) -> dict:
        out = {
            "counts": asdict(self.counts),
            "ntl": asdict(self.ntl),
            "normal": asdict(self.normal),
            "auc": self.auc,
            "threshold": self.threshold,
            "n_samples": self.counts.total,
            "config_hash": self.config_hash,
        }
        if self.per_customer is not None:
            out["per_customer"] = self.per_customer
        return out


def evaluate_scores(
    scores: Sequence[float],
    truths: Sequence[int],
    threshold: float = 0.5,
    customer_ids: Sequence[str] | None = None,
    config_hash: str = "",
) -> MetricsReport:
    counts = confusion(scores, truths, threshold)
    truths_arr = np.asarray(truths).astype(bool)
    roc = None
    if 0 < truths_arr.sum() < len(truths_arr):
        roc = roc_auc(scores, truths)
    report = MetricsReport(
        counts, prf(counts), prf_negative(counts), roc.auc if roc else None, threshold, roc, config_hash=config_hash
    )
    if customer_ids is not None:
        report.per_customer = per_customer_vote(scores, truths, customer_ids, threshold)
    return report


def evaluate_samples(samples: Sequence[ScoredSample], threshold: float = 0.5, config_hash: str = "", per_customer=False):
    scores = [s.score for s in samples]
    truths = [s.truth for s in samples]
    ids = [s.customer_id for s in samples] if per_customer else None
    return evaluate_scores(scores, truths, threshold, ids, config_hash)


def per_customer_vote(scores, truths, customer_ids, threshold: float = 0.5) -> dict:
    """Majority vote of window predictions per customer (ties -> NTL)."""
    votes: dict[str, list[int]] = defaultdict(list)
    truth_of: dict[str, int] = {}
    for score, truth, cid in zip(scores, truths, customer_ids):
        votes[cid].append(int(score > threshold))
        truth_of[cid] = int(truth)
    cids = sorted(votes)
    pred = np.array([2 * sum(votes[c]) >= len(votes[c]) for c in cids], dtype=float)
    truth = np.array([truth_of[c] for c in cids])
    counts = confusion(pred, truth, 0.5)
    return {"counts": asdict(counts), "ntl": asdict(prf(counts)), "n_customers": len(cids)}


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def write_report_line(report: MetricsReport, out: IO[str]) -> None:
    out.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")


def write_roc_csv(roc: RocCurve, out: IO[str]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(("threshold", "fpr", "tpr"))
    for t, f, r in zip(roc.thresholds, roc.fpr, roc.tpr):
        writer.writerow((repr(float(t)), repr(float(f)), repr(float(r))))


def write_pr_csv(roc: RocCurve, out: IO[str]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(("threshold", "precision", "recall"))
    for t, p, r in zip(roc.thresholds, roc.precision, roc.tpr):
        writer.writerow((repr(float(t)), repr(float(p)), repr(float(r))))
