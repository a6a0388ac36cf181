"""Detection metrics, ROC analysis, operating-threshold selection and latency benchmarking."""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParameterError, ThresholdError

LATENCY_BUDGET_MS = 10.0
# per-sample time reported for the original hardware; printed for comparison, never asserted
REFERENCE_MS_PER_SAMPLE = 0.0476


@dataclass(frozen=True)
class ConfusionCounts:
    tn: int
    fp: int
    fn: int
    tp: int

    def __post_init__(self):
        if min(self.tn, self.fp, self.fn, self.tp) < 0:
            raise ParameterError("confusion counts must be non-negative")

    @property
    def n(self):
        return self.tn + self.fp + self.fn + self.tp


def _aligned(y, scores):
    y = np.asarray(y).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if y.shape != scores.shape:
        raise DimensionError(f"labels {y.shape} and scores {scores.shape} differ in length")
    if y.size == 0:
        raise DimensionError("empty label/score vectors")
    return y, scores


def confusion(y, scores, threshold=0.5):
    """Counts for the rule ``score >= threshold`` -> attack."""
    if not 0.0 < threshold <= 1.0:
        raise ParameterError(f"threshold must lie in (0, 1], got {threshold}")
    y, scores = _aligned(y, scores)
    pred = scores >= threshold
    pos = y == 1
    return ConfusionCounts(
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
        tp=int(np.sum(pred & pos)),
    )


def _ratio(num, den):
    return num / den if den else None


def metrics_from_counts(cm):
    """Rate set from counts.  Rates with a zero denominator are ``None`` rather than 0."""
    if cm.n == 0:
        raise ParameterError("confusion counts are all zero")
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    if precision is None or recall is None:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "accuracy": (cm.tp + cm.tn) / cm.n,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "tpr": recall,
        "tnr": _ratio(cm.tn, cm.tn + cm.fp),
        "fpr": _ratio(cm.fp, cm.tn + cm.fp),
        "fnr": _ratio(cm.fn, cm.tp + cm.fn),
    }


def _sweep(y, scores):
    """Cumulative (fp, tp) counts at each distinct score, highest threshold first."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    pos = (y[order] == 1).astype(np.int64)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(pos)[last]
    fps = (last + 1) - tps
    return s[last], fps, tps


def roc_auc(y, scores):
    """Trapezoidal AUC and the ROC polyline ``[(fpr, tpr, threshold), ...]``.

    Each distinct score is one threshold, so tied scores form a single diagonal
    segment and contribute half credit.  The curve starts at (0, 0) with an
    infinite threshold and ends at (1, 1).
    """
    y, scores = _aligned(y, scores)
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ParameterError("ROC needs both classes present")
    thresholds, fps, tps = _sweep(y, scores)
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    points = list(zip(fpr.tolist(), tpr.tolist(), [float("inf")] + thresholds.tolist()))
    return auc, points


@dataclass(frozen=True)
class ThresholdProfile:
    """How to pick an operating threshold on validation scores.

    ``objective`` is ``max_f1``, ``max_fpr`` (keep FPR <= bound, maximize recall)
    or ``min_recall`` (keep recall >= bound, minimize FPR).
    """

    name: str
    objective: str = "max_f1"
    bound: float | None = None

    def __post_init__(self):
        if self.objective not in ("max_f1", "max_fpr", "min_recall"):
            raise ParameterError(f"unknown threshold objective {self.objective!r}")
        if self.objective != "max_f1" and (self.bound is None or not 0.0 < self.bound < 1.0):
            raise ParameterError(f"profile {self.name!r}: bound must lie in (0, 1), got {self.bound}")


PROFILES = {
    "balanced": ThresholdProfile("balanced", "max_f1"),
    "urllc-strict": ThresholdProfile("urllc-strict", "max_fpr", 0.02),
    "recall-max": ThresholdProfile("recall-max", "min_recall", 0.99),
}


def get_profile(name):
    try:
        return PROFILES[name]
    except KeyError:
        raise ParameterError(f"unknown threshold profile {name!r}; known: {sorted(PROFILES)}") from None


def select_threshold(y, scores, profile):
    """Operating threshold among the distinct validation scores.

    Ties on the objective resolve to the highest threshold (fewest alarms).
    """
    if isinstance(profile, str):
        profile = get_profile(profile)
    y, scores = _aligned(y, scores)
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ParameterError("threshold selection needs both classes present")
    thresholds, fps, tps = _sweep(y, scores)
    # only thresholds usable by confusion(), i.e. inside (0, 1]
    usable = (thresholds > 0.0) & (thresholds <= 1.0)
    if not usable.any():
        raise ThresholdError("no validation score lies in (0, 1]; no usable threshold", [])
    thresholds, fps, tps = thresholds[usable], fps[usable], tps[usable]
    fpr = fps / n_neg
    recall = tps / n_pos
    # arrays run from the highest threshold down, so argmax picks the highest on ties
    if profile.objective == "max_f1":
        f1 = 2 * tps / (2 * tps + fps + (n_pos - tps))
        return float(thresholds[int(np.argmax(f1))])
    if profile.objective == "max_fpr":
        feasible = fpr <= profile.bound
        score = np.where(feasible, recall, -np.inf)
    else:
        feasible = recall >= profile.bound
        score = np.where(feasible, -fpr, -np.inf)
    if not feasible.any():
        frontier = [{"threshold": float(t), "fpr": float(f), "recall": float(r)}
                    for t, f, r in zip(thresholds, fpr, recall)]
        raise ThresholdError(
            f"profile {profile.name!r} ({profile.objective} {profile.bound}) is infeasible; "
            f"achievable FPR range [{fpr.min():.4g}, {fpr.max():.4g}], "
            f"recall range [{recall.min():.4g}, {recall.max():.4g}]",
            frontier,
        )
    return float(thresholds[int(np.argmax(score))])


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    counts: ConfusionCounts
    rates: dict
    auc: float
    threshold: float
    profile: str
    roc: list = field(repr=False, default_factory=list)
    latency: dict | None = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "counts": asdict(self.counts),
            **self.rates,
            "auc": self.auc,
            "threshold": self.threshold,
            "profile": self.profile,
            "roc_points": len(self.roc),
            "latency": self.latency,
            "provenance": self.provenance,
        }

    def write_roc_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fpr", "tpr"])
            for fpr, tpr, _ in self.roc:
                w.writerow([repr(fpr), repr(tpr)])


def evaluate_scores(y, scores, threshold, profile="fixed", provenance=None):
    cm = confusion(y, scores, threshold)
    auc, roc = roc_auc(y, scores)
    return EvalReport(cm, metrics_from_counts(cm), auc, float(threshold), profile, roc,
                      provenance=provenance or {})


# ---------------------------------------------------------------------------
# latency


def latency_bench(infer, X, repetitions=50, batch_sizes=(1, 256), warmup=3, budget_ms=LATENCY_BUDGET_MS):
    """Wall-clock per-sample latency of ``infer(batch)`` for each batch size.

    ``warmup`` passes per batch size are run and discarded.  The budget verdict uses
    the smallest batch size (single-decision latency).  If the first and second
    halves of the timed repetitions disagree by more than 50% a RuntimeWarning is
    issued and ``unstable`` is set.
    """
    if repetitions < 5:
        raise ParameterError("latency_bench needs at least 5 repetitions")
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise DimensionError("latency_bench needs at least one sample")
    results = {}
    for bs in sorted(set(int(b) for b in batch_sizes)):
        if bs < 1:
            raise ParameterError("batch sizes must be >= 1")
        reps = np.resize(np.arange(X.shape[0]), bs)
        batch = X[reps]
        for _ in range(warmup):
            infer(batch)
        per_sample = np.empty(repetitions)
        for r in range(repetitions):
            t0 = time.perf_counter()
            infer(batch)
            per_sample[r] = (time.perf_counter() - t0) * 1e3 / bs
        half = repetitions // 2
        m1, m2 = per_sample[:half].mean(), per_sample[half:].mean()
        unstable = bool(abs(m1 - m2) > 0.5 * min(m1, m2))
        if unstable:
            warnings.warn(f"batch {bs}: latency halves differ ({m1:.4g} vs {m2:.4g} ms/sample)", RuntimeWarning,
                          stacklevel=2)
        results[str(bs)] = {
            "mean_ms": float(per_sample.mean()),
            "p50_ms": float(np.percentile(per_sample, 50)),
            "p99_ms": float(np.percentile(per_sample, 99)),
            "repetitions": repetitions,
            "unstable": unstable,
        }
    single = results[str(min(int(b) for b in batch_sizes))]
    return {
        "per_batch_size": results,
        "budget_ms": budget_ms,
        "single_decision_mean_ms": single["mean_ms"],
        "within_budget": single["mean_ms"] < budget_ms,
        "reference_ms_per_sample": REFERENCE_MS_PER_SAMPLE,
    }


def write_json_report(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=json_default) + "\n")


def json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")
