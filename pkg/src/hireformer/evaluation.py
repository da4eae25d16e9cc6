"""Binary-classification metrics, threshold calibration, bootstrap intervals
and the random/majority baselines.

Predictions are ``score >= threshold``.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .numerics.rng import RngStream


class MetricError(ValueError):
    """The metric is undefined for this input (e.g. one class only)."""


class DegenerateDataError(RuntimeError):
    pass


def _arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    return s, y


def roc_auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted one half."""
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC-AUC needs both classes")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def confusion(preds, labels) -> tuple[int, int, int, int]:
    p, y = _arrays(preds, labels)
    p = p.astype(np.int64)
    tp = int(np.sum((p == 1) & (y == 1)))
    tn = int(np.sum((p == 0) & (y == 0)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    return tp, tn, fp, fn


def mcc(preds, labels) -> float:
    tp, tn, fp, fn = confusion(preds, labels)
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return float((tp * tn - fp * fn) / math.sqrt(denom))


def f1(preds, labels) -> float:
    tp, _, fp, fn = confusion(preds, labels)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


METRICS = {"mcc": mcc, "f1": f1}


def threshold_candidates(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2
    return np.unique(np.concatenate([[0.0], mids, [1.0]]))


def calibrate_threshold(scores, labels, metric: str = "mcc") -> float:
    """Smallest candidate threshold that maximizes ``metric`` on this data."""
    s, y = _arrays(scores, labels)
    if s.size == 0:
        raise ValueError("calibration needs at least one score")
    fn = METRICS[metric]
    best_t, best_v = None, -math.inf
    for t in threshold_candidates(s):
        v = fn(s >= t, y)
        if v > best_v:
            best_t, best_v = float(t), v
    return best_t


@dataclass(frozen=True)
class BootstrapCI:
    n_repeats: int = 100
    sample_size: int = 300
    low: float = 2.5
    high: float = 97.5
    seed: int = 0
    max_redraws: int = 1000

    def __post_init__(self):
        if self.n_repeats < 1 or self.sample_size < 1:
            raise ValueError("n_repeats and sample_size must be positive")


@dataclass
class BootstrapResult:
    low: float
    high: float
    values: np.ndarray
    redraws: int


def _repeat(s, y, metric_fn, spec: BootstrapCI, r: int) -> tuple[float, int]:
    gen = RngStream(spec.seed, "bootstrap", (r,)).generator()
    redraws = 0
    while True:
        idx = gen.integers(0, len(s), size=spec.sample_size)
        try:
            return float(metric_fn(s[idx], y[idx])), redraws
        except MetricError:
            redraws += 1
            if redraws > spec.max_redraws:
                raise DegenerateDataError(f"repeat {r}: {redraws} consecutive undefined resamples") from None


def bootstrap_ci(scores, labels, metric_fn: Callable, spec: BootstrapCI = BootstrapCI(),
                 workers: int = 1) -> BootstrapResult:
    """Percentile interval of ``metric_fn`` over seeded resamples.

    Repeat ``r`` draws from its own stream ``(seed, r)``, so the bounds do not
    depend on ``workers``.
    """
    s, y = _arrays(scores, labels)
    if s.size < 2:
        raise ValueError("bootstrap needs at least two observations")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            res = list(pool.map(lambda r: _repeat(s, y, metric_fn, spec, r), range(spec.n_repeats)))
    else:
        res = [_repeat(s, y, metric_fn, spec, r) for r in range(spec.n_repeats)]
    values = np.array([v for v, _ in res])
    lo, hi = np.percentile(values, [spec.low, spec.high])
    return BootstrapResult(float(lo), float(hi), values, sum(k for _, k in res))


# --- reports -------------------------------------------------------------------------------

@dataclass
class MetricValue:
    point: float
    low: float
    high: float


@dataclass
class EvalReport:
    name: str
    metrics: dict = field(default_factory=dict)      # "roc_auc" | "mcc" | "f1" -> MetricValue
    thresholds: dict = field(default_factory=dict)
    n: int = 0
    seed: int = 0
    redraws: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["metrics"] = {k: asdict(v) for k, v in self.metrics.items()}
        return d

    def row(self) -> str:
        cells = []
        for key in ("roc_auc", "mcc", "f1"):
            m = self.metrics[key]
            cells.append(f"[{100 * m.low:5.1f}%, {100 * m.high:5.1f}%]")
        return f"{self.name:<12} " + "  ".join(cells)


def format_table(reports: Sequence[EvalReport]) -> str:
    head = f"{'model':<12} {'ROC-AUC':^16}  {'MCC':^16}  {'F1':^16}"
    return "\n".join([head] + [r.row() for r in reports])


def report_from_scores(name: str, scores, labels, thresholds: dict, spec: BootstrapCI = BootstrapCI(),
                       workers: int = 1) -> EvalReport:
    s, y = _arrays(scores, labels)
    rep = EvalReport(name, thresholds=dict(thresholds), n=int(s.size), seed=spec.seed)
    fns = {
        "roc_auc": roc_auc,
        "mcc": lambda a, b: mcc(a >= thresholds["mcc"], b),
        "f1": lambda a, b: f1(a >= thresholds["f1"], b),
    }
    for key, fn in fns.items():
        try:
            point = fn(s, y)
        except MetricError:
            point = float("nan")
        ci = bootstrap_ci(s, y, fn, spec, workers)
        rep.metrics[key] = MetricValue(float(point), ci.low, ci.high)
        rep.redraws += ci.redraws
    return rep


def evaluate_model_scores(name: str, val_scores, val_labels, test_scores, test_labels,
                          spec: BootstrapCI = BootstrapCI(), workers: int = 1) -> EvalReport:
    """Calibrate MCC/F1 thresholds on validation, report test metrics with CIs."""
    th = {m: calibrate_threshold(val_scores, val_labels, m) for m in ("mcc", "f1")}
    return report_from_scores(name, test_scores, test_labels, th, spec, workers)


def majority_class(labels_train) -> int:
    y = np.asarray(labels_train)
    return int(y.mean() >= 0.5)


def baseline_metrics(labels_train, labels_eval, spec: BootstrapCI = BootstrapCI(),
                     workers: int = 1) -> dict[str, EvalReport]:
    """Reports for the random (uniform scores, threshold 0.5) and majority baselines.

    The majority baseline scores every example 0.5 and predicts the training
    majority class, so its ROC-AUC is exactly 0.5 and its MCC exactly 0.
    """
    y = np.asarray(labels_eval).astype(np.int64)
    cls = majority_class(labels_train)
    const = np.full(y.size, 0.5)
    # a threshold at or below 0.5 predicts 1 for every example, above it 0
    t_major = 0.5 if cls == 1 else 1.0
    majority = report_from_scores("majority", const, y, {"mcc": t_major, "f1": t_major}, spec, workers)
    scores = RngStream(spec.seed, "random-baseline").generator().random(y.size)
    random = report_from_scores("random", scores, y, {"mcc": 0.5, "f1": 0.5}, spec, workers)
    return {"random": random, "majority": majority}


def save_report(path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_json() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
