"""Top-label calibration metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import UsageError

DEFAULT_BINS = 15


@dataclass
class ReliabilityReport:
    bin_edges: list[float]
    counts: list[int]
    confidence: list[float]
    accuracy: list[float]
    ece: float
    top1_accuracy: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class CalibrationSummary:
    mean_local_ece: float
    max_local_ece: float
    var_local_ece: float
    global_ece: float
    global_top1: float


def bin_edges(num_bins: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, num_bins + 1)


def ece(probs: np.ndarray, labels, num_bins: int = DEFAULT_BINS) -> ReliabilityReport:
    """Expected calibration error over equal-width bins (c_{m-1}, c_m].

    Confidence is the max row probability and the prediction its argmax (lowest
    index on ties). Empty bins contribute nothing; confidence 0 lands in bin 1.
    """
    if num_bins < 1:
        raise UsageError("num_bins must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    if n < 1 or probs.shape[0] != n:
        raise UsageError("need at least one prediction and one label per row")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    edges = bin_edges(num_bins)
    bins = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, num_bins - 1)
    counts = np.bincount(bins, minlength=num_bins)
    conf_sum = np.bincount(bins, weights=conf, minlength=num_bins)
    acc_sum = np.bincount(bins, weights=correct, minlength=num_bins)
    nonempty = counts > 0
    conf_m = np.zeros(num_bins)
    acc_m = np.zeros(num_bins)
    conf_m[nonempty] = conf_sum[nonempty] / counts[nonempty]
    acc_m[nonempty] = acc_sum[nonempty] / counts[nonempty]
    value = float(np.sum(counts / n * np.abs(conf_m - acc_m)))
    return ReliabilityReport(
        bin_edges=edges.tolist(),
        counts=counts.tolist(),
        confidence=conf_m.tolist(),
        accuracy=acc_m.tolist(),
        ece=value,
        top1_accuracy=float(correct.mean()),
    )


def topk_accuracy(probs: np.ndarray, labels, k: int) -> float:
    """Fraction of rows whose label is among the k highest probabilities.

    Ranking is a stable descending sort, so equal probabilities favour the lower
    class index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if not 1 <= k <= probs.shape[1]:
        raise UsageError(f"k must lie in [1, {probs.shape[1]}]")
    ranked = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return float((ranked == labels[:, None]).any(axis=1).mean())


def local_global_summary(per_client: list[ReliabilityReport], global_report: ReliabilityReport) -> CalibrationSummary:
    if not per_client:
        raise UsageError("need at least one client report")
    local = np.array([r.ece for r in per_client])
    return CalibrationSummary(
        mean_local_ece=float(local.mean()),
        max_local_ece=float(local.max()),
        var_local_ece=float(local.var()),
        global_ece=global_report.ece,
        global_top1=global_report.top1_accuracy,
    )
