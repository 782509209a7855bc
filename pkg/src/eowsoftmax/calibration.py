"""Calibration and OOD metrics.

Predictions are passed as parallel arrays rather than record objects:
``confidence`` (score of the predicted class), ``predicted`` and ``labels``.
An OOD sample carries the label :data:`OOD_LABEL`.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .model import log_softmax, softmax

OOD_LABEL = -1
NLL_FLOOR = 1e-12
OOD_THRESHOLDS = (0.0, 0.25, 0.5, 0.75)


@dataclass
class EceReport:
    n_bins: int
    counts: np.ndarray
    conf_sums: np.ndarray
    correct_sums: np.ndarray
    ece: float
    n: int

    @property
    def edges(self):
        return np.linspace(0.0, 1.0, self.n_bins + 1)

    def reliability_rows(self):
        """One row per bin: ``(bin_low, bin_high, count, avg_conf, avg_acc)``; empty bins give NaN averages."""
        edges = self.edges
        rows = []
        for i in range(self.n_bins):
            c = int(self.counts[i])
            avg_conf = self.conf_sums[i] / c if c else math.nan
            avg_acc = self.correct_sums[i] / c if c else math.nan
            rows.append((float(edges[i]), float(edges[i + 1]), c, float(avg_conf), float(avg_acc)))
        return rows

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_low", "bin_high", "count", "avg_conf", "avg_acc"])
            for row in self.reliability_rows():
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def bin_index(confidence, n_bins: int) -> np.ndarray:
    """Bins ``[(l-1)/L, l/L)`` with the last bin closed at 1."""
    idx = np.floor(np.asarray(confidence, dtype=np.float64) * n_bins).astype(np.int64)
    return np.minimum(idx, n_bins - 1)


def ece(confidence, correct, n_bins: int = 15) -> EceReport:
    """Expected calibration error in the summed form
    ``sum_l |sum_{I_l} conf - sum_{I_l} correct| / N``."""
    confidence = np.asarray(confidence, dtype=np.float64).reshape(-1)
    correct = np.asarray(correct, dtype=np.float64).reshape(-1)
    if confidence.size == 0:
        raise ValueError("ece needs at least one prediction")
    if confidence.shape != correct.shape:
        raise ValueError("confidence and correct must have the same length")
    if np.any(~np.isfinite(confidence)) or np.any(confidence < 0) or np.any(confidence > 1):
        raise ValueError("confidence values must lie in [0, 1]")
    if n_bins < 1:
        raise ValueError("n_bins must be positive")
    idx = bin_index(confidence, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    order = np.argsort(idx, kind="stable")
    bounds = np.searchsorted(idx[order], np.arange(n_bins + 1))
    conf_sums = np.zeros(n_bins)
    correct_sums = np.zeros(n_bins)
    gaps = []
    # correctly rounded sums keep hand-checkable cases exact
    for b in range(n_bins):
        members = order[bounds[b] : bounds[b + 1]]
        c, a = confidence[members], correct[members]
        conf_sums[b] = math.fsum(c)
        correct_sums[b] = math.fsum(a)
        gaps.append(abs(math.fsum(np.concatenate([c, -a]))))
    n = confidence.size
    value = math.fsum(gaps) / n
    return EceReport(n_bins, counts, conf_sums, correct_sums, value, n)


@dataclass
class NllResult:
    value: float
    mode: str
    clamped: int = 0


def nll(probs, labels, mode: str = "true", num_classes: int | None = None) -> NllResult:
    """Mean negative log-likelihood, clamping scored probabilities at 1e-12.

    ``mode="true"`` scores ``labels``. ``mode="predicted"`` scores the argmax
    over the first ``num_classes`` columns (all columns by default) and
    ignores ``labels``.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if probs.shape[0] == 0:
        raise ValueError("nll needs at least one prediction")
    if mode == "true":
        idx = np.asarray(labels, dtype=np.int64)
    elif mode == "predicted":
        k = probs.shape[1] if num_classes is None else num_classes
        idx = np.argmax(probs[:, :k], axis=1)
    else:
        raise ValueError(f"unknown NLL mode {mode!r}")
    if idx.shape != (probs.shape[0],):
        raise ValueError("need one label per row")
    p = probs[np.arange(probs.shape[0]), idx]
    clamped = int(np.sum(p < NLL_FLOOR))
    return NllResult(float(-np.mean(np.log(np.maximum(p, NLL_FLOOR)))), mode, clamped)


def nll_from_logits(logits, labels) -> float:
    """True-label NLL straight from logits (stable log-softmax)."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64)
    return float(-np.mean(log_softmax(logits)[np.arange(len(labels)), labels]))


@dataclass
class Evaluation:
    accuracy: float
    ece: EceReport
    nll_true: NllResult
    nll_predicted: NllResult
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "acc": self.accuracy,
            "ece": self.ece.ece,
            "nll_true": self.nll_true.value,
            "nll_predicted": self.nll_predicted.value,
            "nll_clamped": self.nll_true.clamped + self.nll_predicted.clamped,
            "n": self.ece.n,
            "n_bins": self.ece.n_bins,
            **self.extra,
        }


def scoring_probs(logits, confidence: str = "open") -> np.ndarray:
    """Probabilities that metrics read: K+1-way for ``open``, K-way for ``closed``."""
    logits = np.atleast_2d(logits)
    if confidence == "closed":
        return softmax(logits[:, :-1])
    return softmax(logits)


def evaluate_logits(logits, labels, confidence: str = "open", n_bins: int = 15) -> Evaluation:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1] - 1
    probs = scoring_probs(logits, confidence)
    pred = np.argmax(probs[:, :k], axis=1)
    conf = probs[np.arange(len(pred)), pred]
    correct = pred == labels
    return Evaluation(
        accuracy=float(np.mean(correct)),
        ece=ece(conf, correct, n_bins),
        nll_true=nll(probs, labels, "true"),
        nll_predicted=nll(probs, None, "predicted", num_classes=k),
    )


def evaluate(model, inputs, labels, n_bins: int = 15, temperature: float | None = None) -> Evaluation:
    logits = model.logits(inputs)
    if temperature is not None:
        logits = apply_temperature(logits, temperature, model.confidence)
    return evaluate_logits(logits, labels, model.confidence, n_bins)


def apply_temperature(logits, temperature: float, confidence: str = "closed") -> np.ndarray:
    """Divide the scored logits by ``temperature``; in closed mode the unused last logit is kept as is."""
    logits = np.array(logits, dtype=np.float64)
    if confidence == "closed":
        logits[:, :-1] /= temperature
        return logits
    return logits / temperature


def temperature_fit(logits, labels, bounds=(-3.0, 3.0), tol: float = 1e-4) -> float:
    """Temperature ``T`` minimising the true-label NLL of ``softmax(logits / T)``.

    The search runs over ``log T`` inside ``bounds``. ``logits`` are the logits
    that get scaled (pass the first K columns for a closed-world model).
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[0] == 0:
        raise ValueError("temperature_fit needs a non-empty validation set")
    if np.unique(labels).size < 2:
        raise ValueError("validation set contains a single class; temperature is not identifiable")

    def objective(log_t):
        return nll_from_logits(logits / math.exp(log_t), labels)

    res = minimize_scalar(objective, bounds=bounds, method="bounded", options={"xatol": tol})
    return float(math.exp(res.x))


@dataclass
class ThresholdRow:
    threshold: float
    kept: int
    kept_correct: int
    kept_ood: int
    accuracy: float | None


def ood_threshold_accuracy(in_conf, in_correct, ood_conf, thresholds=OOD_THRESHOLDS) -> list[ThresholdRow]:
    """Accuracy over predictions whose confidence exceeds each threshold.

    Kept OOD predictions always count as errors. A threshold that rejects
    everything yields ``accuracy=None``.
    """
    in_conf = np.asarray(in_conf, dtype=np.float64)
    in_correct = np.asarray(in_correct, dtype=bool)
    ood_conf = np.asarray(ood_conf, dtype=np.float64)
    if in_conf.size == 0 or ood_conf.size == 0:
        raise ValueError("need both in-distribution and OOD predictions")
    return ood_threshold_rows(in_conf, in_correct, ood_conf, thresholds)


def ood_threshold_rows(in_conf, in_correct, ood_conf, thresholds=OOD_THRESHOLDS) -> list[ThresholdRow]:
    rows = []
    for tau in thresholds:
        keep_in = in_conf > tau
        kept_ood = int(np.sum(ood_conf > tau))
        kept = int(keep_in.sum()) + kept_ood
        kept_correct = int(np.sum(in_correct & keep_in))
        acc = kept_correct / kept if kept else None
        rows.append(ThresholdRow(float(tau), kept, kept_correct, kept_ood, acc))
    return rows


def write_threshold_table(rows, csv_path=None, json_path=None):
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["threshold", "kept", "kept_correct", "kept_ood", "accuracy"])
            for r in rows:
                w.writerow([r.threshold, r.kept, r.kept_correct, r.kept_ood,
                            "undefined" if r.accuracy is None else repr(r.accuracy)])
    if json_path is not None:
        with open(json_path, "w") as f:
            json.dump([r.__dict__ for r in rows], f, indent=2)


@dataclass
class SeverityRow:
    severity: int
    mean_ece: float
    std_ece: float
    per_type: dict


def corruption_sweep(model, inputs, labels, corruptions, severities=(1, 2, 3, 4, 5), seed: int = 0,
                     n_bins: int = 15, clip=True) -> list[SeverityRow]:
    """ECE under each corruption type and severity; mean and std across types per severity."""
    from .data import corrupt

    rows = []
    for sev in severities:
        per_type = {}
        for i, kind in enumerate(corruptions):
            x = corrupt(inputs, kind, sev, seed=seed + 1000 * int(sev) + i, clip=clip)
            per_type[kind] = evaluate(model, x, labels, n_bins).ece.ece
        values = np.array(list(per_type.values()))
        rows.append(SeverityRow(int(sev), float(values.mean()), float(values.std()), per_type))
    return rows


def write_severity_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        kinds = list(rows[0].per_type) if rows else []
        w.writerow(["severity", "mean_ece", "std_ece"] + [f"ece_{k}" for k in kinds])
        for r in rows:
            w.writerow([r.severity, repr(r.mean_ece), repr(r.std_ece)] + [repr(r.per_type[k]) for k in kinds])
