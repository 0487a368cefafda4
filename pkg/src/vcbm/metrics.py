"""Action and explanation metrics in the column order of the result tables:
action Acc, action F1 (macro), explanation Acc (exact match), explanation
F1 (per-sample), F1 macro, F1 micro."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .schema import N_MANEUVERS

TABLE_COLUMNS = ("action_acc", "action_f1", "expl_acc", "expl_f1", "expl_f1_macro", "expl_f1_micro")


def _f1(tp, fp, fn):
    tp, fp, fn = (np.asarray(x, dtype=np.float64) for x in (tp, fp, fn))
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)


def multiclass_metrics(pred, true, n_classes: int = N_MANEUVERS) -> tuple[float, float]:
    """Accuracy and macro F1 over the classes that occur in ``pred`` or ``true``."""
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.size == 0:
        raise ValueError("no predictions to score")
    if pred.shape != true.shape:
        raise ValueError(f"prediction/label length mismatch: {pred.shape} vs {true.shape}")
    for arr in (pred, true):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"labels must lie in [0, {n_classes})")
    acc = float(np.mean(pred == true))
    present = np.union1d(np.unique(pred), np.unique(true))
    tp = np.array([np.sum((pred == c) & (true == c)) for c in present])
    fp = np.array([np.sum((pred == c) & (true != c)) for c in present])
    fn = np.array([np.sum((pred != c) & (true == c)) for c in present])
    return acc, float(np.mean(_f1(tp, fp, fn)))


def multilabel_metrics(probs, true, threshold: float = 0.5) -> tuple[float, float, float, float]:
    """(subset accuracy, per-sample F1, macro F1, micro F1) after thresholding.

    A sample with empty true and predicted sets scores F1 = 1; macro F1
    averages over labels that occur in either the truth or the predictions.
    """
    probs = np.asarray(probs, dtype=np.float64)
    true = np.asarray(true).astype(bool)
    if probs.shape != true.shape or probs.ndim != 2:
        raise ValueError(f"shape mismatch: probs {probs.shape} vs truth {true.shape}")
    if probs.size and (probs.min() < 0 or probs.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    pred = probs >= threshold
    subset = float(np.mean(np.all(pred == true, axis=1)))
    tp = pred & true
    fp = pred & ~true
    fn = ~pred & true
    s_tp, s_fp, s_fn = tp.sum(1), fp.sum(1), fn.sum(1)
    per_sample = np.where(s_tp + s_fp + s_fn == 0, 1.0, _f1(s_tp, s_fp, s_fn))
    l_tp, l_fp, l_fn = tp.sum(0), fp.sum(0), fn.sum(0)
    active = (l_tp + l_fp + l_fn) > 0
    macro = float(np.mean(_f1(l_tp, l_fp, l_fn)[active])) if active.any() else 1.0
    tot = 2 * l_tp.sum() + l_fp.sum() + l_fn.sum()
    micro = float(2 * l_tp.sum() / tot) if tot else 1.0
    return subset, float(per_sample.mean()), macro, micro


@dataclass
class MetricReport:
    action_acc: float
    action_f1: float
    expl_acc: float
    expl_f1: float
    expl_f1_macro: float
    expl_f1_micro: float
    n_samples: int = 0
    class_support: list[int] = field(default_factory=list)
    label_support: list[int] = field(default_factory=list)
    label_tp: list[int] = field(default_factory=list)
    label_fp: list[int] = field(default_factory=list)
    label_fn: list[int] = field(default_factory=list)

    def row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in TABLE_COLUMNS}

    def to_dict(self) -> dict:
        return asdict(self)


def report(maneuver_probs, labels, expl_probs, expl_true, threshold: float = 0.5) -> MetricReport:
    maneuver_probs = np.asarray(maneuver_probs)
    labels = np.asarray(labels, dtype=np.int64)
    expl_true = np.asarray(expl_true).astype(bool)
    acc, f1 = multiclass_metrics(np.argmax(maneuver_probs, axis=1), labels)
    subset, f1s, mac, mic = multilabel_metrics(expl_probs, expl_true, threshold)
    pred = np.asarray(expl_probs) >= threshold
    return MetricReport(
        acc,
        f1,
        subset,
        f1s,
        mac,
        mic,
        n_samples=int(labels.size),
        class_support=np.bincount(labels, minlength=N_MANEUVERS).tolist(),
        label_support=expl_true.sum(0).astype(int).tolist(),
        label_tp=(pred & expl_true).sum(0).astype(int).tolist(),
        label_fp=(pred & ~expl_true).sum(0).astype(int).tolist(),
        label_fn=(~pred & expl_true).sum(0).astype(int).tolist(),
    )


def label_f1(rep: MetricReport, label: int) -> float:
    return float(_f1(rep.label_tp[label], rep.label_fp[label], rep.label_fn[label]))

