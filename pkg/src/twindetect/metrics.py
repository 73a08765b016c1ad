"""Detection metrics and ground-truth labeling.

AUROC uses the rank (Mann-Whitney) formulation with ties counted as 0.5.
TNR@TPR95 sweeps all distinct score values as candidate thresholds with the
rule `score > threshold => predicted OOD`, picks the threshold whose TPR is
closest to 0.95 (ties toward higher TPR, then higher TNR), and returns
1 - FPR there. F1 is reported per class with the F1 = 0 convention when
precision + recall is zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "LabeledScore",
    "MetricsReport",
    "label_windows",
    "auroc",
    "tnr_at_tpr95",
    "f1_per_class",
    "roc_points",
    "compute_report",
]


@dataclass(frozen=True)
class LabeledScore:
    score: float
    is_ood_truth: bool
    start_step: int = 0
    end_step: int = 0

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("score must be finite")


@dataclass(frozen=True)
class MetricsReport:
    auroc: float
    tnr_at_tpr95: float
    f1_ind: float
    f1_ood: float
    tp: int
    fp: int
    tn: int
    fn: int


def label_windows(windows, ood_interval) -> list[bool]:
    """A window is OOD-truth iff at least half of its forecast steps
    (inclusive [start, end]) fall inside the half-open disturbance interval."""
    labels = []
    for win in windows:
        start = getattr(win, "start_time_step", None)
        if start is None:
            start, end = win
        else:
            end = win.end_time_step
        if ood_interval is None:
            labels.append(False)
            continue
        lo, hi = ood_interval
        steps = end - start + 1
        overlap = max(0, min(end + 1, hi) - max(start, lo))
        labels.append(overlap * 2 >= steps)
    return labels


def _split(scores: Sequence[LabeledScore]):
    pos = np.array([s.score for s in scores if s.is_ood_truth])
    neg = np.array([s.score for s in scores if not s.is_ood_truth])
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need at least one OOD and one IND score")
    return pos, neg


def auroc(scores: Sequence[LabeledScore]) -> float:
    """Probability a random OOD score outranks a random IND score
    (ties count half)."""
    pos, neg = _split(scores)
    ranks = rankdata(np.concatenate([pos, neg]))
    r_pos = ranks[: len(pos)].sum()
    return float((r_pos - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))


def tnr_at_tpr95(scores: Sequence[LabeledScore], target_tpr: float = 0.95) -> float:
    pos, neg = _split(scores)
    candidates = np.concatenate([[-np.inf], np.unique(np.concatenate([pos, neg]))])
    tpr = (pos[None, :] > candidates[:, None]).mean(axis=1)
    fpr = (neg[None, :] > candidates[:, None]).mean(axis=1)
    tnr = 1.0 - fpr
    # closest TPR to target; ties toward higher TPR, then higher TNR
    order = np.lexsort((-tnr, -tpr, np.abs(tpr - target_tpr)))
    return float(tnr[order[0]])


def f1_per_class(predictions: Sequence[bool], truth: Sequence[bool]):
    """(f1_ind, f1_ood, confusion) with OOD as the positive class for the
    confusion counts."""
    pred = np.asarray(predictions, dtype=bool)
    true = np.asarray(truth, dtype=bool)
    if pred.shape != true.shape:
        raise ValueError("predictions and truth must have equal length")
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    tn = int(np.sum(~pred & ~true))
    fn = int(np.sum(~pred & true))

    def f1(tp_, fp_, fn_):
        p_den, r_den = tp_ + fp_, tp_ + fn_
        p = tp_ / p_den if p_den else 0.0
        r = tp_ / r_den if r_den else 0.0
        return 2 * p * r / (p + r) if (p + r) > 0 else 0.0

    f1_ood = f1(tp, fp, fn)
    f1_ind = f1(tn, fn, fp)  # IND as positive class
    return f1_ind, f1_ood, {"tp": tp, "fp": fp, "tn": tn, "fn": fn}


def roc_points(scores: Sequence[LabeledScore]) -> list[tuple[float, float, float]]:
    """(threshold, fpr, tpr) per candidate threshold, for external plotting."""
    pos, neg = _split(scores)
    candidates = np.concatenate([[-np.inf], np.unique(np.concatenate([pos, neg]))])
    out = []
    for a in candidates:
        out.append((float(a), float((neg > a).mean()), float((pos > a).mean())))
    return out


def compute_report(scores: Sequence[LabeledScore],
                   operating_threshold: float) -> MetricsReport:
    """Threshold-free metrics plus F1/confusion at the given operating point."""
    truth = [s.is_ood_truth for s in scores]
    pred = [s.score > operating_threshold for s in scores]
    f1_ind, f1_ood, conf = f1_per_class(pred, truth)
    return MetricsReport(
        auroc=auroc(scores),
        tnr_at_tpr95=tnr_at_tpr95(scores),
        f1_ind=f1_ind, f1_ood=f1_ood,
        tp=conf["tp"], fp=conf["fp"], tn=conf["tn"], fn=conf["fn"])
