"""Edge-recovery scores against a simulated truth."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import DimensionMismatch


@dataclass(frozen=True)
class ConfusionMetrics:
    tp: int
    fp: int
    tn: int
    fn: int
    mcc: float
    tpr: float
    fpr: float
    fdr: float

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(a, b) -> float:
    return float(a / b) if b > 0 else 0.0


def from_counts(tp: int, fp: int, tn: int, fn: int) -> ConfusionMetrics:
    denom = float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / np.sqrt(denom) if denom > 0 else 0.0
    return ConfusionMetrics(int(tp), int(fp), int(tn), int(fn), float(mcc),
                            _ratio(tp, tp + fn), _ratio(fp, fp + tn), _ratio(fp, tp + fp))


def score(estimated, truth, p: int, K: int) -> ConfusionMetrics:
    """Confusion over all unordered gene pairs in every FOV.

    Both arguments are length-K sequences of sets of ``(i, j)`` pairs.
    """
    if len(estimated) != K or len(truth) != K:
        raise DimensionMismatch(
            f"expected {K} FOV edge sets, got {len(estimated)} estimated and {len(truth)} true")
    tp = fp = 0
    n_true = 0
    for k in range(K):
        est = {_norm(e, p) for e in estimated[k]}
        tru = {_norm(e, p) for e in truth[k]}
        tp += len(est & tru)
        fp += len(est - tru)
        n_true += len(tru)
    total = K * p * (p - 1) // 2
    fn = n_true - tp
    return from_counts(tp, fp, total - tp - fp - fn, fn)


def _norm(e, p):
    i, j = int(e[0]), int(e[1])
    if not (0 <= i < p and 0 <= j < p) or i == j:
        raise DimensionMismatch(f"edge {e} is not a pair of distinct genes among {p}")
    return (i, j) if i < j else (j, i)
