"""Binary classifier evaluation: rank AUC, Gini, logloss, MSE, F1 thresholds, ROC."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

NOT_EVALUABLE = float("nan")


class SingleClass(ValueError):
    """Both classes are needed but only one is present."""


class NoPositives(ValueError):
    pass


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int8)


def auc_rank(scores, labels) -> float:
    """Area under the ROC curve from the rank-sum of the positive class.

    Tied scores share their average rank, so each tied positive/negative
    pair contributes one half.
    """
    s, y = _as_arrays(scores, labels)
    n1 = int(y.sum())
    n2 = y.size - n1
    if n1 == 0 or n2 == 0:
        raise SingleClass("AUC needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    s0 = ranks[y == 1].sum()
    return float((s0 - 0.5 * n1 * (n1 + 1)) / (n1 * n2))


def gini(auc: float) -> float:
    return 2.0 * auc - 1.0


def logloss(scores, labels, clamp: float = 1e-15) -> float:
    s, y = _as_arrays(scores, labels)
    p = np.clip(s, clamp, 1.0 - clamp)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def mse(scores, labels) -> float:
    s, y = _as_arrays(scores, labels)
    return float(np.mean((y - s) ** 2))


def confusion_at(scores, labels, threshold: float) -> tuple[float, float]:
    """(sensitivity, specificity) with ``score >= threshold`` called positive.

    Cases are the positive class.  A rate whose denominator is empty is NaN.
    """
    s, y = _as_arrays(scores, labels)
    pred = s >= threshold
    pos, neg = y == 1, y == 0
    sens = float(np.mean(pred[pos])) if pos.any() else NOT_EVALUABLE
    spec = float(np.mean(~pred[neg])) if neg.any() else NOT_EVALUABLE
    return sens, spec


def misclassification(scores, labels, threshold: float = 0.5) -> float:
    s, y = _as_arrays(scores, labels)
    return float(np.mean((s >= threshold) != (y == 1)))


def f1_at(scores, labels, threshold: float) -> float:
    s, y = _as_arrays(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def optimal_f1_threshold(scores, labels) -> tuple[float, float]:
    """Threshold maximising F1 over {0, 1} and midpoints between distinct scores.

    Ties go to the smallest threshold.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("F1 is undefined without positive labels")
    distinct = np.unique(s)
    candidates = np.unique(np.concatenate([[0.0, 1.0], (distinct[:-1] + distinct[1:]) / 2]))

    # Counts of positives / negatives with score >= t, for every candidate at once.
    order = np.sort(s)
    pos_sorted = np.sort(s[y == 1])
    above = s.size - np.searchsorted(order, candidates, side="left")
    tp = n_pos - np.searchsorted(pos_sorted, candidates, side="left")
    fp = above - tp
    fn = n_pos - tp
    f1 = 2 * tp / (2 * tp + fp + fn)
    best = int(np.argmax(f1))  # first max == smallest threshold
    return float(candidates[best]), float(f1[best])


def roc_points(scores, labels) -> list[tuple[float, float]]:
    """(fpr, tpr) at each distinct score threshold, from (0, 0) to (1, 1)."""
    s, y = _as_arrays(scores, labels)
    n1 = int(y.sum())
    n2 = y.size - n1
    if n1 == 0 or n2 == 0:
        raise SingleClass("ROC needs both classes")
    order = np.argsort(-s, kind="mergesort")
    s_desc, y_desc = s[order], y[order]
    tp = np.cumsum(y_desc)
    fp = np.cumsum(1 - y_desc)
    # keep the last index of every run of equal scores
    last = np.r_[s_desc[1:] != s_desc[:-1], True]
    fpr = np.r_[0.0, fp[last] / n2]
    tpr = np.r_[0.0, tp[last] / n1]
    return list(zip(fpr.tolist(), tpr.tolist()))


def trapezoid_area(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2))


@dataclass
class EvalReport:
    threshold: float
    sensitivity: float
    specificity: float
    gini: float
    logloss: float
    auc: float
    mse: float
    roc_points: list[tuple[float, float]] = field(default_factory=list, repr=False)

    def metrics(self) -> dict[str, float]:
        """The six reported metrics plus the threshold (no ROC)."""
        d = asdict(self)
        d.pop("roc_points")
        return d

    def to_json(self, path=None, include_roc: bool = False) -> str:
        d = asdict(self) if include_roc else self.metrics()
        text = json.dumps(d, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["roc_points"] = [tuple(p) for p in d.get("roc_points", [])]
        return cls(**d)


def evaluate(scores, labels, threshold: float | None = None) -> EvalReport:
    """Full report; ``threshold`` defaults to the F1-optimal one on these scores."""
    if threshold is None:
        threshold, _ = optimal_f1_threshold(scores, labels)
    auc = auc_rank(scores, labels)
    sens, spec = confusion_at(scores, labels, threshold)
    return EvalReport(
        threshold=float(threshold),
        sensitivity=sens,
        specificity=spec,
        gini=gini(auc),
        logloss=logloss(scores, labels),
        auc=auc,
        mse=mse(scores, labels),
        roc_points=roc_points(scores, labels),
    )


def write_roc_csv(points, path) -> None:
    with open(path, "w") as fh:
        fh.write("fpr,tpr\n")
        for fpr, tpr in points:
            fh.write(f"{fpr!r},{tpr!r}\n")
