"""Confusion counts and the summary metrics reported per evaluation run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, ShapeError

METRIC_NAMES = ("f1", "ap", "precision", "recall", "fpr", "fnr")
_COLUMNS = (("F1", "f1"), ("AP", "ap"), ("PRE", "precision"), ("REC", "recall"),
            ("FPR", "fpr"), ("FNR", "fnr"))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def confusion(pred: np.ndarray, gt: np.ndarray, dontcare: np.ndarray | None = None) -> ConfusionCounts:
    """Count cells, skipping those under ``dontcare``. Inputs are truthy = drivable."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    keep = np.ones(pred.shape, dtype=bool)
    if dontcare is not None:
        dontcare = np.asarray(dontcare, dtype=bool)
        if dontcare.shape != pred.shape:
            raise ShapeError(f"don't-care mask {dontcare.shape} does not match {pred.shape}")
        keep = ~dontcare
    p, g = pred[keep], gt[keep]
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        tn=int(np.count_nonzero(~p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
    )


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


@dataclass(frozen=True)
class Metrics:
    """Each field is a value in [0, 1], or ``None`` when its denominator is zero."""

    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    ap: Optional[float]
    fpr: Optional[float]
    fnr: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(c: ConfusionCounts) -> Metrics:
    """Precision, recall, F1, accuracy ("AP"), false-positive and false-negative rates.

    F1 is undefined when either precision or recall is; when both are defined
    and both zero it is 0.
    """
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return Metrics(
        precision=precision,
        recall=recall,
        f1=f1,
        ap=_ratio(c.tp + c.tn, c.total),
        fpr=_ratio(c.fp, c.fp + c.tn),
        fnr=_ratio(c.fn, c.fn + c.tp),
    )


def report_json(c: ConfusionCounts, m: Metrics | None = None) -> str:
    m = m or metrics(c)
    return json.dumps({"counts": asdict(c), "metrics": m.to_dict()}, indent=2)


def report_table(c: ConfusionCounts, m: Metrics | None = None) -> str:
    """Fixed-width table of fractions in [0, 1]; undefined entries print as ``undef``."""
    m = m or metrics(c)
    header = "".join(f"{name:>9}" for name, _ in _COLUMNS)
    cells = []
    for _, key in _COLUMNS:
        value = getattr(m, key)
        cells.append(f"{'undef':>9}" if value is None else f"{value:9.4f}")
    return f"{header}\n{''.join(cells)}\n"
