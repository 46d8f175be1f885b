"""Confusion-matrix accumulation and IoU / mIoU."""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from conslab.errors import DataError


class Confusion:
    """K x K pixel counts; entry (i, j) counts ground truth i predicted as j."""

    def __init__(self, K: int):
        self.K = K
        self.matrix = np.zeros((K, K), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def accumulate(self, pred, gt) -> "Confusion":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DataError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        for name, arr in (("prediction", pred), ("ground truth", gt)):
            if arr.size and (arr.min() < 0 or arr.max() >= self.K):
                raise DataError(f"{name} class out of range [0, {self.K})")
        idx = gt.astype(np.int64).ravel() * self.K + pred.astype(np.int64).ravel()
        self.matrix += np.bincount(idx, minlength=self.K * self.K).reshape(self.K, self.K)
        return self

    def __add__(self, other: "Confusion") -> "Confusion":
        if other.K != self.K:
            raise DataError("cannot merge confusions with different class counts")
        out = Confusion(self.K)
        out.matrix = self.matrix + other.matrix
        return out

    def iou_per_class(self) -> List[Optional[float]]:
        return iou_per_class(self)

    def mean_iou(self) -> float:
        return mean_iou(self)


def accumulate(conf: Confusion, pred, gt) -> Confusion:
    return conf.accumulate(pred, gt)


def iou_per_class(conf: Confusion) -> List[Optional[float]]:
    """TP / (TP + FP + FN) per class, ``None`` where the class never occurs."""
    if conf.total == 0:
        raise DataError("confusion matrix is empty")
    m = conf.matrix
    tp = np.diag(m)
    denom = m.sum(axis=0) + m.sum(axis=1) - tp
    return [None if d == 0 else float(t / d) for t, d in zip(tp, denom)]


def mean_iou(conf: Confusion) -> float:
    """Mean IoU over classes whose IoU is defined."""
    return mean_of_defined(iou_per_class(conf))


def mean_of_defined(values: List[Optional[float]]) -> float:
    vals = [v for v in values if v is not None]
    if not vals:
        raise DataError("no class has a defined IoU")
    return float(np.mean(vals))


def write_iou_csv(path, conf: Confusion):
    lines = ["class_id,iou"]
    for k, v in enumerate(iou_per_class(conf)):
        lines.append(f"{k}," + ("" if v is None else repr(v)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
