"""Training loss and pixel-level change metrics (F1, IoU, OA)."""
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptyEvaluationError, ShapeError, ValidationError

DICE_SMOOTH = 1.0


def loss(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean pixel BCE plus soft Dice (smoothing 1), Dice averaged over the batch.

    Accepts (H, W) or (B, H, W) logits and a mask of the same shape.
    """
    if logits.shape != mask.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} and mask {tuple(mask.shape)} differ")
    mask = mask.to(logits.dtype)
    if logits.ndim == 2:
        logits, mask = logits[None], mask[None]
    bce = F.binary_cross_entropy_with_logits(logits, mask)
    p = torch.sigmoid(logits).flatten(1)
    g = mask.flatten(1)
    dice = 1 - (2 * (p * g).sum(1) + DICE_SMOOTH) / (p.sum(1) + g.sum(1) + DICE_SMOOTH)
    return bce + dice.mean()


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _as_binary(x, name):
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    x = np.asarray(x)
    if not np.isin(x, (0, 1)).all():
        raise ValidationError(f"{name} must be binary (0/1)")
    return x.astype(bool)


def confusion(pred, gt) -> Confusion:
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} and gt {g.shape} differ")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return Confusion(tp, fp, fn, int(p.size) - tp - fp - fn)


def _ratio(num, den):
    return num / den if den else 0.0


@dataclass(frozen=True)
class MetricsReport:
    confusion: Confusion
    precision: float
    recall: float
    f1: float
    iou: float
    oa: float

    def to_dict(self):
        d = {k: int(v) for k, v in asdict(self.confusion).items()}
        for k in ("precision", "recall", "f1", "iou", "oa"):
            d[k] = round(float(getattr(self, k)), 6)
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d):
        return report(Confusion(int(d["tp"]), int(d["fp"]), int(d["fn"]), int(d["tn"])))


def report(c: Confusion) -> MetricsReport:
    """Metrics from counts; any 0/0 ratio is reported as 0."""
    if c.total <= 0:
        raise EmptyEvaluationError("no pixels were evaluated")
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    iou = _ratio(c.tp, c.tp + c.fp + c.fn)
    oa = (c.tp + c.tn) / c.total
    return MetricsReport(c, precision, recall, f1, iou, oa)
