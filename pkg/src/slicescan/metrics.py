"""Segmentation metrics on integer label masks.

Overlap metrics are one-vs-rest per class and averaged over the foreground
classes (``1..K-1``) unless ``include_background`` is set. A ratio whose
denominator is zero (nothing to find and nothing predicted) counts as 1.

HD95 works on 4-connected boundaries: a foreground pixel with at least one
background 4-neighbour, the outside of the image counting as background.
Distances are Euclidean, in pixels.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeError

_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class MetricsReport:
    miou: float
    dsc: float
    acc: float
    spe: float
    sen: float
    hd95: float
    per_class_dsc: dict = field(default_factory=dict)

    CSV_FIELDS = ("miou", "dsc", "acc", "spe", "sen", "hd95")

    def csv_header(self) -> str:
        return ",".join(self.CSV_FIELDS)

    def csv_row(self) -> str:
        return ",".join(f"{getattr(self, k):.6f}" for k in self.CSV_FIELDS)

    def as_dict(self) -> dict:
        return asdict(self)


def _ratio(num, den):
    return 1.0 if den == 0 else num / den


def confusion_counts(pred, gt, cls):
    p = pred == cls
    g = gt == cls
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return tp, fp, fn, tn


def boundary(mask):
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def surface_distances(a, b):
    """Directed distances from each boundary pixel of ``a`` to the boundary of ``b``, and back."""
    ba, bb = boundary(a), boundary(b)
    if not ba.any() or not bb.any():
        return None
    to_b = ndimage.distance_transform_edt(~bb)
    to_a = ndimage.distance_transform_edt(~ba)
    return np.concatenate([to_b[ba], to_a[bb]])


def hd95_binary(pred, gt):
    """HD95 of two boolean masks; ``None`` when both are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if not pred.any() and not gt.any():
        return None
    if not pred.any() or not gt.any():
        return float(np.hypot(*pred.shape))
    return float(np.percentile(surface_distances(pred, gt), 95))


def segmentation_metrics(pred_mask, gt_mask, num_classes, include_background=False) -> MetricsReport:
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if pred.ndim not in (2, 3):
        raise ShapeError(f"masks must be (H, W) or (N, H, W), got {pred.shape}")
    K = max(int(num_classes), 2)

    dsc, iou, sen, spe = {}, {}, {}, {}
    for k in range(K):
        tp, fp, fn, tn = confusion_counts(pred, gt, k)
        dsc[k] = _ratio(2 * tp, 2 * tp + fp + fn)
        iou[k] = _ratio(tp, tp + fp + fn)
        sen[k] = _ratio(tp, tp + fn)
        spe[k] = _ratio(tn, tn + fp)
    fg = list(range(1, K))
    miou_classes = list(range(K)) if include_background else fg

    hds = []
    planes = pred[None] if pred.ndim == 2 else pred
    gplanes = gt[None] if gt.ndim == 2 else gt
    for p2, g2 in zip(planes, gplanes):
        for k in fg:
            h = hd95_binary(p2 == k, g2 == k)
            if h is not None:
                hds.append(h)

    return MetricsReport(
        miou=float(np.mean([iou[k] for k in miou_classes])),
        dsc=float(np.mean([dsc[k] for k in fg])),
        acc=float(np.count_nonzero(pred == gt) / pred.size),
        spe=float(np.mean([spe[k] for k in fg])),
        sen=float(np.mean([sen[k] for k in fg])),
        hd95=float(np.mean(hds)) if hds else 0.0,
        per_class_dsc={k: float(dsc[k]) for k in range(K)},
    )


def mean_reports(reports) -> MetricsReport:
    """Average reports field by field, in the given order."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    keys = reports[0].per_class_dsc.keys()
    return MetricsReport(
        **{k: float(np.mean([getattr(r, k) for r in reports])) for k in MetricsReport.CSV_FIELDS},
        per_class_dsc={k: float(np.mean([r.per_class_dsc[k] for r in reports])) for k in keys},
    )


def mean_dice(preds, gts, num_classes) -> float:
    """Per-image foreground DSC averaged over images; the cheap fitness used by the search."""
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    if preds.shape != gts.shape:
        raise ShapeError(f"prediction shape {preds.shape} does not match ground truth {gts.shape}")
    K = max(int(num_classes), 2)
    scores = []
    for p, g in zip(preds, gts):
        per = []
        for k in range(1, K):
            tp, fp, fn, _ = confusion_counts(p, g, k)
            per.append(_ratio(2 * tp, 2 * tp + fp + fn))
        scores.append(np.mean(per))
    return float(np.mean(scores))
