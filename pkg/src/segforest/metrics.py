"""Segmentation metrics and region-purity reports."""
from __future__ import annotations

import csv

import numpy as np

from segforest import engine
from segforest.data import IGNORE, to_blocks
from segforest.forest import ForestModel


class MetricsError(ValueError):
    pass


def confusion(pred: np.ndarray, gt: np.ndarray, class_count: int,
              ignore_class: int | None = None) -> np.ndarray:
    """Counts with rows = ground truth, columns = prediction.

    Pixels whose ground truth is 255 or ``ignore_class`` are excluded.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricsError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    keep = (gt != IGNORE) & (gt < class_count)
    if ignore_class is not None:
        keep &= gt != ignore_class
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if p.size and p.max() >= class_count:
        raise MetricsError("prediction contains class indices >= class_count")
    return np.bincount(g * class_count + p, minlength=class_count ** 2).reshape(
        class_count, class_count)


def accuracy(cm: np.ndarray) -> float:
    n = cm.sum()
    if n == 0:
        raise MetricsError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm) / n)


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where a class is absent from both ground truth and prediction."""
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def miou(cm: np.ndarray) -> float:
    if cm.sum() == 0:
        raise MetricsError("mIoU of an empty confusion matrix is undefined")
    return float(np.nanmean(iou_per_class(cm)))


def write_metrics_csv(cm: np.ndarray, fh, ignore_class: int | None = None):
    """Rows ``metric,class,value``; the ignored class and absent classes are omitted."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["metric", "class", "value"])
    for c, v in enumerate(iou_per_class(cm)):
        if c == ignore_class or np.isnan(v):
            continue
        w.writerow(["iou", c, format(v, ".17g")])
    w.writerow(["accuracy", "", format(accuracy(cm), ".17g")])
    w.writerow(["miou", "", format(miou(cm), ".17g")])


def region_gini_table(model: ForestModel, mask: np.ndarray, config=None, impurity="gini"):
    """Impurity ``H(P_B^i)`` of every region of every block, per subset.

    Returns a list with one ``(H_b, W_b, k_j)`` array per subset, computed
    from the ground truth at native resolution.
    """
    from segforest.renderer import RendererConfig

    config = config or RendererConfig()
    spec = model.spec
    S = spec.block_size
    w, h = model.grid_size
    if mask.shape != (h * S, w * S):
        raise MetricsError(f"mask shape {mask.shape} does not match a {w}x{h} grid of "
                           f"{S}x{S} blocks")
    labels = to_blocks(mask, S).reshape(h * w, S * S)
    pts = engine.pixel_centers(S, S)
    flat = model.params.reshape(h * w, -1)
    out = []
    for classes, shape, s in zip(spec.subsets, spec.shapes, spec.layout.subsets):
        R, _, _ = engine.region_forward(shape, flat[:, s.inner_offset:s.inner_offset
                                                    + s.inner_count], pts, config)
        mapped, m = engine.subset_labels(labels, classes, spec.class_count)
        hist = np.stack([(R * (mapped == c)[:, None, :]).sum(axis=2) for c in range(m)], axis=2)
        sz = hist.sum(axis=2)
        filled = sz >= engine.EMPTY_REGION
        P = np.where(filled[:, :, None], hist / np.where(filled, sz, 1.0)[:, :, None], 1.0 / m)
        if impurity == "gini":
            H = 1.0 - (P * P).sum(axis=2)
        else:
            H = -(P * np.log(np.maximum(P, engine.LOG_FLOOR))).sum(axis=2)
        out.append(H.reshape(h, w, s.leaf_count))
    return out


def purity_report(model: ForestModel, gt: np.ndarray, config=None):
    """Per-block, per-region Gini rows and their subset-weighted grand mean.

    Rows are ``(block_x, block_y, subset, region, gini)``. The mean weights
    each subset by ``|C_j|/|C|`` and equals the purity loss on the same input.
    """
    tables = region_gini_table(model, gt, config)
    rows = []
    mean = 0.0
    for j, (table, wj) in enumerate(zip(tables, model.spec.subset_weights)):
        hb, wb, k = table.shape
        for by in range(hb):
            for bx in range(wb):
                for i in range(k):
                    rows.append((bx, by, j, i, float(table[by, bx, i])))
        if table.size:
            mean += wj * float(table.mean())
    return rows, mean
