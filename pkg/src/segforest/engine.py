"""Batched numpy forward and reverse passes for the renderer and losses.

This is the fast path used by the fitter and by image-scale rendering. It
evaluates the same expressions as the tape-based functions in
:mod:`segforest.renderer` and :mod:`segforest.losses`, for ``B`` blocks at a
time, with hand-written adjoints. Rows of every batch are independent: no
operation mixes values across blocks, and no BLAS call is involved, so a
block's result does not depend on which other blocks share its batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from segforest.forest import ForestSpec, TreeShape
from segforest.sdf import expit, sdf_value_grad

IGNORE = 255
EMPTY_REGION = 1e-8
LOG_FLOOR = 1e-12


def pixel_centers(width: int, height: int) -> np.ndarray:
    """Block-normalized pixel centers in row-major order, shape ``(H*W, 2)``."""
    if width < 1 or height < 1:
        raise ValueError("raster must be at least 1x1")
    x = (2.0 * np.arange(width) + 1.0) / width - 1.0
    y = (2.0 * np.arange(height) + 1.0) / height - 1.0
    yy, xx = np.meshgrid(y, x, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def _relu(x):
    return np.maximum(x, 0.0)


def _softmax(a: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class RegionCache:
    shape: TreeShape
    mode: str
    R: np.ndarray
    nodes: list
    lam: float
    lam1: float
    lam2: float
    pts: np.ndarray


def region_forward(shape: TreeShape, inner: np.ndarray, pts: np.ndarray, config):
    """Region map ``R`` with shape ``(B, k, N)`` plus the cache for backward.

    Also returns the pre-softmax accumulator.
    """
    inner = np.asarray(inner, dtype=np.float64)
    if inner.ndim != 2 or inner.shape[1] != shape.inner_parameter_count:
        raise ValueError(f"expected inner params of shape (B, {shape.inner_parameter_count})")
    B, N, k = inner.shape[0], pts.shape[0], shape.leaf_count
    mode = config.mode
    lam, lam1, lam2 = config.lam, config.lam1, config.lam2
    p1 = pts[None, :, 0]
    p2 = pts[None, :, 1]
    nodes = []

    if mode == "refined":
        A = np.zeros((B, k, N))
        for inn in shape.inner:
            theta = inner[:, inn.offset:inn.offset + inn.node.parameter_count]
            if inn.node.kind == "bsp":
                f, jac = sdf_value_grad(inn.node.sdf, theta, pts)
                g = lam * f
                parts = (_relu(g), _relu(-g))
                nodes.append((g, jac))
            else:
                t1 = theta[:, 0:1] - p1
                t2 = theta[:, 1:2] - p2
                t3, t4, t5, t6 = _relu(t1), _relu(-t1), _relu(t2), _relu(-t2)
                parts = (lam * (t4 * t5), lam * (t3 * t5), lam * (t4 * t6), lam * (t3 * t6))
                nodes.append((t1, t2))
            for leaves, part in zip(inn.slots, parts):
                for leaf in leaves:
                    A[:, leaf] += part
    elif mode == "legacy":
        factors = []
        for inn in shape.inner:
            theta = inner[:, inn.offset:inn.offset + inn.node.parameter_count]
            if inn.node.kind == "bsp":
                f, jac = sdf_value_grad(inn.node.sdf, theta, pts)
                g = expit(lam1 * f)
                fac = (lam2 * g, lam2 * (1.0 - g))
                nodes.append((g, jac))
            else:
                gx = expit(lam1 * (theta[:, 0:1] - p1))
                gy = expit(lam1 * (theta[:, 1:2] - p2))
                fac = (lam2 * (1.0 - gx) * gy, lam2 * gx * gy,
                       lam2 * (1.0 - gx) * (1.0 - gy), lam2 * gx * (1.0 - gy))
                nodes.append((gx, gy))
            factors.append(fac)
        A = np.ones((B, k, N))
        for leaf, path in enumerate(shape.leaf_paths):
            for ordinal, slot in path:
                A[:, leaf] = A[:, leaf] * factors[ordinal][slot]
        nodes = list(zip(nodes, factors))
    else:
        raise ValueError(f"unknown renderer mode {mode!r}")

    R = _softmax(A, axis=1)
    return R, A, RegionCache(shape, mode, R, nodes, lam, lam1, lam2, pts)


def region_backward(cache: RegionCache, dR: np.ndarray) -> np.ndarray:
    """Gradient of a scalar w.r.t. the inner params, given ``dR`` of shape ``(B, k, N)``."""
    shape, R = cache.shape, cache.R
    B = R.shape[0]
    dA = R * (dR - (R * dR).sum(axis=1, keepdims=True))
    dinner = np.zeros((B, shape.inner_parameter_count))

    if cache.mode == "refined":
        lam = cache.lam
        for inn, saved in zip(shape.inner, cache.nodes):
            dparts = [sum(dA[:, leaf] for leaf in leaves) if leaves else 0.0
                      for leaves in inn.slots]
            sl = slice(inn.offset, inn.offset + inn.node.parameter_count)
            if inn.node.kind == "bsp":
                g, jac = saved
                dg = np.where(g > 0, dparts[0], 0.0) - np.where(-g > 0, dparts[1], 0.0)
                df = lam * dg
                dinner[:, sl] = (df[:, :, None] * jac).sum(axis=1)
            else:
                t1, t2 = saved
                t3, t4, t5, t6 = _relu(t1), _relu(-t1), _relu(t2), _relu(-t2)
                d0, d1, d2, d3 = (lam * d for d in dparts)
                dt3 = d1 * t5 + d3 * t6
                dt4 = d0 * t5 + d2 * t6
                dt5 = d0 * t4 + d1 * t3
                dt6 = d2 * t4 + d3 * t3
                dt1 = np.where(t1 > 0, dt3, 0.0) - np.where(-t1 > 0, dt4, 0.0)
                dt2 = np.where(t2 > 0, dt5, 0.0) - np.where(-t2 > 0, dt6, 0.0)
                dinner[:, sl.start] = dt1.sum(axis=1)
                dinner[:, sl.start + 1] = dt2.sum(axis=1)
        return dinner

    lam1, lam2 = cache.lam1, cache.lam2
    dfac = [[np.zeros_like(R[:, 0]) for _ in inn.slots] for inn in shape.inner]
    factors = [fac for _, fac in cache.nodes]
    for leaf, path in enumerate(shape.leaf_paths):
        for pos, (ordinal, slot) in enumerate(path):
            other = np.ones_like(R[:, 0])
            for q, (o2, s2) in enumerate(path):
                if q != pos:
                    other = other * factors[o2][s2]
            dfac[ordinal][slot] += dA[:, leaf] * other
    for inn, ((a, b), _), d in zip(shape.inner, cache.nodes, dfac):
        sl = slice(inn.offset, inn.offset + inn.node.parameter_count)
        if inn.node.kind == "bsp":
            g, jac = a, b
            dg = lam2 * (d[0] - d[1])
            df = dg * g * (1.0 - g) * lam1
            dinner[:, sl] = (df[:, :, None] * jac).sum(axis=1)
        else:
            gx, gy = a, b
            dgx = lam2 * (-d[0] * gy + d[1] * gy - d[2] * (1.0 - gy) + d[3] * (1.0 - gy))
            dgy = lam2 * (d[0] * (1.0 - gx) + d[1] * gx - d[2] * (1.0 - gx) - d[3] * gx)
            dinner[:, sl.start] = (dgx * gx * (1.0 - gx) * lam1).sum(axis=1)
            dinner[:, sl.start + 1] = (dgy * gy * (1.0 - gy) * lam1).sum(axis=1)
    return dinner


def leaf_blend(R: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Per-pixel blend ``sum_i R_i * v_i``: ``(B,k,N) x (B,k,C) -> (B,N,C)``."""
    return (R[:, :, :, None] * values[:, :, None, :]).sum(axis=1)


def forward_logits(spec: ForestSpec, params: np.ndarray, pts: np.ndarray, config):
    """Concatenated class logits ``(B, N, C)`` and per-subset region maps."""
    params = np.asarray(params, dtype=np.float64)
    B = params.shape[0]
    z = np.zeros((B, pts.shape[0], spec.class_count))
    maps = []
    for classes, shape, s in zip(spec.subsets, spec.shapes, spec.layout.subsets):
        inner = params[:, s.inner_offset:s.inner_offset + s.inner_count]
        V = params[:, s.logit_offset:s.logit_offset + s.logit_count].reshape(
            B, s.leaf_count, s.class_count)
        R, _, _ = region_forward(shape, inner, pts, config)
        z[:, :, list(classes)] = leaf_blend(R, V)
        maps.append(R)
    return z, maps


def argmax_lowest(z: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ``np.argmax`` already returns the first maximum."""
    return np.argmax(z, axis=-1)


def subset_labels(labels: np.ndarray, classes, class_count: int) -> tuple[np.ndarray, int]:
    """Map labels to a subset's columns; the last column is "other".

    Returns ``(mapped, m)`` where ignored pixels map to ``-1``. When the
    subset covers every class the "other" column cannot be hit and is
    dropped, so ``m == |C_j|``; otherwise ``m == |C_j| + 1``.
    """
    classes = list(classes)
    full = len(classes) == class_count
    m = len(classes) + (0 if full else 1)
    lut = np.full(256, -1, dtype=np.int64)
    lut[:class_count] = len(classes)
    for pos, c in enumerate(classes):
        lut[c] = pos
    return lut[labels], m


@dataclass
class LossResult:
    total: np.ndarray
    ce: np.ndarray
    purity: np.ndarray
    size: np.ndarray
    sharpness: np.ndarray
    grad: np.ndarray | None
    logits: np.ndarray


def loss_and_grad(spec: ForestSpec, params: np.ndarray, pts: np.ndarray, labels: np.ndarray,
                  weights, config, need_grad: bool = True) -> LossResult:
    """Per-block total loss, its components and the gradient.

    ``labels`` has shape ``(B, N)`` with class indices or :data:`IGNORE`.
    Every component is a per-block quantity; summing over the batch gives
    independent per-block gradients.
    """
    params = np.asarray(params, dtype=np.float64)
    labels = np.asarray(labels)
    B, N, C = params.shape[0], pts.shape[0], spec.class_count
    mu1, mu2, mu3, mu4 = weights.mu
    s_min = weights.s_min
    impurity = weights.impurity
    class_weights = weights.class_weights
    if class_weights is None:
        class_weights = np.ones(C)
    if weights.ignore_index is not None:
        labels = np.where(labels == weights.ignore_index, IGNORE, labels)
    valid = labels < C
    safe = np.where(valid, labels, 0)
    n_valid = valid.sum(axis=1)
    denom = np.maximum(n_valid, 1)

    z = np.zeros((B, N, C))
    cached = []
    for classes, shape, s in zip(spec.subsets, spec.shapes, spec.layout.subsets):
        inner = params[:, s.inner_offset:s.inner_offset + s.inner_count]
        V = params[:, s.logit_offset:s.logit_offset + s.logit_count].reshape(
            B, s.leaf_count, s.class_count)
        R, _, cache = region_forward(shape, inner, pts, config)
        z[:, :, list(classes)] = leaf_blend(R, V)
        cached.append((R, V, cache))

    # cross-entropy through a guarded log of the softmax probability
    e = np.exp(z - z.max(axis=2, keepdims=True))
    prob = e / e.sum(axis=2, keepdims=True)
    p_true = np.take_along_axis(prob, safe[:, :, None], axis=2)[:, :, 0]
    unclamped = p_true >= LOG_FLOOR
    logp = np.log(np.where(unclamped, p_true, LOG_FLOOR))
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if class_weights.ndim == 2:
        # one weight vector per block
        w = np.take_along_axis(class_weights, safe, axis=1) * valid
    else:
        w = class_weights[safe] * valid
    ce = -(w * logp).sum(axis=1) / denom
    dz = None
    if need_grad:
        coef = np.where(unclamped, w, 0.0) / denom[:, None]
        onehot = np.zeros_like(prob)
        np.put_along_axis(onehot, safe[:, :, None], 1.0, axis=2)
        dz = mu1 * coef[:, :, None] * (prob - onehot)

    purity = np.zeros(B)
    size = np.zeros(B)
    sharp = np.zeros(B)
    grad = np.zeros_like(params) if need_grad else None
    for (classes, s), (R, V, cache), wj in zip(zip(spec.subsets, spec.layout.subsets),
                                              cached, spec.subset_weights):
        k = s.leaf_count
        mapped, m = subset_labels(labels, classes, C)
        hist = np.zeros((B, k, m))
        masks = [(mapped == c) for c in range(m)]
        for c, mk in enumerate(masks):
            hist[:, :, c] = (R * mk[:, None, :]).sum(axis=2)
        sz = hist.sum(axis=2)
        filled = sz >= EMPTY_REGION
        P = np.where(filled[:, :, None], hist / np.where(filled, sz, 1.0)[:, :, None], 1.0 / m)
        if impurity == "gini":
            H = 1.0 - (P * P).sum(axis=2)
            dH_dP = -2.0 * P
        else:
            logP = np.log(np.maximum(P, LOG_FLOOR))
            H = -(P * logP).sum(axis=2)
            dH_dP = -(np.where(P >= LOG_FLOOR, logP, np.log(LOG_FLOOR)) + (P >= LOG_FLOOR))
        LY = H.mean(axis=1)
        short = s_min - sz
        Ls = _relu(short).mean(axis=1)
        if impurity == "gini":
            HR = 1.0 - (R * R).sum(axis=1)
        else:
            HR = -(R * np.log(np.maximum(R, LOG_FLOOR))).sum(axis=1)
        LR = HR.mean(axis=1)
        purity += wj * LY
        size += wj * Ls
        sharp += wj * LR
        if not need_grad:
            continue

        gP = (wj * mu2 / k) * dH_dP
        dhist = np.where(filled[:, :, None],
                         (gP - (gP * P).sum(axis=2, keepdims=True))
                         / np.where(filled, sz, 1.0)[:, :, None], 0.0)
        dsz = np.where(short > 0, -wj * mu3 / k, 0.0)
        dhist = dhist + dsz[:, :, None]
        dR = np.zeros_like(R)
        for c, mk in enumerate(masks):
            dR += dhist[:, :, c:c + 1] * mk[:, None, :]
        if impurity == "gini":
            dR += (wj * mu4 / N) * (-2.0 * R)
        else:
            dR += (wj * mu4 / N) * -(np.where(R >= LOG_FLOOR, np.log(np.maximum(R, LOG_FLOOR)),
                                              np.log(LOG_FLOOR)) + (R >= LOG_FLOOR))
        dh = dz[:, :, list(classes)]
        dR += (V[:, :, None, :] * dh[:, None, :, :]).sum(axis=3)
        dV = (R[:, :, :, None] * dh[:, None, :, :]).sum(axis=2)
        grad[:, s.inner_offset:s.inner_offset + s.inner_count] = region_backward(cache, dR)
        grad[:, s.logit_offset:s.logit_offset + s.logit_count] = dV.reshape(B, -1)

    total = mu1 * ce + mu2 * purity + mu3 * size + mu4 * sharp
    return LossResult(total, ce, purity, size, sharp, grad, z)
