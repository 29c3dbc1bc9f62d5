"""Training objective: cross-entropy plus the region-map losses.

The functions here work on tape values (single block) and mirror the
batched implementation in :func:`segforest.engine.loss_and_grad`.
"""
from __future__ import annotations

import csv
import math
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from segforest import engine
from segforest.forest import ForestSpec
from segforest.grad_core import DiffValue, Tape, log_guarded, relu, square, total
from segforest.renderer import Raster, RegionMap, RendererConfig, render_logits, render_region_map

DEFAULT_MU = (0.947, 0.034, 0.0095, 0.0095)
CE_ONLY = (1.0, 0.0, 0.0, 0.0)


class EmptyTargetWarning(UserWarning):
    """A loss term had nothing to average over and was defined as 0."""


@dataclass(frozen=True)
class LossWeights:
    mu: tuple[float, float, float, float] = DEFAULT_MU
    s_min: float = 8.0
    class_weights: np.ndarray | None = field(default=None, compare=False)
    ignore_index: int | None = None
    impurity: str = "gini"

    def __post_init__(self):
        mu = tuple(float(m) for m in self.mu)
        object.__setattr__(self, "mu", mu)
        if len(mu) != 4:
            raise ValueError("need exactly four loss weights")
        if any(m < 0 for m in mu):
            raise ValueError("loss weights must be non-negative")
        if abs(sum(mu) - 1.0) > 1e-9:
            raise ValueError(f"loss weights must sum to 1, got {sum(mu)!r}")
        if self.s_min < 0:
            raise ValueError("s_min must be non-negative")
        if self.impurity not in ("gini", "entropy"):
            raise ValueError(f"unknown impurity {self.impurity!r}")
        if self.class_weights is not None:
            cw = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(cw <= 0):
                raise ValueError("class weights must be positive")
            object.__setattr__(self, "class_weights", cw)


def inverse_frequency_weights(mask: np.ndarray, class_count: int,
                              ignore_index: int | None = None) -> np.ndarray:
    """``w_c ~ 1/freq_c`` normalized to mean 1 over the classes present.

    Absent classes get weight 1.
    """
    labels = np.asarray(mask).ravel()
    keep = labels < class_count
    if ignore_index is not None:
        keep &= labels != ignore_index
    counts = np.bincount(labels[keep], minlength=class_count)[:class_count].astype(np.float64)
    w = np.ones(class_count)
    present = counts > 0
    if present.any():
        inv = 1.0 / counts[present]
        w[present] = inv / inv.mean()
    return w


@dataclass
class BlockTarget:
    """Per-pixel target vectors ``Y[y, x, :]``: one-hot, or all zero when ignored."""

    Y: np.ndarray

    @classmethod
    def from_labels(cls, labels: np.ndarray, class_count: int,
                    ignore_index: int | None = None) -> BlockTarget:
        labels = np.asarray(labels)
        Y = np.zeros(labels.shape + (class_count,))
        valid = labels < class_count
        if ignore_index is not None:
            valid &= labels != ignore_index
        yy, xx = np.nonzero(valid)
        Y[yy, xx, labels[yy, xx]] = 1.0
        return cls(Y)

    @property
    def class_count(self) -> int:
        return self.Y.shape[2]

    def labels(self) -> np.ndarray:
        lab = np.argmax(self.Y, axis=2).astype(np.int64)
        lab[self.Y.sum(axis=2) == 0] = engine.IGNORE
        return lab


def split_target_for_subset(target: BlockTarget, subset: Sequence[int]) -> BlockTarget:
    """Target over the subset's classes plus one trailing "other classes" entry."""
    subset = list(subset)
    rest = [c for c in range(target.class_count) if c not in subset]
    other = target.Y[:, :, rest].sum(axis=2, keepdims=True)
    return BlockTarget(np.concatenate([target.Y[:, :, subset], other], axis=2))


def _sq(p):
    return square(p) if isinstance(p, DiffValue) else p * p


def gini(P: Sequence) -> DiffValue | float:
    """Gini impurity ``1 - sum_c P_c^2``."""
    terms = [_sq(p) for p in P]
    if any(isinstance(t, DiffValue) for t in terms):
        return 1.0 - total(terms)
    return 1.0 - float(sum(terms))


def entropy(P: Sequence) -> DiffValue | float:
    """Shannon entropy with the log guarded at 1e-12."""
    if any(isinstance(p, DiffValue) for p in P):
        tape = next(p for p in P if isinstance(p, DiffValue)).tape
        return -total([tape.coerce(p) * log_guarded(tape.coerce(p)) for p in P])
    return -float(sum(p * math.log(max(p, engine.LOG_FLOOR)) for p in P))


def _impurity(name):
    return gini if name == "gini" else entropy


@dataclass
class RegionHistogram:
    """Per region: class counts ``Y``, size ``s``, distribution ``P``, empty flag."""

    Y: list[list]
    s: list
    P: list[list]
    empty: list[bool]


def region_class_histogram(region_map: RegionMap, target: BlockTarget,
                           tape: Tape | None = None) -> RegionHistogram:
    """Soft per-region class counts ``Y_i(c) = sum_yx Y_yx(c) * R_iyx``.

    Regions whose size is below 1e-8 get a uniform ``P`` and are flagged.
    """
    Y = target.Y
    height = len(region_map.probs[0])
    width = len(region_map.probs[0][0])
    if Y.shape[:2] != (height, width):
        raise ValueError(f"target is {Y.shape[1]}x{Y.shape[0]}, region map is {width}x{height}")
    tape = tape or region_map.probs[0][0][0].tape
    m = Y.shape[2]
    hist = RegionHistogram([], [], [], [])
    for plane in region_map.probs:
        counts = []
        for c in range(m):
            terms = [plane[y][x] * float(Y[y, x, c]) for y in range(height) for x in range(width)
                     if Y[y, x, c] != 0]
            counts.append(total(terms) if terms else tape.lift(0.0))
        s = total(counts)
        empty = s.value < engine.EMPTY_REGION
        if empty:
            P = [tape.lift(1.0 / m) for _ in range(m)]
        else:
            tape.note_kink(s.value - engine.EMPTY_REGION, 1)
            P = [cnt / s for cnt in counts]
        hist.Y.append(counts)
        hist.s.append(s)
        hist.P.append(P)
        hist.empty.append(empty)
    return hist


def loss_purity(distributions: Sequence[Sequence], impurity: str = "gini"):
    """Mean impurity over all regions of all blocks."""
    if not distributions:
        raise ValueError("need at least one region")
    h = _impurity(impurity)
    vals = [h(P) for P in distributions]
    return _mean(vals)


def _mean(vals):
    if any(isinstance(v, DiffValue) for v in vals):
        return total(vals) * (1.0 / len(vals))
    return float(sum(vals)) / len(vals)


def loss_min_region_size(sizes: Sequence, s_min: float):
    """Mean shortfall ``max(s_min - s, 0)`` over regions."""
    if not sizes:
        raise ValueError("need at least one region")
    if any(isinstance(s, DiffValue) for s in sizes):
        return _mean([relu(s_min - s) for s in sizes])
    return _mean([max(s_min - s, 0.0) for s in sizes])


def loss_sharpness(region_map: RegionMap | np.ndarray, impurity: str = "gini"):
    """Mean impurity of the per-pixel region distributions."""
    h = _impurity(impurity)
    if isinstance(region_map, RegionMap):
        probs = region_map.probs
        height, width = len(probs[0]), len(probs[0][0])
        return _mean([h([plane[y][x] for plane in probs])
                      for y in range(height) for x in range(width)])
    R = np.asarray(region_map, dtype=np.float64)
    k = R.shape[0]
    return _mean([h(list(R[:, y, x])) for y in range(R.shape[1]) for x in range(R.shape[2])]
                 if k else [0.0])


def loss_cross_entropy(logits, labels: np.ndarray, class_weights=None,
                       ignore_index: int | None = None, tape: Tape | None = None):
    """Weighted mean over non-ignored pixels of ``-w_c log softmax(z)[c]``.

    ``logits`` is indexed ``[y][x][c]``. If every pixel is ignored the loss is
    defined as 0 and an :class:`EmptyTargetWarning` is issued.
    """
    from segforest.grad_core import softmax

    labels = np.asarray(labels)
    C = len(logits[0][0])
    tape = tape or logits[0][0][0].tape
    cw = np.ones(C) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    terms = []
    for y, row in enumerate(logits):
        for x, z in enumerate(row):
            c = int(labels[y, x])
            if c >= C or (ignore_index is not None and c == ignore_index):
                continue
            p = softmax(z)[c]
            terms.append((-float(cw[c])) * log_guarded(p))
    if not terms:
        warnings.warn("all pixels ignored; cross-entropy defined as 0", EmptyTargetWarning)
        return tape.lift(0.0)
    return total(terms) * (1.0 / len(terms))


@dataclass
class BlockVariables:
    """Tape variables of one block, per subset."""

    inner: list[list[DiffValue]]
    logits: list[list[list[DiffValue]]]


def block_variables(spec: ForestSpec, tape: Tape, flat) -> BlockVariables:
    """Create one tape variable per parameter of a flat block vector."""
    xs = [v if isinstance(v, DiffValue) else tape.variable(v) for v in flat]
    inner, logits = [], []
    for s in spec.layout.subsets:
        inner.append(xs[s.inner_offset:s.inner_offset + s.inner_count])
        row = xs[s.logit_offset:s.logit_offset + s.logit_count]
        logits.append([row[i * s.class_count:(i + 1) * s.class_count]
                       for i in range(s.leaf_count)])
    return BlockVariables(inner, logits)


def loss_total(spec: ForestSpec, block: BlockVariables, labels: np.ndarray, weights: LossWeights,
               config: RendererConfig = RendererConfig(), tape: Tape | None = None):
    """Full objective of one block on the tape; returns ``(L_total, report)``.

    ``labels`` is the block's class mask (sampled at ``labels.shape``).
    """
    labels = np.asarray(labels)
    if weights.ignore_index is not None:
        labels = np.where(labels == weights.ignore_index, engine.IGNORE, labels)
    height, width = labels.shape
    raster = Raster(width, height)
    if tape is None:
        tape = _find_tape(block)
    C = spec.class_count
    target = BlockTarget.from_labels(labels, C)

    z = [[[None] * C for _ in range(width)] for _ in range(height)]
    comps = {"purity": [], "size": [], "sharpness": []}
    for classes, shape, inner, leaf_logits in zip(spec.subsets, spec.shapes, block.inner,
                                                 block.logits):
        rmap = render_region_map(shape, inner, raster, config, tape=tape)
        h = render_logits(rmap, leaf_logits)
        for y in range(height):
            for x in range(width):
                for pos, c in enumerate(classes):
                    z[y][x][c] = h[y][x][pos]
        sub = split_target_for_subset(target, classes)
        if len(classes) == C:
            sub = BlockTarget(sub.Y[:, :, :-1])
        hist = region_class_histogram(rmap, sub, tape)
        comps["purity"].append(loss_purity(hist.P, weights.impurity))
        comps["size"].append(loss_min_region_size(hist.s, weights.s_min))
        comps["sharpness"].append(loss_sharpness(rmap, weights.impurity))

    ce = loss_cross_entropy(z, labels, weights.class_weights, tape=tape)
    parts = {"ce": ce}
    for name, vals in comps.items():
        parts[name] = total([wj * v for wj, v in zip(spec.subset_weights, vals)])
    mu1, mu2, mu3, mu4 = weights.mu
    out = (mu1 * parts["ce"] + mu2 * parts["purity"] + mu3 * parts["size"]
           + mu4 * parts["sharpness"])
    report = {name: v.value for name, v in parts.items()}
    report["total"] = out.value
    return out, report


def _find_tape(block: BlockVariables) -> Tape:
    for group in block.inner:
        if group:
            return group[0].tape
    return block.logits[0][0][0].tape


LOSS_CSV_HEADER = ("step", "L_total", "L_CE", "L_Y", "L_s", "L_R")


def write_loss_csv(rows, fh):
    """Write ``(step, total, ce, purity, size, sharpness)`` rows as CSV."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(LOSS_CSV_HEADER)
    for row in rows:
        w.writerow([int(row[0])] + [format(float(v), ".10g") for v in row[1:]])
