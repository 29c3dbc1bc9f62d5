"""Per-block gradient fitting of forest parameters to class masks (the encoder).

Blocks are fitted in fixed chunks of row-major block order. Every block has
its own random stream seeded from ``(seed, bx, by, restart)``, and the
batched kernels never mix rows, so the result is the same for any number of
worker threads.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from segforest import engine
from segforest.data import to_blocks
from segforest.forest import BlockParams, ForestModel, ForestSpec
from segforest.losses import LossWeights
from segforest.metrics import accuracy as cm_accuracy
from segforest.metrics import confusion, miou
from segforest.renderer import RendererConfig, render_forest
from segforest.sdf import SdfKind

log = logging.getLogger(__name__)


WEIGHTINGS = ("block", "image", "uniform")


@dataclass(frozen=True)
class FitConfig:
    steps: int = 300
    learning_rate: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    restarts: int = 4
    early_stop: bool = True
    seed: int = 0
    renderer: RendererConfig = RendererConfig()
    chunk: int = 128
    threads: int = 1
    class_weighting: str = "image"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.chunk < 1 or self.threads < 1:
            raise ValueError("chunk and threads must be >= 1")
        if self.class_weighting not in WEIGHTINGS:
            raise ValueError(f"class_weighting must be one of {WEIGHTINGS}")


@dataclass
class FitStats:
    total: float
    ce: float
    purity: float
    size: float
    sharpness: float
    accuracy: float
    steps: int
    restart: int
    total_steps: int = 0
    history: list | None = field(default=None, repr=False)


def block_rng(seed: int, bx: int, by: int, restart: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), bx, by, restart]))


def _unit_normal(rng):
    a = rng.uniform(0.0, 2.0 * np.pi)
    return np.cos(a), np.sin(a)


def _init_node(node, rng) -> list[float]:
    if node.kind == "quad":
        return list(rng.uniform(-0.5, 0.5, size=2))
    kind = node.sdf
    if kind is SdfKind.LINE:
        n1, n2 = _unit_normal(rng)
        return [n1, n2, rng.uniform(-0.5, 0.5)]
    if kind in (SdfKind.SQUARE, SdfKind.CIRCLE):
        x1, x2 = rng.uniform(-0.5, 0.5, size=2)
        return [x1, x2, rng.uniform(0.2, 0.8)]
    if kind is SdfKind.ELLIPSE:
        f = rng.uniform(-0.5, 0.5, size=4)
        # the sum of focal distances must exceed the focal separation
        return [*f, np.hypot(f[0] - f[2], f[1] - f[3]) + rng.uniform(0.2, 0.8)]
    if kind is SdfKind.HYPERBOLA:
        f = rng.uniform(-0.5, 0.5, size=4)
        # the distance difference must stay below the focal separation
        return [*f, np.hypot(f[0] - f[2], f[1] - f[3]) * rng.uniform(0.2, 0.8)]
    if kind is SdfKind.PARABOLA:
        x1, x2 = rng.uniform(-0.5, 0.5, size=2)
        n1, n2 = _unit_normal(rng)
        return [x1, x2, n1, n2, rng.uniform(-0.5, 0.5)]
    if kind in (SdfKind.KD_X, SdfKind.KD_Y):
        return [rng.uniform(-0.5, 0.5)]
    g = rng.normal(0.0, 0.1, size=2)
    return [g[0], g[1], rng.uniform(-0.5, 0.5)]


def init_params(spec: ForestSpec, rng: np.random.Generator) -> BlockParams:
    """Random parameters whose boundaries cross the block with high probability."""
    inner, logits = [], []
    for shape, s in zip(spec.shapes, spec.layout.subsets):
        vals = []
        for inn in shape.inner:
            vals.extend(_init_node(inn.node, rng))
        inner.append(np.array(vals, dtype=np.float64))
        logits.append(rng.normal(0.0, 0.01, size=(s.leaf_count, s.class_count)))
    return BlockParams(inner, logits)


def _accuracy(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    valid = labels < z.shape[2]
    correct = (engine.argmax_lowest(z) == labels) & valid
    n = valid.sum(axis=1)
    return np.where(n > 0, correct.sum(axis=1) / np.maximum(n, 1), 1.0)


def _effective_labels(labels, weights, class_count):
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.array_equal(labels, np.round(labels)):
            raise ValueError("class labels must be integers")
        labels = labels.astype(np.int64)
    if weights.ignore_index is not None:
        labels = np.where(labels == weights.ignore_index, engine.IGNORE, labels)
    return np.where(labels < class_count, labels, engine.IGNORE)


def block_class_weights(labels: np.ndarray, class_count: int) -> np.ndarray:
    """Inverse class frequency per block, normalized to mean 1 over present classes.

    ``labels`` has shape ``(B, N)``; ignored pixels carry values ``>= class_count``.
    """
    B = labels.shape[0]
    counts = np.zeros((B, class_count))
    for c in range(class_count):
        counts[:, c] = (labels == c).sum(axis=1)
    present = counts > 0
    inv = np.where(present, 1.0 / np.maximum(counts, 1), 0.0)
    n = np.maximum(present.sum(axis=1, keepdims=True), 1)
    mean = inv.sum(axis=1, keepdims=True) / n
    return np.where(present, inv / np.where(mean > 0, mean, 1.0), 1.0)


def _class_weights(labels, weights: LossWeights, config: FitConfig, class_count: int):
    """Per-block weight rows ``(B, C)`` used by the fitting loss."""
    B = labels.shape[0]
    if weights.class_weights is not None:
        return np.broadcast_to(weights.class_weights, (B, class_count)).copy()
    if config.class_weighting == "block":
        return block_class_weights(labels, class_count)
    if config.class_weighting == "image":
        counts = np.bincount(labels[labels < class_count].ravel(), minlength=class_count)
        w = np.ones(class_count)
        present = counts > 0
        if present.any():
            inv = 1.0 / counts[present]
            w[present] = inv / inv.mean()
        return np.broadcast_to(w, (B, class_count)).copy()
    return np.ones((B, class_count))


def _run_restart(spec, labels, pts, weights, config: FitConfig, init, cw, record=False):
    """Adam on a batch of blocks; returns final params, per-block stats arrays."""
    B = init.shape[0]
    params = init.copy()
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    out = {name: np.full(B, np.inf) for name in ("total", "ce", "purity", "size", "sharpness")}
    out["accuracy"] = np.zeros(B)
    out["steps"] = np.zeros(B, dtype=np.int64)
    out["failed"] = np.zeros(B, dtype=bool)
    active = np.arange(B)
    history = [] if record else None

    def settle(rows, res, sel, t):
        for name in ("total", "ce", "purity", "size", "sharpness"):
            out[name][rows] = getattr(res, name)[sel]
        out["steps"][rows] = t

    for t in range(config.steps + 1):
        if active.size == 0:
            break
        last = t == config.steps
        res = engine.loss_and_grad(spec, params[active], pts, labels[active],
                                   replace(weights, class_weights=cw[active]),
                                   config.renderer, need_grad=not last)
        acc = _accuracy(res.logits, labels[active])
        if record:
            history.append((t, res.total[0], res.ce[0], res.purity[0], res.size[0],
                            res.sharpness[0]))
        finite = np.isfinite(res.total)
        if not last:
            finite &= np.isfinite(res.grad).all(axis=1)
        if not finite.all():
            bad = active[~finite]
            log.warning("non-finite loss at step %d in %d block(s); restart aborted", t, bad.size)
            out["failed"][bad] = True
        out["accuracy"][active] = acc
        stop = ~finite | (acc >= 1.0 if config.early_stop else np.zeros_like(finite)) | last
        done = stop & finite
        settle(active[done], res, done, t)
        keep = ~stop
        active = active[keep]
        if active.size == 0 or last:
            break
        g = res.grad[keep]
        lr = config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * t / config.steps))
        m[active] = b1 * m[active] + (1.0 - b1) * g
        v[active] = b2 * v[active] + (1.0 - b2) * g * g
        mhat = m[active] / (1.0 - b1 ** (t + 1))
        vhat = v[active] / (1.0 - b2 ** (t + 1))
        params[active] -= lr * mhat / (np.sqrt(vhat) + eps)
    return params, out, history


def _fit_blocks(spec, labels, coords, weights, config: FitConfig, cw, record=False):
    """Fit a fixed batch of blocks with restarts; returns params and stats per block."""
    B = labels.shape[0]
    S = spec.block_size
    pts = engine.pixel_centers(S, S)
    best = np.zeros((B, spec.layout.total))
    best_stats = {name: np.full(B, np.inf) for name in ("total", "ce", "purity", "size",
                                                         "sharpness")}
    best_stats["accuracy"] = np.zeros(B)
    best_stats["steps"] = np.zeros(B, dtype=np.int64)
    best_stats["restart"] = np.full(B, -1, dtype=np.int64)
    total_steps = np.zeros(B, dtype=np.int64)
    histories = [None] * B
    open_ = np.ones(B, dtype=bool)
    for r in range(config.restarts):
        rows = np.nonzero(open_)[0]
        if rows.size == 0:
            break
        init = np.stack([init_params(spec, block_rng(config.seed, *coords[i], r)).flat()
                         for i in rows])
        params, st, hist = _run_restart(spec, labels[rows], pts, weights, config, init,
                                        cw[rows], record=record and B == 1)
        total_steps[rows] += st["steps"]
        for j, i in enumerate(rows):
            if st["failed"][j]:
                continue
            perfect = config.early_stop and st["accuracy"][j] >= 1.0
            if perfect or st["total"][j] < best_stats["total"][i] or best_stats["restart"][i] < 0:
                best[i] = params[j]
                for name in ("total", "ce", "purity", "size", "sharpness", "accuracy", "steps"):
                    best_stats[name][i] = st[name][j]
                best_stats["restart"][i] = r
                histories[i] = hist
            if perfect:
                open_[i] = False
    for i in np.nonzero(best_stats["restart"] < 0)[0]:
        log.warning("block %s: every restart failed; keeping the first initialization",
                    tuple(coords[i]))
        best[i] = init_params(spec, block_rng(config.seed, *coords[i], 0)).flat()
    stats = [FitStats(float(best_stats["total"][i]), float(best_stats["ce"][i]),
                      float(best_stats["purity"][i]), float(best_stats["size"][i]),
                      float(best_stats["sharpness"][i]), float(best_stats["accuracy"][i]),
                      int(best_stats["steps"][i]), int(best_stats["restart"][i]),
                      int(total_steps[i]), histories[i]) for i in range(B)]
    return best, stats


def fit_block(labels: np.ndarray, spec: ForestSpec, weights: LossWeights = LossWeights(),
              config: FitConfig = FitConfig(), block: tuple[int, int] = (0, 0),
              record: bool = False):
    """Fit one ``S x S`` block; returns ``(BlockParams, FitStats)``.

    With ``record`` the stats carry the per-step loss history of the chosen
    restart as ``(step, total, ce, purity, size, sharpness)`` tuples.
    """
    labels = np.asarray(labels)
    S = spec.block_size
    if labels.shape != (S, S):
        raise ValueError(f"block target must be {S}x{S}, got {labels.shape}")
    flat = _effective_labels(labels.reshape(1, S * S), weights, spec.class_count)
    cw = _class_weights(flat, weights, config, spec.class_count)
    best, stats = _fit_blocks(spec, flat, np.array([block]), weights, config, cw, record=record)
    return BlockParams.from_flat(spec, best[0]), stats[0]


@dataclass
class ImageFit:
    """Aggregate result of encoding one mask."""

    accuracy: float
    miou: float
    blocks: list[tuple[int, int, FitStats]]
    reconstruction: np.ndarray

    @property
    def mean_steps(self) -> float:
        return float(np.mean([s.total_steps for _, _, s in self.blocks])) if self.blocks else 0.0

    @property
    def max_steps(self) -> int:
        return max((s.total_steps for _, _, s in self.blocks), default=0)


def fit_image(mask: np.ndarray, spec: ForestSpec, weights: LossWeights = LossWeights(),
              config: FitConfig = FitConfig()) -> tuple[ForestModel, ImageFit]:
    """Fit every block of a mask independently and measure the round trip.

    Unless ``weights`` carries explicit class weights, they follow
    ``config.class_weighting``: inverse frequency over the whole mask
    (default), per block, or uniform.
    """
    mask = np.asarray(mask)
    S = spec.block_size
    h, w = mask.shape
    if h % S or w % S:
        raise ValueError(f"mask {w}x{h} is not a multiple of block size {S}; pad it first")
    hb, wb = h // S, w // S
    labels = _effective_labels(to_blocks(mask, S).reshape(hb * wb, S * S), weights,
                               spec.class_count)
    cw = _class_weights(labels, weights, config, spec.class_count)
    coords = np.array([(bx, by) for by in range(hb) for bx in range(wb)], dtype=np.int64)
    chunks = [slice(a, min(a + config.chunk, hb * wb)) for a in range(0, hb * wb, config.chunk)]

    def work(sl):
        return _fit_blocks(spec, labels[sl], coords[sl], weights, config, cw[sl])

    if config.threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(sl) for sl in chunks]

    params = np.zeros((hb * wb, spec.layout.total))
    blocks = []
    for sl, (best, stats) in zip(chunks, results):
        params[sl] = best
        for (bx, by), st in zip(coords[sl], stats):
            blocks.append((int(bx), int(by), st))
    model = ForestModel(spec, params.reshape(hb, wb, -1))
    recon, _ = render_forest(model, config=config.renderer)
    cm = confusion(recon, mask, spec.class_count, weights.ignore_index)
    if cm.sum() == 0:
        acc, mi = 1.0, 1.0
    else:
        acc, mi = cm_accuracy(cm), miou(cm)
    return model, ImageFit(acc, mi, blocks, recon)
