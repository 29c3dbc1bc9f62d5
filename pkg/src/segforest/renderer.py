"""Region-map rendering of partitioning trees.

``render_region_map`` and ``render_logits`` operate on tape values so every
step is differentiable; ``render_forest`` and the visualizations evaluate
whole images with the batched numpy engine.
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from segforest import engine
from segforest.forest import ForestModel, TreeShape
from segforest.grad_core import DiffValue, Tape, relu, sigmoid, softmax, total
from segforest.sdf import eval_sdf

# Fig.-10 style region colors: red, green, blue, cyan.
DEFAULT_PALETTE = ((255, 0, 0), (0, 255, 0), (0, 0, 255), (0, 255, 255))


@dataclass(frozen=True)
class Raster:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("raster must be at least 1x1")

    def points(self) -> np.ndarray:
        return engine.pixel_centers(self.width, self.height)


@dataclass(frozen=True)
class RendererConfig:
    """``mode`` is ``"refined"`` (ReLU accumulation) or ``"legacy"`` (sigmoid products)."""

    mode: str = "refined"
    lam: float = 1.0
    lam1: float = 1.0
    lam2: float = 1.0

    def __post_init__(self):
        if self.mode not in ("refined", "legacy"):
            raise ValueError(f"unknown renderer mode {self.mode!r}")
        if not (self.lam > 0 and self.lam1 > 0 and self.lam2 > 0):
            raise ValueError("lambda values must be positive")


@dataclass
class RegionMap:
    """``probs[i][y][x]``: probability that pixel ``(x, y)`` lies in leaf region ``i``."""

    probs: list[list[list[DiffValue]]]

    @property
    def leaf_count(self) -> int:
        return len(self.probs)

    def values(self) -> np.ndarray:
        return np.array([[[v.value for v in row] for row in plane] for plane in self.probs])


def _region_sums(shape: TreeShape, params, p, config: RendererConfig, tape: Tape):
    """Pre-softmax accumulator of one pixel, one entry per leaf."""
    k = shape.leaf_count
    if config.mode == "refined":
        acc = [tape.lift(0.0) for _ in range(k)]
        for inn in shape.inner:
            theta = params[inn.offset:inn.offset + inn.node.parameter_count]
            if inn.node.kind == "bsp":
                g = config.lam * eval_sdf(inn.node.sdf, theta, p)
                parts = (relu(g), relu(-g))
            else:
                t1 = theta[0] - p[0]
                t2 = theta[1] - p[1]
                t3, t4, t5, t6 = relu(t1), relu(-t1), relu(t2), relu(-t2)
                parts = (config.lam * (t4 * t5), config.lam * (t3 * t5),
                         config.lam * (t4 * t6), config.lam * (t3 * t6))
            for leaves, part in zip(inn.slots, parts):
                for leaf in leaves:
                    acc[leaf] = acc[leaf] + part
        return acc

    factors = []
    for inn in shape.inner:
        theta = params[inn.offset:inn.offset + inn.node.parameter_count]
        if inn.node.kind == "bsp":
            g = sigmoid(config.lam1 * eval_sdf(inn.node.sdf, theta, p))
            factors.append((config.lam2 * g, config.lam2 * (1.0 - g)))
        else:
            gx = sigmoid(config.lam1 * (theta[0] - p[0]))
            gy = sigmoid(config.lam1 * (theta[1] - p[1]))
            factors.append((config.lam2 * (1.0 - gx) * gy, config.lam2 * gx * gy,
                            config.lam2 * (1.0 - gx) * (1.0 - gy),
                            config.lam2 * gx * (1.0 - gy)))
    acc = [tape.lift(1.0) for _ in range(k)]
    for leaf, path in enumerate(shape.leaf_paths):
        for ordinal, slot in path:
            acc[leaf] = acc[leaf] * factors[ordinal][slot]
    return acc


def render_region_map(shape: TreeShape, inner_params: Sequence[DiffValue], raster: Raster,
                      config: RendererConfig = RendererConfig(), tape: Tape | None = None,
                      presoftmax: bool = False) -> RegionMap:
    """Differentiable region map of one tree over a raster.

    ``tape`` is only needed when the tree has no inner parameters.
    """
    if len(inner_params) != shape.inner_parameter_count:
        raise ValueError(f"tree needs {shape.inner_parameter_count} inner parameters, "
                         f"got {len(inner_params)}")
    if tape is None:
        if not inner_params:
            raise ValueError("pass a tape for trees without inner parameters")
        tape = inner_params[0].tape
    pts = raster.points()
    k = shape.leaf_count
    probs = [[[None] * raster.width for _ in range(raster.height)] for _ in range(k)]
    for n, (p1, p2) in enumerate(pts):
        y, x = divmod(n, raster.width)
        acc = _region_sums(shape, inner_params, (float(p1), float(p2)), config, tape)
        out = acc if presoftmax else softmax(acc)
        for i in range(k):
            probs[i][y][x] = out[i]
    return RegionMap(probs)


def render_logits(region_map: RegionMap, leaf_logits) -> list[list[list[DiffValue]]]:
    """Per-pixel blend of leaf logit vectors, indexed ``[y][x][c]``."""
    k = region_map.leaf_count
    if len(leaf_logits) != k:
        raise ValueError(f"expected {k} leaf logit vectors, got {len(leaf_logits)}")
    n_cls = len(leaf_logits[0])
    if any(len(v) != n_cls for v in leaf_logits):
        raise ValueError("leaf logit vectors differ in length")
    height = len(region_map.probs[0])
    width = len(region_map.probs[0][0])
    out = []
    for y in range(height):
        row = []
        for x in range(width):
            row.append([total([region_map.probs[i][y][x] * leaf_logits[i][c] for i in range(k)])
                        for c in range(n_cls)])
        out.append(row)
    return out


def render_blocks(model: ForestModel, raster: Raster, config: RendererConfig = RendererConfig(),
                  chunk: int = 512):
    """Logits for every block, shape ``(H_b, W_b, raster.height, raster.width, C)``."""
    w, h = model.grid_size
    flat = model.params.reshape(h * w, -1)
    pts = raster.points()
    out = np.zeros((h * w, pts.shape[0], model.spec.class_count))
    for start in range(0, h * w, chunk):
        z, _ = engine.forward_logits(model.spec, flat[start:start + chunk], pts, config)
        out[start:start + chunk] = z
    return out.reshape(h, w, raster.height, raster.width, -1)


def _tile(blocks: np.ndarray) -> np.ndarray:
    """``(H_b, W_b, h, w, ...)`` -> ``(H_b*h, W_b*w, ...)``."""
    hb, wb, h, w = blocks.shape[:4]
    rest = blocks.shape[4:]
    return blocks.transpose(0, 2, 1, 3, *range(4, blocks.ndim)).reshape(hb * h, wb * w, *rest)


def render_forest(model: ForestModel, raster: Raster | None = None,
                  config: RendererConfig = RendererConfig()):
    """Render a whole model; returns ``(class mask, logits)``.

    ``raster`` is the per-block sampling grid (default: native block size).
    Ties in the argmax go to the lowest class index.
    """
    if raster is None:
        raster = Raster(model.spec.block_size, model.spec.block_size)
    logits = _tile(render_blocks(model, raster, config))
    mask = engine.argmax_lowest(logits).astype(np.uint8)
    return mask, logits


def evaluate_points(model: ForestModel, bx: int, by: int, pts: np.ndarray,
                    config: RendererConfig = RendererConfig()) -> np.ndarray:
    """Logits of one block at arbitrary block-normalized points, shape ``(N, C)``."""
    z, _ = engine.forward_logits(model.spec, model.params[by, bx][None], np.asarray(pts, float),
                                 config)
    return z[0]


def region_visualization(region_map: np.ndarray, palette=DEFAULT_PALETTE) -> np.ndarray:
    """Blend palette colors with a region map ``(k, H, W)``; returns ``(H, W, 3)`` uint8."""
    region_map = np.asarray(region_map, dtype=np.float64)
    k = region_map.shape[0]
    if len(palette) < k:
        raise ValueError(f"palette has {len(palette)} colors, need {k}")
    colors = np.asarray(palette[:k], dtype=np.float64)
    img = (region_map[:, :, :, None] * colors[:, None, None, :]).sum(axis=0)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def model_region_maps(model: ForestModel, subset: int = 0, raster: Raster | None = None,
                      config: RendererConfig = RendererConfig()) -> np.ndarray:
    """Region maps of one subset's trees, shape ``(H_b, W_b, k, h, w)``."""
    spec = model.spec
    if raster is None:
        raster = Raster(spec.block_size, spec.block_size)
    s = spec.layout.subsets[subset]
    w, h = model.grid_size
    flat = model.params.reshape(h * w, -1)
    inner = flat[:, s.inner_offset:s.inner_offset + s.inner_count]
    R, _, _ = engine.region_forward(spec.shapes[subset], inner, raster.points(), config)
    return R.reshape(h, w, s.leaf_count, raster.height, raster.width)


def model_region_visualization(model: ForestModel, subset: int = 0, raster: Raster | None = None,
                               palette=DEFAULT_PALETTE,
                               config: RendererConfig = RendererConfig()) -> np.ndarray:
    maps = model_region_maps(model, subset, raster, config)
    hb, wb, k, h, w = maps.shape
    tiles = np.stack([[region_visualization(maps[y, x], palette) for x in range(wb)]
                      for y in range(hb)]) if hb * wb else np.zeros((hb, wb, h, w, 3), np.uint8)
    return _tile(tiles)


def purity_visualization(model: ForestModel, mask: np.ndarray, subset: int = 0,
                         raster: Raster | None = None,
                         config: RendererConfig = RendererConfig()) -> np.ndarray:
    """Gray image of ``sum_i R_i * H(P_B^i)``: black for pure regions, bright for mixed ones.

    Region impurities come from the ground truth at native resolution; the
    image is rendered on ``raster`` per block.
    """
    from segforest.metrics import region_gini_table

    gini = region_gini_table(model, mask, config)[subset]
    maps = model_region_maps(model, subset, raster, config)
    shade = (maps * gini[:, :, :, None, None]).sum(axis=2)
    gray = np.clip(np.rint(255.0 * _tile(shade)), 0, 255).astype(np.uint8)
    return np.repeat(gray[:, :, None], 3, axis=2)
