"""Finite-difference verification of every differentiable path.

Each row draws random points, compares tape gradients with central
differences and reports the worst relative error. The batched engine rows
compare its values and gradients with the tape instead. Points closer than
``KINK_MARGIN`` to a non-differentiable switch, or whose finite-difference
probes take a different branch than the base point, are excluded and counted.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from segforest import engine
from segforest.forest import ForestSpec, TreeShape, bsp_tree, parse_tree, quad_tree
from segforest.grad_core import DomainError, Tape, relative_error, relu, total
from segforest.losses import EmptyTargetWarning, LossWeights, block_variables, loss_total
from segforest.renderer import Raster, RendererConfig, render_region_map
from segforest.sdf import SdfKind, eval_sdf

STEP = 1e-5
TOLERANCE = 1e-4
KINK_MARGIN = 1e-4
MODES = ("refined", "legacy")
COMPONENTS = ("ce", "purity", "size", "sharpness")


@dataclass
class CheckRow:
    name: str
    trials: int
    excluded: int
    max_error: float
    require_accepted: bool = True

    @property
    def accepted(self) -> int:
        return self.trials - self.excluded

    @property
    def passed(self) -> bool:
        if self.require_accepted and self.accepted == 0:
            return False
        return self.max_error < TOLERANCE


def _run(fn, point):
    tape = Tape()
    xs = [tape.variable(v) for v in point]
    out = fn(xs)
    return out, xs, tape


def check_point(fn: Callable, point, step: float = STEP):
    """Relative error of tape gradients at one point, or ``None`` when excluded."""
    point = [float(v) for v in point]
    try:
        out, xs, tape = _run(fn, point)
    except DomainError:
        return None
    if tape.kink_margin < KINK_MARGIN:
        return None
    branches = tape.branches
    table = tape.backward(out)
    worst = 0.0
    for i, x in enumerate(xs):
        vals = []
        for sign in (1.0, -1.0):
            p = list(point)
            p[i] += sign * step
            try:
                o, _, t = _run(fn, p)
            except DomainError:
                return None
            if t.branches != branches:
                return None
            vals.append(o.value)
        numeric = (vals[0] - vals[1]) / (2.0 * step)
        worst = max(worst, relative_error(table[x.index], numeric))
    return worst


def check_against_tape(fn: Callable, point, value_grad: Callable):
    """Relative error of ``value_grad(point) -> (value, gradient)`` against the tape."""
    point = [float(v) for v in point]
    try:
        out, xs, tape = _run(fn, point)
    except DomainError:
        return None
    if tape.kink_margin < KINK_MARGIN:
        return None
    table = tape.backward(out)
    value, grad = value_grad(point)
    worst = relative_error(value, out.value)
    for x, g in zip(xs, grad):
        worst = max(worst, relative_error(g, table[x.index]))
    return worst


def run_row(name: str, trials: int, sample: Callable, build: Callable, seed: int,
            require_accepted: bool = True) -> CheckRow:
    """``sample(rng) -> (point, context)``; ``build(context) -> (fn, value_grad | None)``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, *name.encode()]))
    excluded, worst = 0, 0.0
    for _ in range(trials):
        point, ctx = sample(rng)
        fn, vg = build(ctx)
        err = check_point(fn, point) if vg is None else check_against_tape(fn, point, vg)
        if err is None:
            excluded += 1
        else:
            worst = max(worst, err)
    return CheckRow(name, trials, excluded, worst, require_accepted)


def _sdf_row(kind: SdfKind, trials, seed):
    def sample(rng):
        return rng.uniform(-1, 1, kind.parameter_count), tuple(rng.uniform(-1, 1, 2))

    def build(p):
        return (lambda xs: eval_sdf(kind, xs, p)), None

    return run_row(f"sdf/{kind.name.lower()}", trials, sample, build, seed)


def _region_row(name: str, shape: TreeShape, config: RendererConfig, trials, seed, size=2):
    raster = Raster(size, size)

    def sample(rng):
        coef = rng.normal(size=(shape.leaf_count, size, size))
        return rng.uniform(-1, 1, shape.inner_parameter_count), coef

    def build(coef):
        def fn(xs):
            rmap = render_region_map(shape, xs, raster, config)
            return total([rmap.probs[i][y][x] * float(coef[i, y, x])
                          for i in range(shape.leaf_count)
                          for y in range(size) for x in range(size)])
        return fn, None

    return run_row(name, trials, sample, build, seed)


LOSS_SPEC = ForestSpec(2, 3, ((0, 1), (2,)), (bsp_tree(SdfKind.LINE, 1), quad_tree(1)))


def _loss_sample(spec: ForestSpec):
    S = spec.block_size

    def sample(rng):
        labels = rng.integers(0, spec.class_count, size=(S, S))
        labels[rng.random((S, S)) < 0.15] = engine.IGNORE
        cw = rng.uniform(0.5, 2.0, spec.class_count)
        return rng.uniform(-1, 1, spec.layout.total), (labels, cw)

    return sample


def _loss_row(component: str, trials, seed, config=RendererConfig()):
    mu = tuple(1.0 if c == component else 0.0 for c in COMPONENTS)

    def build(ctx):
        labels, cw = ctx
        weights = LossWeights(mu=mu, s_min=1.5, class_weights=cw)

        def fn(xs):
            block = block_variables(LOSS_SPEC, xs[0].tape, xs)
            # fully ignored samples are valid: CE is defined as 0 there
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", EmptyTargetWarning)
                return loss_total(LOSS_SPEC, block, labels, weights, config)[0]
        return fn, None

    return run_row(f"loss/{component}", trials, _loss_sample(LOSS_SPEC), build, seed)


ENGINE_SPEC = ForestSpec(3, 4, ((0, 1, 2), (3,)),
                         (parse_tree("mixed:BL BC L L Q L L L L"),
                          parse_tree("mixed:BE BD L L BP L L")))


def _engine_row(mode: str, trials, seed):
    """Batched engine value and gradient of the full objective against the tape."""
    config = RendererConfig(mode=mode)
    pts = engine.pixel_centers(ENGINE_SPEC.block_size, ENGINE_SPEC.block_size)

    def build(ctx):
        labels, cw = ctx
        weights = LossWeights(s_min=1.5, class_weights=cw)
        flat_labels = labels.reshape(1, -1)

        def value_grad(p):
            res = engine.loss_and_grad(ENGINE_SPEC, np.array([p]), pts, flat_labels, weights,
                                       config)
            return res.total[0], res.grad[0]

        def fn(xs):
            block = block_variables(ENGINE_SPEC, xs[0].tape, xs)
            return loss_total(ENGINE_SPEC, block, labels, weights, config)[0]
        return fn, value_grad

    return run_row(f"engine/{mode}", trials, _loss_sample(ENGINE_SPEC), build, seed)


def _probe_row(trials, seed):
    """Half the samples sit exactly on a ReLU kink and must all be excluded."""
    state = {"i": 0}

    def sample(rng):
        state["i"] += 1
        x = 0.0 if state["i"] % 2 else rng.uniform(-1, 1)
        return [x, rng.uniform(-1, 1)], None

    def build(_):
        return (lambda xs: relu(xs[0]) * xs[1]), None

    return run_row("probe/relu-kink", trials, sample, build, seed, require_accepted=False)


def gradcheck_suite(trials: int = 1000, seed: int = 0, progress: Callable | None = None):
    """All rows: SDF kinds, region maps per kind and mode, quadtrees, loss terms, engine."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    jobs = [lambda k=k: _sdf_row(k, trials, seed) for k in SdfKind]
    for mode in MODES:
        cfg = RendererConfig(mode=mode)
        for k in SdfKind:
            jobs.append(lambda k=k, cfg=cfg, mode=mode: _region_row(
                f"render/{mode}/{k.name.lower()}", bsp_tree(k, 1), cfg, trials, seed))
        jobs.append(lambda cfg=cfg, mode=mode: _region_row(
            f"quad/{mode}", quad_tree(1), cfg, trials, seed, size=3))
    jobs += [lambda c=c: _loss_row(c, trials, seed) for c in COMPONENTS]
    jobs += [lambda m=m: _engine_row(m, trials, seed) for m in MODES]
    jobs.append(lambda: _probe_row(trials, seed))
    rows = []
    for job in jobs:
        row = job()
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def format_row(row: CheckRow) -> str:
    verdict = "PASS" if row.passed else "FAIL"
    err = "inf" if math.isinf(row.max_error) else f"{row.max_error:.3e}"
    return (f"{row.name:<28} trials={row.trials:<6} excluded={row.excluded:<6} "
            f"max rel err={err}  max rel err < 1e-4: {verdict}")
