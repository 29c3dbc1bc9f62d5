"""Command-line interface: ``segforest <command> [flags]``.

Exit codes: 0 success, 2 bad input or unreadable files, 3 contract
violation (inconsistent data), 4 internal error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from segforest import data, fitter, gradcheck, metrics
from segforest.forest import (ForestFormatError, ForestSpec, deserialize, parse_subsets,
                              parse_tree, serialize)
from segforest.losses import LossWeights
from segforest.renderer import (DEFAULT_PALETTE, Raster, RendererConfig,
                                model_region_visualization, purity_visualization,
                                render_forest)

log = logging.getLogger("segforest")

EXIT_OK, EXIT_INPUT, EXIT_CONTRACT, EXIT_INTERNAL = 0, 2, 3, 4
EXTRA_COLORS = ((255, 0, 255), (255, 255, 0), (255, 255, 255), (128, 128, 128))
REPORT_COLUMNS = ("scope", "block_x", "block_y", "accuracy", "miou", "steps", "restart",
                  "l_total", "l_ce", "l_y", "l_s", "l_r")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _num(x) -> str:
    return "" if x is None else format(float(x), ".17g")


# ---------------------------------------------------------------- flags


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--threads", type=int, default=1, help="worker threads for block fitting")
    g.add_argument("--block-size", type=int, default=8)
    g.add_argument("--tree", default="bsp:line:2",
                   help='tree DSL: "bsp:<sdf>:<d>", "kd:<d>", "dynkd:<d>", "quad:<d>", '
                        '"mixed:<codes>"')
    g.add_argument("--subsets", default="single",
                   help='"single", "per-class" or explicit "0,1|2,3"')
    g.add_argument("--mu", default=None, help="loss weights mu1,mu2,mu3,mu4 (sum 1)")
    g.add_argument("--smin", type=float, default=8.0, help="minimum region size in pixels")
    g.add_argument("--lambda", dest="lam", type=float, default=1.0)
    g.add_argument("--lambda1", type=float, default=1.0, help="legacy sigmoid sharpness")
    g.add_argument("--lambda2", type=float, default=1.0, help="legacy output scale")
    g.add_argument("--mode", choices=("refined", "legacy"), default="refined")
    g.add_argument("--steps", type=int, default=300)
    g.add_argument("--lr", type=float, default=1.0)
    g.add_argument("--restarts", type=int, default=4)
    g.add_argument("--no-early-stop", action="store_true")
    g.add_argument("--weighting", choices=fitter.WEIGHTINGS, default="image",
                   help="class weighting of the fitting loss")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="segforest",
                                     description="Differentiable BSP forest mask codec.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", parents=[common], help="fit a forest to a class mask")
    p.add_argument("mask", help="input PGM class mask")
    p.add_argument("-o", "--out", required=True, help="output model (.sff)")
    p.add_argument("--report", help="per-block report CSV")
    p.add_argument("--classes", type=int, help="class count (default: max label + 1)")
    p.add_argument("--ignore-class", type=int, help="class excluded from loss and metrics")

    p = sub.add_parser("render", parents=[common], help="render a model to a class mask")
    p.add_argument("model", help="input model (.sff)")
    p.add_argument("-o", "--out", required=True, help="output PGM mask")
    p.add_argument("--scale", type=int, default=1, help="samples per pixel edge")
    p.add_argument("--regionvis", help="region-map visualization PPM")
    p.add_argument("--purityvis", help="region-purity visualization PPM (needs --gt)")
    p.add_argument("--gt", help="ground-truth PGM for --purityvis")
    p.add_argument("--subset", type=int, default=0, help="subset shown by the visualizations")

    p = sub.add_parser("eval", parents=[common], help="compare a prediction with ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--ignore-class", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("-o", "--out", help="metrics CSV (default stdout)")

    p = sub.add_parser("toygen", parents=[common], help="generate toy datasets")
    p.add_argument("kind", help="circles or partition")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--outdir", default=".")
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--classes", type=int, default=8)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=1000)

    p = sub.add_parser("toyexp", parents=[common], help="toy experiments")
    p.add_argument("kind", help="partition-trees or circles-sdf")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("-o", "--out", help="summary CSV (default stdout)")
    return parser


@dataclass
class Settings:
    renderer: RendererConfig
    mu: tuple
    fit: fitter.FitConfig


def _settings(args) -> Settings:
    """Validate shared flags before any work starts."""
    try:
        if args.mu is None:
            mu = LossWeights().mu
        else:
            mu = tuple(float(v) for v in args.mu.split(","))
        LossWeights(mu=mu, s_min=args.smin)
        renderer = RendererConfig(args.mode, args.lam, args.lambda1, args.lambda2)
        if args.block_size < 1:
            raise ValueError("--block-size must be >= 1")
        if args.seed < 0:
            raise ValueError("--seed must be non-negative")
        fit = fitter.FitConfig(steps=args.steps, learning_rate=args.lr, restarts=args.restarts,
                               early_stop=not args.no_early_stop, seed=args.seed,
                               renderer=renderer, threads=args.threads,
                               class_weighting=args.weighting)
        parse_tree(args.tree)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    return Settings(renderer, mu, fit)


def _spec(args, class_count: int) -> ForestSpec:
    try:
        shape = parse_tree(args.tree)
        subsets = parse_subsets(args.subsets, class_count)
        return ForestSpec(args.block_size, class_count, subsets, (shape,) * len(subsets))
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None


# ---------------------------------------------------------------- I/O


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {path}: {exc.strerror or exc}") from None


def _write(path: str, payload: bytes | str):
    try:
        p = Path(path)
        if p.parent and not p.parent.exists():
            p.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(payload, str):
            p.write_text(payload, encoding="utf-8", newline="")
        else:
            p.write_bytes(payload)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot write {path}: {exc.strerror or exc}") from None


def _load_mask(path: str) -> np.ndarray:
    try:
        return data.load_mask(_read(path))
    except data.MaskFormatError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from None


def _emit(text: str, path: str | None):
    if path is None:
        sys.stdout.write(text)
    else:
        _write(path, text)


def _class_count(*masks) -> int:
    top = 0
    for m in masks:
        valid = m[m != data.IGNORE]
        if valid.size:
            top = max(top, int(valid.max()) + 1)
    return max(top, 1)


# ---------------------------------------------------------------- commands


def block_report(model, mask, fit: fitter.ImageFit, ignore_class=None) -> str:
    """Report CSV: one image row, then one row per block in row-major order."""
    S = model.spec.block_size
    C = model.spec.class_count
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    w.writerow(["image", "", "", _num(fit.accuracy), _num(fit.miou), fit.max_steps, "",
                "", "", "", "", ""])
    for bx, by, st in fit.blocks:
        sl = np.s_[by * S:(by + 1) * S, bx * S:(bx + 1) * S]
        cm = metrics.confusion(fit.reconstruction[sl], mask[sl], C, ignore_class)
        block_miou = metrics.miou(cm) if cm.sum() else None
        w.writerow(["block", bx, by, _num(st.accuracy), _num(block_miou), st.total_steps,
                    st.restart, _num(st.total), _num(st.ce), _num(st.purity), _num(st.size),
                    _num(st.sharpness)])
    return out.getvalue()


def cmd_encode(args) -> int:
    settings = _settings(args)
    mask = _load_mask(args.mask)
    C = args.classes if args.classes is not None else _class_count(mask)
    if C < 1:
        raise CliError(EXIT_INPUT, "--classes must be >= 1")
    try:
        data.check_mask(mask, C)
    except ValueError as exc:
        raise CliError(EXIT_CONTRACT, f"{args.mask}: {exc}") from None
    spec = _spec(args, C)
    padded = data.pad_to_blocks(mask, spec.block_size)
    if padded.shape != mask.shape:
        log.info("padded %dx%d mask to %dx%d", mask.shape[1], mask.shape[0],
                 padded.shape[1], padded.shape[0])
    weights = LossWeights(mu=settings.mu, s_min=args.smin, ignore_index=args.ignore_class)
    model, fit = fitter.fit_image(padded, spec, weights, settings.fit)
    _write(args.out, serialize(model))
    if args.report:
        _write(args.report, block_report(model, padded, fit, args.ignore_class))
    print(f"accuracy {fit.accuracy:.17g}")
    print(f"miou {fit.miou:.17g}")
    return EXIT_OK


def _load_model(path):
    try:
        return deserialize(_read(path))
    except ForestFormatError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from None


def cmd_render(args) -> int:
    settings = _settings(args)
    if args.purityvis and not args.gt:
        raise CliError(EXIT_INPUT, "--purityvis requires --gt")
    if args.scale < 1:
        raise CliError(EXIT_INPUT, "--scale must be >= 1")
    model = _load_model(args.model)
    spec = model.spec
    if not 0 <= args.subset < len(spec.subsets):
        raise CliError(EXIT_INPUT, f"--subset must be in 0..{len(spec.subsets) - 1}")
    S = spec.block_size * args.scale
    raster = Raster(S, S)
    mask, _ = render_forest(model, raster, settings.renderer)
    _write(args.out, data.save_mask(mask))
    palette = DEFAULT_PALETTE + EXTRA_COLORS
    if args.regionvis:
        k = spec.shapes[args.subset].leaf_count
        if k > len(palette):
            raise CliError(EXIT_CONTRACT, f"region visualization supports at most "
                                          f"{len(palette)} leaves, tree has {k}")
        img = model_region_visualization(model, args.subset, raster, palette, settings.renderer)
        _write(args.regionvis, data.save_ppm(img))
    if args.purityvis:
        gt = _load_mask(args.gt)
        w, h = model.grid_size
        if gt.shape != (h * spec.block_size, w * spec.block_size):
            gt = data.pad_to_blocks(gt, spec.block_size)
        if gt.shape != (h * spec.block_size, w * spec.block_size):
            raise CliError(EXIT_CONTRACT, f"ground truth {gt.shape[1]}x{gt.shape[0]} does not "
                                          f"match the model grid")
        img = purity_visualization(model, gt, args.subset, raster, settings.renderer)
        _write(args.purityvis, data.save_ppm(img))
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = _load_mask(args.pred)
    gt = _load_mask(args.gt)
    if pred.shape != gt.shape:
        raise CliError(EXIT_CONTRACT, f"dimension mismatch: pred {pred.shape[1]}x"
                                      f"{pred.shape[0]} vs gt {gt.shape[1]}x{gt.shape[0]}")
    C = args.classes if args.classes is not None else _class_count(pred, gt)
    try:
        cm = metrics.confusion(pred, gt, C, args.ignore_class)
        out = io.StringIO()
        metrics.write_metrics_csv(cm, out, args.ignore_class)
    except metrics.MetricsError as exc:
        raise CliError(EXIT_CONTRACT, str(exc)) from None
    _emit(out.getvalue(), args.out)
    return EXIT_OK


def cmd_toygen(args) -> int:
    if args.kind not in ("circles", "partition"):
        raise CliError(EXIT_INPUT, f"unknown toy kind {args.kind!r} (circles or partition)")
    if args.n < 0:
        raise CliError(EXIT_INPUT, "--n must be >= 0")
    try:
        cfg = data.ToyConfig(image_size=args.image_size, classes=args.classes)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    outdir = Path(args.outdir)
    for i in range(args.n):
        seed = args.seed + i
        if args.kind == "circles":
            mask, rgb = data.gen_circles_toy(cfg, seed)
        else:
            mask = data.gen_partition_toy(cfg, seed)
            rgb = data.colorize(mask)
        stem = outdir / f"{args.kind}_{i:04d}"
        _write(str(stem) + ".pgm", data.save_mask(mask))
        _write(str(stem) + ".ppm", data.save_ppm(rgb))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise CliError(EXIT_INPUT, "--trials must be >= 1")
    rows = gradcheck.gradcheck_suite(args.trials, args.seed,
                                     progress=lambda r: print(gradcheck.format_row(r),
                                                              flush=True))
    excluded = sum(r.excluded for r in rows)
    failed = [r.name for r in rows if not r.passed]
    print(f"excluded near kinks: {excluded}")
    print("ALL PASS" if not failed else "FAILED: " + ", ".join(failed))
    return EXIT_OK if not failed else EXIT_INTERNAL


PARTITION_STRUCTURES = (("bsp:line:2", "bsp:line:2"), ("kd:2", "kd:2"))
CIRCLE_SDFS = (("f1", "bsp:line:1"), ("f3", "bsp:circle:1"))
CIRCLE_BLOCK = 32


def partition_trees(runs: int, settings: Settings, smin: float):
    """Fit depth-2 BSP and depth-2 k-d forests to partition toys.

    Returns rows ``(structure, run, accuracy, perfect, steps_to_perfect)``.
    """
    cfg = data.ToyConfig()
    rows = []
    for name, tree in PARTITION_STRUCTURES:
        spec = ForestSpec.single(cfg.classes, parse_tree(tree))
        for run in range(runs):
            mask = data.gen_partition_toy(cfg, settings.fit.seed + run)
            _, fit = fitter.fit_image(mask, spec, LossWeights(mu=settings.mu, s_min=smin),
                                      settings.fit)
            perfect = fit.accuracy == 1.0
            rows.append((name, run, fit.accuracy, perfect, fit.max_steps if perfect else None))
    return rows


def circles_sdf(runs: int, settings: Settings, smin: float):
    """Depth-1, 32x32-block forests with lines and with circles on circle toys.

    Returns rows ``(sdf, run, accuracy, miou)``.
    """
    cfg = data.ToyConfig()
    rows = []
    for name, tree in CIRCLE_SDFS:
        spec = ForestSpec.single(cfg.classes, parse_tree(tree), block_size=CIRCLE_BLOCK)
        for run in range(runs):
            mask, _ = data.gen_circles_toy(cfg, settings.fit.seed + run)
            _, fit = fitter.fit_image(mask, spec, LossWeights(mu=settings.mu, s_min=smin),
                                      settings.fit)
            rows.append((name, run, fit.accuracy, fit.miou))
    return rows


def cmd_toyexp(args) -> int:
    settings = _settings(args)
    if args.kind not in ("partition-trees", "circles-sdf"):
        raise CliError(EXIT_INPUT, f"unknown experiment {args.kind!r} "
                                   "(partition-trees or circles-sdf)")
    if args.runs < 1:
        raise CliError(EXIT_INPUT, "--runs must be >= 1")
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    if args.kind == "partition-trees":
        rows = partition_trees(args.runs, settings, args.smin)
        w.writerow(["structure", "run", "accuracy", "perfect", "steps_to_perfect"])
        for name, run, acc, perfect, steps in rows:
            w.writerow([name, run, _num(acc), int(perfect), "" if steps is None else steps])
        w.writerow([])
        w.writerow(["structure", "images", "perfect", "perfect_rate", "mean_steps_to_perfect"])
        for name, _ in PARTITION_STRUCTURES:
            mine = [r for r in rows if r[0] == name]
            steps = [r[4] for r in mine if r[3]]
            w.writerow([name, len(mine), len(steps), _num(len(steps) / len(mine)),
                        _num(np.mean(steps)) if steps else ""])
    else:
        rows = circles_sdf(args.runs, settings, args.smin)
        w.writerow(["sdf", "run", "accuracy", "miou"])
        for name, run, acc, mi in rows:
            w.writerow([name, run, _num(acc), _num(mi)])
        w.writerow([])
        w.writerow(["sdf", "runs", "mean_miou", "std_miou"])
        means = {}
        for name, _ in CIRCLE_SDFS:
            vals = np.array([r[3] for r in rows if r[0] == name])
            means[name] = vals.mean()
            w.writerow([name, len(vals), _num(vals.mean()), _num(vals.std())])
        diff = np.array([a[3] - b[3] for a, b in zip(
            [r for r in rows if r[0] == "f3"], [r for r in rows if r[0] == "f1"])])
        w.writerow(["f3-f1", len(diff), _num(diff.mean()), _num(diff.std())])
    _emit(out.getvalue(), args.out)
    return EXIT_OK


COMMANDS = {"encode": cmd_encode, "render": cmd_render, "eval": cmd_eval,
            "toygen": cmd_toygen, "gradcheck": cmd_gradcheck, "toyexp": cmd_toyexp}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"segforest {args.command}: error: {exc}", file=sys.stderr)
        if exc.code == EXIT_INPUT:
            parser.print_usage(sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal exit code
        log.exception("internal error")
        print(f"segforest {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
