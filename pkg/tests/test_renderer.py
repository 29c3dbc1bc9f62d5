import math

import numpy as np
import pytest

from segforest import engine, gradcheck
from segforest.data import IGNORE
from segforest.forest import ForestModel, ForestSpec, Node, TreeShape, bsp_tree, quad_tree
from segforest.grad_core import Tape
from segforest.renderer import (DEFAULT_PALETTE, Raster, RegionMap, RendererConfig,
                                evaluate_points,
                                model_region_maps, model_region_visualization,
                                purity_visualization, region_visualization, render_forest,
                                render_logits, render_region_map)
from segforest.sdf import SdfKind, sdf_value_grad
from test_forest import random_spec, random_tree

REFINED = RendererConfig()
LEGACY = RendererConfig(mode="legacy")


def tape_map(shape, params, raster, config=REFINED, presoftmax=False):
    t = Tape()
    xs = [t.variable(float(v)) for v in params]
    return render_region_map(shape, xs, raster, config, tape=t, presoftmax=presoftmax).values()


def quadrant(x, p):
    """Slot of point ``p`` for a quad node at ``x``, from the update equations' sign pattern."""
    return 2 * int(p[1] > x[1]) + int(p[0] < x[0])


# ---- examples


def test_single_leaf_is_certain():
    shape = TreeShape([Node("leaf")])
    R = render_region_map(shape, [], Raster(3, 2), tape=Tape()).values()
    assert R.shape == (1, 2, 3)
    assert np.all(R == 1.0)


def test_depth1_line_hand_example():
    shape = bsp_tree(SdfKind.LINE, 1)
    pre = tape_map(shape, (1, 0, 0), Raster(2, 1), presoftmax=True)
    np.testing.assert_array_equal(pre[:, 0, 0], [0.0, 0.5])
    np.testing.assert_array_equal(pre[:, 0, 1], [0.5, 0.0])
    lo = 1 / (1 + math.exp(0.5))
    R = tape_map(shape, (1, 0, 0), Raster(2, 1))
    np.testing.assert_allclose(R[:, 0, 0], [lo, 1 - lo], atol=1e-15)
    np.testing.assert_allclose(R[:, 0, 1], [1 - lo, lo], atol=1e-15)
    assert round(lo, 3) == 0.378


def test_quad_node_on_2x2_raster():
    pre = tape_map(quad_tree(1), (0, 0), Raster(2, 2), presoftmax=True)
    R = tape_map(quad_tree(1), (0, 0), Raster(2, 2))
    for n, p in enumerate(Raster(2, 2).points()):
        y, x = divmod(n, 2)
        assert np.count_nonzero(pre[:, y, x] > 0) == 1
        assert np.argmax(R[:, y, x]) == quadrant((0, 0), p)
    assert sorted(np.argmax(R, axis=0).ravel()) == [0, 1, 2, 3]


def test_render_logits_one_hot_selects_leaf():
    t = Tape()
    probs = [[[t.lift(1.0 if i == 1 else 0.0)]] for i in range(3)]
    v = [[t.lift(float(10 * i + c)) for c in range(2)] for i in range(3)]
    assert [z.value for z in render_logits(RegionMap(probs), v)[0][0]] == [10.0, 11.0]


def test_toy_blend_has_three_argmax_classes():
    t = Tape()
    v1, v2, v3 = 3.0, 2.0, 3.0
    leaves = [[t.lift(v1), t.lift(v2), t.lift(0.0)], [t.lift(0.0), t.lift(v2), t.lift(v3)]]
    classes = set()
    for alpha in np.linspace(0, 1, 101):
        rm = RegionMap([[[t.lift(alpha)]], [[t.lift(1 - alpha)]]])
        z = [v.value for v in render_logits(rm, leaves)[0][0]]
        np.testing.assert_allclose(z, [alpha * v1, v2, (1 - alpha) * v3], atol=1e-15)
        classes.add(int(np.argmax(z)))
    assert classes == {0, 1, 2}


def test_uniform_map_with_equal_leaves_gives_common_vector():
    t = Tape()
    rm = RegionMap([[[t.lift(0.25)]] for _ in range(4)])
    z = render_logits(rm, [[t.lift(0.3), t.lift(-1.7)] for _ in range(4)])
    np.testing.assert_allclose([v.value for v in z[0][0]], [0.3, -1.7], atol=1e-15)


def test_render_logits_dimension_checks():
    t = Tape()
    rm = RegionMap([[[t.lift(0.5)]], [[t.lift(0.5)]]])
    with pytest.raises(ValueError):
        render_logits(rm, [[t.lift(1.0)]])
    with pytest.raises(ValueError):
        render_logits(rm, [[t.lift(1.0)], [t.lift(1.0), t.lift(2.0)]])


def test_layout_mismatch_rejected():
    t = Tape()
    with pytest.raises(ValueError):
        render_region_map(bsp_tree(SdfKind.LINE, 1), [t.variable(1.0)], Raster(2, 2))


def test_render_forest_single_subset_matches_tape_composition():
    rng = np.random.default_rng(0)
    spec = ForestSpec.single(3, bsp_tree(SdfKind.CIRCLE, 2), block_size=4)
    model = ForestModel(spec, rng.normal(size=(1, 1, spec.layout.total)))
    mask, logits = render_forest(model)
    s = spec.layout.subsets[0]
    t = Tape()
    xs = [t.variable(float(v)) for v in model.params[0, 0]]
    rm = render_region_map(spec.shapes[0], xs[:s.inner_count], Raster(4, 4))
    leaf = [xs[s.logit_offset + 3 * i:s.logit_offset + 3 * i + 3] for i in range(4)]
    z = np.array([[[v.value for v in px] for px in row] for row in render_logits(rm, leaf)])
    np.testing.assert_allclose(logits, z, atol=1e-13)
    np.testing.assert_array_equal(mask, np.argmax(z, axis=2))


def test_two_constant_subsets():
    spec = ForestSpec.per_class(2, bsp_tree(SdfKind.LINE, 1))
    params = np.zeros((1, 1, spec.layout.total))
    for s, value in zip(spec.layout.subsets, (5.0, 1.0)):
        params[0, 0, s.logit_offset:s.logit_offset + s.logit_count] = value
    mask, _ = render_forest(ForestModel(spec, params))
    assert np.all(mask == 0)


def test_ties_go_to_lowest_class():
    spec = ForestSpec.single(3, bsp_tree(SdfKind.LINE, 1))
    mask, _ = render_forest(ForestModel.empty(spec, 2, 1))
    assert np.all(mask == 0)


def test_logits_agree_at_shared_sample_points():
    """Centers of an 8x8 raster are a subset of the centers of a 24x24 raster."""
    rng = np.random.default_rng(1)
    spec = ForestSpec.single(4, bsp_tree(SdfKind.ELLIPSE, 2))
    model = ForestModel(spec, rng.normal(size=(2, 3, spec.layout.total)))
    _, fine = render_forest(model, Raster(24, 24))
    _, native = render_forest(model, Raster(8, 8))
    np.testing.assert_array_equal(fine[1::3, 1::3], native)
    pts = Raster(8, 8).points()
    np.testing.assert_array_equal(evaluate_points(model, 2, 1, pts),
                                  native[8:16, 16:24].reshape(64, 4))


def test_region_visualization_one_hot_and_blend():
    onehot = np.zeros((4, 2, 2))
    for i in range(4):
        onehot[i].flat[i] = 1.0
    img = region_visualization(onehot)
    assert [tuple(img.reshape(4, 3)[i]) for i in range(4)] == list(DEFAULT_PALETTE)
    shape = bsp_tree(SdfKind.LINE, 1)
    blurred = tape_map(shape, (1, 0, 0), Raster(8, 1), RendererConfig(lam=0.1))
    img = region_visualization(blurred)[0]
    # both red and green contribute across the soft boundary
    assert np.all(img[:, 0] > 0) and np.all(img[:, 1] > 0)
    with pytest.raises(ValueError):
        region_visualization(np.ones((5, 1, 1)) / 5)


def test_purity_visualization_black_for_single_class_block():
    rng = np.random.default_rng(2)
    spec = ForestSpec.single(3)
    model = ForestModel(spec, rng.normal(size=(1, 1, spec.layout.total)))
    img = purity_visualization(model, np.full((8, 8), 2, np.uint8))
    assert img.shape == (8, 8, 3) and np.all(img == 0)
    mixed = np.zeros((8, 8), np.uint8)
    mixed[:, ::2] = 1
    assert purity_visualization(model, mixed).max() > 0


def test_model_region_visualization_shape():
    spec = ForestSpec.single(2)
    model = ForestModel.empty(spec, 3, 2)
    assert model_region_visualization(model, raster=Raster(4, 4)).shape == (8, 12, 3)
    assert model_region_maps(model).shape == (2, 3, 4, 8, 8)


# ---- properties


def random_params(rng, shape):
    return rng.uniform(-1, 1, shape.inner_parameter_count)


@pytest.mark.parametrize("config", [REFINED, LEGACY], ids=["refined", "legacy"])
def test_softmax_normalization_all_shapes(config):
    rng = np.random.default_rng(3)
    pts = Raster(5, 3).points()
    for _ in range(300):
        shape = random_tree(rng)
        R, _, _ = engine.region_forward(shape, rng.uniform(-1, 1, (2, shape.inner_parameter_count)),
                                        pts, config)
        assert np.all(np.abs(R.sum(axis=1) - 1.0) <= 1e-9)
        assert np.all((R > 0) & (R <= 1))


@pytest.mark.parametrize("config", [REFINED, LEGACY], ids=["refined", "legacy"])
def test_batched_region_map_matches_tape(config):
    rng = np.random.default_rng(4)
    raster = Raster(3, 2)
    for _ in range(40):
        shape = random_tree(rng, depth=2)
        params = random_params(rng, shape)
        R, A, _ = engine.region_forward(shape, params[None], raster.points(), config)
        ref = tape_map(shape, params, raster, config) if shape.inner_parameter_count else None
        if ref is not None:
            np.testing.assert_allclose(R[0], ref.reshape(shape.leaf_count, -1), atol=1e-14)
            pre = tape_map(shape, params, raster, config, presoftmax=True)
            np.testing.assert_allclose(A[0], pre.reshape(shape.leaf_count, -1), atol=1e-14)


@pytest.mark.parametrize("kind", list(SdfKind))
def test_depth1_presoftmax_exclusivity(kind):
    rng = np.random.default_rng(5)
    shape = bsp_tree(kind, 1)
    pts = rng.uniform(-1, 1, (50, 2))
    _, A, _ = engine.region_forward(shape, rng.uniform(-1, 1, (100, kind.parameter_count)),
                                    pts, REFINED)
    assert np.all(np.count_nonzero(A > 0, axis=1) <= 1)


def test_quad_exclusivity_brute_force():
    rng = np.random.default_rng(6)
    for size in (1, 2, 3, 4, 5):
        pts = Raster(size, size).points()
        x = rng.uniform(-1, 1, (200, 2))
        off_axes = np.all(np.abs(pts[None, :, :] - x[:, None, :]) > 0, axis=2)
        _, A, _ = engine.region_forward(quad_tree(1), x, pts, REFINED)
        positive = A > 0
        assert np.all(positive.sum(axis=1)[off_axes] == 1)
        for b in range(200):
            for n, p in enumerate(pts):
                if off_axes[b, n]:
                    assert positive[b, quadrant(x[b], p), n]


def test_confidence_grows_with_lambda():
    rng = np.random.default_rng(7)
    pts = Raster(4, 4).points()
    for _ in range(100):
        shape = random_tree(rng, depth=2)
        params = rng.uniform(-1, 1, (1, shape.inner_parameter_count))
        lams = (0.5, 1.0, 2.0, 4.0)
        maxes = [engine.region_forward(shape, params, pts, RendererConfig(lam=lam))[0]
                 .max(axis=1)[0] for lam in lams]
        _, A, _ = engine.region_forward(shape, params, pts, REFINED)
        spread = A[0].max(axis=0) > A[0].min(axis=0)
        for lo, hi in zip(maxes, maxes[1:]):
            assert np.all(hi[spread] > lo[spread])


def test_depth1_confidence_is_strict_wherever_f_is_nonzero():
    rng = np.random.default_rng(8)
    pts = rng.uniform(-1, 1, (200, 2))
    for kind in SdfKind:
        params = rng.uniform(-1, 1, (1, kind.parameter_count))
        shape = bsp_tree(kind, 1)
        a = engine.region_forward(shape, params, pts, RendererConfig(lam=1.0))[0].max(axis=1)
        b = engine.region_forward(shape, params, pts, RendererConfig(lam=1.5))[0].max(axis=1)
        f, _ = sdf_value_grad(kind, params, pts)
        assert np.all(b[f != 0] > a[f != 0])


def test_legacy_gate_in_open_unit_interval():
    rng = np.random.default_rng(9)
    pts = rng.uniform(-1, 1, (30, 2))
    for _ in range(200):
        shape = random_tree(rng, depth=2)
        params = rng.uniform(-3, 3, (1, shape.inner_parameter_count))
        _, _, cache = engine.region_forward(shape, params, pts, LEGACY)
        for (gates, _), _ in cache.nodes:
            assert np.all((gates > 0) & (gates < 1))
        _, A, _ = engine.region_forward(shape, params, pts, LEGACY)
        assert np.all((A > 0) & (A < 1))


def test_argmax_invariant_under_common_logit_shift():
    rng = np.random.default_rng(10)
    for _ in range(50):
        spec = random_spec(rng)
        model = ForestModel(spec, rng.normal(size=(2, 2, spec.layout.total)))
        shifted = model.params.copy()
        for s in spec.layout.subsets:
            shifted[..., s.logit_offset:s.logit_offset + s.logit_count] += 3.25
        a, _ = render_forest(model)
        b, _ = render_forest(ForestModel(spec, shifted))
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("mode", ["refined", "legacy"])
@pytest.mark.parametrize("kind", list(SdfKind))
def test_region_map_gradients(mode, kind):
    row = gradcheck._region_row("r", bsp_tree(kind, 1), RendererConfig(mode=mode), 200, seed=1)
    assert row.accepted > 0 and row.max_error < 1e-4


@pytest.mark.parametrize("mode", ["refined", "legacy"])
def test_quad_gradients(mode):
    row = gradcheck._region_row("q", quad_tree(1), RendererConfig(mode=mode), 200, seed=1, size=3)
    assert row.accepted > 0 and row.max_error < 1e-4


def test_renderer_config_validation():
    with pytest.raises(ValueError):
        RendererConfig(mode="blurry")
    with pytest.raises(ValueError):
        RendererConfig(lam=0)
    with pytest.raises(ValueError):
        RendererConfig(mode="legacy", lam2=-1)
    with pytest.raises(ValueError):
        Raster(0, 3)


def test_ignore_constant_is_shared():
    assert IGNORE == engine.IGNORE == 255
