# %% [markdown]
# # Region maps from a hand-built tree
#
# A block owns one tree. Inner nodes split the block with a signed distance
# function; leaves hold class logits. Rendering turns the tree into a soft
# region map R (one probability per leaf and pixel) and blends leaf logits
# with it.

# %%
import numpy as np

from segforest import engine
from segforest.forest import ForestModel, ForestSpec, bsp_tree, kd_tree
from segforest.renderer import RendererConfig, render_forest
from segforest.sdf import SdfKind

GLYPHS = ".#ox"


def show(mask):
    for row in mask:
        print("".join(GLYPHS[v] if v < len(GLYPHS) else "?" for v in row))


# %% [markdown]
# A depth-1 circle tree: the inside of the circle is leaf 0, the outside leaf 1.
# Coordinates are block-normalized to [-1, 1].

# %%
shape = bsp_tree(SdfKind.CIRCLE, 1)
circle = np.array([[0.2, -0.1, 0.6]])  # center x, center y, radius
pts = engine.pixel_centers(16, 16)
R, _, _ = engine.region_forward(shape, circle, pts, RendererConfig())
print("leaf-0 probability along the middle row:")
print(np.round(R[0, 0].reshape(16, 16)[8], 2))

# %% [markdown]
# The region map is soft: with lambda = 1 the probabilities only saturate far
# from the boundary. Larger lambda sharpens it.

# %%
for lam in (1.0, 4.0, 16.0):
    R, _, _ = engine.region_forward(shape, circle, pts, RendererConfig(lam=lam))
    print(f"lambda {lam:>4}: mean max-probability {R[0].max(axis=0).mean():.3f}")

# %% [markdown]
# A whole model: a 2x2 grid of 8x8 blocks, each with a depth-2 k-d tree whose
# leaves vote for fixed classes. The argmax mask is what the codec decodes.

# %%
spec = ForestSpec.single(4, kd_tree(2))
rng = np.random.default_rng(0)
params = np.zeros((2, 2, spec.layout.total))
for by in range(2):
    for bx in range(2):
        thresholds = rng.uniform(-0.6, 0.6, 3)
        logits = np.eye(4)[rng.permutation(4)] * 5.0
        params[by, bx] = np.concatenate([thresholds, logits.ravel()])
model = ForestModel(spec, params)
mask, _ = render_forest(model)
show(mask)

# %% [markdown]
# In the default renderer every inner node adds its activation to all leaves
# below it, so near junctions the soft regions overlap and boundaries bend.
# The legacy renderer with a steep sigmoid and a large output scale behaves
# like a hard partition and shows the axis-aligned cells directly.

# %%
hard, _ = render_forest(model, config=RendererConfig(mode="legacy", lam1=1000.0, lam2=10.0))
show(hard)
