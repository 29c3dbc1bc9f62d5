# %% [markdown]
# # What the auxiliary loss terms do
#
# Besides cross entropy the loss has a purity term (Gini impurity of the
# classes inside each region), a minimum region size term, and a sharpness
# term (entropy of each pixel's region distribution). Here we fit the same
# blocks with and without them and compare.

# %%
import numpy as np

from segforest import data, fitter, metrics
from segforest.forest import ForestSpec
from segforest.losses import CE_ONLY, DEFAULT_MU, LossWeights

pool = [b for m in data.polygon_suite(4, size=64)
        for b in data.to_blocks(m, 8).reshape(-1, 8, 8) if len(np.unique(b)) >= 2]
blocks = np.concatenate(pool[:12], axis=1)
spec = ForestSpec.single(6)

# %%
for name, mu in (("cross entropy only", CE_ONLY), ("full loss", DEFAULT_MU)):
    model, fit = fitter.fit_image(blocks, spec, LossWeights(mu=mu),
                                  fitter.FitConfig(early_stop=False))
    _, gini = metrics.purity_report(model, blocks)
    stats = [st for _, _, st in fit.blocks]
    print(f"{name:>18}: accuracy {fit.accuracy:.4f}  region Gini {gini:.4f}  "
          f"sharpness {np.mean([s.sharpness for s in stats]):.4f}  "
          f"size {np.mean([s.size for s in stats]):.3f}")

# %% [markdown]
# The purity term makes each leaf region cover a single class. The size term
# asks all four leaves to own at least s_min pixels worth of probability, even
# in blocks that only need two regions. The cheapest way to satisfy it is to
# keep unused regions spread thinly, which costs sharpness.
