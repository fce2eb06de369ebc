"""Whether a spurious feature hurts depends on the model.

The patch here carries only its position (both classes get the same patch
content). An MLP sees absolute pixel positions and latches onto it, so
randomising the position makes the task harder: harmful. The patch-pool
model sums per-patch features, cannot tell where anything is, and never
uses the cue: benign.

    python demos/03_harmful_or_benign.py
"""
import numpy as np

from spurscope import datagen as dg
from spurscope.saliency import harmfulness_verdict
from spurscope.training import TrainConfig

base = dg.gen_glyphs(2, 500, 30, seed=0, pair=(2, 8), jitter=2, rotation=30, noise=0.0, extent=0.22)
ds = dg.inject_patch(base, dg.SpuriousSpec(size=5, content_shared=True), 1.0, seed=0)

for family in ("mlp-2", "patchpool"):
    v = harmfulness_verdict(family, ds, "accuracy", seeds=(0, 1, 2), cfg=TrainConfig(epochs=5))
    obs, intv = np.round(v.psi_observational, 3).tolist(), np.round(v.psi_interventional, 3).tolist()
    print(f"{family:>9}: {v.verdict:7s}  error observational {obs}  after do(s) {intv}")
