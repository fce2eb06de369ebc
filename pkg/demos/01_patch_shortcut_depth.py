"""A white patch that encodes the label makes every example look easy.

Two cnn-small models are trained: one on glyphs where a 5x5 patch sits at a
class-specific corner, one on the same glyphs after the patch location has
been re-drawn independently of the label. Prediction depth (the first probe
after which every k-NN probe agrees with the output) collapses to the first
layer for the shortcut model, and the soft-kNN Grad-CAM map at that probe
lights up the patch.

    python demos/01_patch_shortcut_depth.py
"""
import numpy as np

from spurscope import datagen as dg
from spurscope import saliency as sal
from spurscope.models import build_model, reference_spec
from spurscope.probes import build_probe_set, early_peak_detector, pd_histogram
from spurscope.training import TrainConfig, evaluate, train

base = dg.gen_glyphs(2, 1000, 28, seed=0, pair=(2, 8), jitter=4, rotation=20, noise=0.2)
patched = dg.inject_patch(base, dg.SpuriousSpec(size=5), 1.0, seed=0)
intervened = dg.intervene_randomize_spurious(patched, seed=0)

models, hists = {}, {}
for tag, ds in (("patched", patched), ("intervened", intervened)):
    tr, te = dg.split(ds, (0.75, 0.25), seed=0)
    model = build_model(reference_spec("cnn-small", (1, 28, 28), 2), 0)
    train(model, tr, TrainConfig(epochs=5, seed=0))
    ps = build_probe_set(model, tr, m=400, k=29, delta=0.1, seed=0)
    hists[tag] = pd_histogram(model, ps, te)
    models[tag] = (model, ps, te)
    print(f"{tag:>10}: test acc {evaluate(model, te)['accuracy']:.3f}  "
          f"pd counts {hists[tag].counts.tolist()}  undefined {hists[tag].undefined}  "
          f"mean pd {hists[tag].mean_pd:.2f}")

# the intervened run is the reference difficulty for the detector
mu = hists["intervened"].mean_pd
print("patched   :", early_peak_detector(hists["patched"], mu_ref=mu).label)
print("intervened:", early_peak_detector(hists["intervened"]).label)

# where does probe 1 look? ratio of mean saliency inside vs outside the patch
model, ps, te = models["patched"]
head = sal.SoftKnnHead.from_probe_set(ps, 1)
locs = dg.default_locations(2, 5, 28, 28)
ratios = []
for i in range(20):
    top, left = locs[int(te.spurious[i])]
    ratios.append(sal.patch_saliency_ratio(sal.soft_knn_saliency(model, head, te.images[i]), top, left, 5))
print(f"probe-1 saliency in/out of patch, median over 20 images: {np.nanmedian(ratios):.2f}")
