"""Prediction depth and usable information tell the same story.

PVI of a sample is log2 g'(y|x) - log2 g(y|0): how many more bits the
trained model assigns to the true label than a model that only sees blank
inputs. Its mean is the dataset's V-information. The shortcut dataset has
more usable information and shallower depth; inside the harder dataset,
deeper samples carry higher conditional entropy.

    python demos/02_usable_information.py
"""
from spurscope import datagen as dg
from spurscope.infometrics import pd_pvi_binned_correlation, pvi_dataset, train_null_model
from spurscope.models import build_model, reference_spec
from spurscope.probes import build_probe_set, pd_trace
from spurscope.training import TrainConfig, train

base = dg.gen_glyphs(2, 600, 28, seed=1, pair=(2, 8), jitter=4, rotation=20, noise=0.2)
patched = dg.inject_patch(base, dg.SpuriousSpec(size=5), 1.0, seed=1)
intervened = dg.intervene_randomize_spurious(patched, seed=1)
spec = reference_spec("cnn-small", (1, 28, 28), 2)

for tag, ds in (("patched", patched), ("intervened", intervened)):
    tr, te = dg.split(ds, (0.75, 0.25), seed=1)
    model = build_model(spec, 1)
    train(model, tr, TrainConfig(epochs=8, seed=1))
    rec = pvi_dataset(train_null_model(tr.labels, spec, seed=1), model, te)
    trace = pd_trace(build_probe_set(model, tr, m=300, seed=1), model, te)
    print(f"{tag:>10}: V-info {rec.v_information:.3f} bits  "
          f"H(Y) {rec.h_y:.3f}  H(Y|X) {rec.h_y_given_x:.3f}  clamped {rec.clamp_count}")
    corr = pd_pvi_binned_correlation(trace.pd, rec.neg_log2_gprime, bin_width=2, n_probes=trace.n_probes)
    for a, b, n, m in corr.bins:
        print(f"            pd {a}-{b}: {n:4d} samples, mean -log2 g'(y|x) = {m:.4f}")
    print(f"            spearman(bin, entropy) = {corr.spearman}")
