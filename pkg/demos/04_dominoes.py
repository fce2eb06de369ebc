"""Dominoes: an easy top half steals the model from the bottom half.

Each image stacks a top glyph (spurious, perfectly correlated) over a bottom
glyph (core, defines the label). Zeroing the top half at test time measures
how much the model relied on the core. A patched top is trivially easy and
the model ignores the core; a small, noisy top is harder than the core and
the model learns the core instead.

    python demos/04_dominoes.py
"""
from spurscope import datagen as dg
from spurscope.models import build_model, reference_spec
from spurscope.saliency import core_only_accuracy
from spurscope.training import TrainConfig, train

n, seed = 600, 1
bottom = dg.gen_glyphs(2, n, 32, seed=seed + 100, pair=(2, 8), jitter=3, rotation=10, noise=0.1)
hard_kw = dict(pair=(2, 8), jitter=8, rotation=30, noise=0.3, extent=0.14)
hard = dg.gen_glyphs(2, n, 32, seed=seed + 200, **hard_kw)
easy = dg.inject_patch(dg.gen_glyphs(2, n, 32, seed=seed + 300, **hard_kw), dg.SpuriousSpec(size=5), 1.0, seed=seed)

for tag, top in (("easy top", easy), ("hard top", hard)):
    dom = dg.compose_dominoes(top, bottom, seed=seed)
    tr, te = dg.split(dom, (0.75, 0.25), seed=seed)
    model = build_model(reference_spec("cnn-small", dom.images.shape[1:], 2), seed)
    train(model, tr, TrainConfig(epochs=10, optimizer="sgd", lr=0.05, seed=seed))
    val, core = core_only_accuracy(model, te)
    print(f"{tag}: {dom.images.shape[2]}x{dom.images.shape[3]} images, "
          f"validation {val:.3f}, core-only {core:.3f}")
