import numpy as np
import pytest

from spurscope import autodiff as ad
from spurscope import datagen as dg
from spurscope import saliency as sal
from spurscope.gradcheck import numeric_grad, rel_error
from spurscope.models import ModelSpec, build_model, reference_spec
from spurscope.probes import build_probe_set
from spurscope.training import TrainConfig, train


def test_soft_knn_trivial_cases():
    bank = np.arange(12, dtype=float).reshape(6, 2)
    assert sal.soft_knn_score(sal.SoftKnnHead(1, bank, np.ones(6, int), k=3), np.zeros(2)).item() == 1.0
    assert sal.soft_knn_score(sal.SoftKnnHead(1, bank, np.zeros(6, int), k=3), np.zeros(2)).item() == 0.0
    eq = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    head = sal.SoftKnnHead(1, eq, np.array([0, 1, 0, 1]), k=4)
    assert sal.soft_knn_score(head, np.zeros(2)).item() == pytest.approx(0.5)


def test_soft_knn_gradient_matches_finite_differences(rng):
    bank = rng.normal(size=(80, 6))
    head = sal.SoftKnnHead(1, bank, rng.integers(0, 2, 80), k=29)
    q = rng.normal(size=(2, 6))
    x = ad.Tensor(q.copy(), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_reduce(sal.soft_knn_score(head, x))
    tape.backward(loss)
    num = numeric_grad(lambda: float(sal.soft_knn_score(head, q).data.sum()), q, 1e-6)
    assert rel_error(x.grad, num) < 1e-5


def test_scale_floor_flagged():
    head = sal.SoftKnnHead(1, np.zeros((5, 2)), np.array([0, 1, 0, 1, 1]), k=3)
    assert 0.0 <= sal.soft_knn_score(head, np.zeros(2)).item() <= 1.0
    assert head.floored == 1


def test_head_needs_binary_labels():
    with pytest.raises(ValueError):
        sal.SoftKnnHead(1, np.zeros((3, 2)), np.array([0, 1, 2]))


def test_normalize_map_properties(rng):
    m = rng.random((5, 5))
    n = sal.normalize_map(m)
    assert n.min() >= 0 and n.max() == 1.0
    assert np.abs(sal.normalize_map(37.5 * m) - n).max() < 1e-6
    assert not sal.normalize_map(np.zeros((3, 3))).any()


def _trained(patched_glyphs):
    model = build_model(reference_spec("cnn-small", (1, 28, 28), 2), 0)
    train(model, patched_glyphs, TrainConfig(epochs=1, batch=32))
    return model, build_probe_set(model, patched_glyphs, m=100, seed=0)


def test_saliency_maps_and_export(tmp_path, patched_glyphs):
    model, ps = _trained(patched_glyphs)
    head = sal.SoftKnnHead.from_probe_set(ps, 1)
    for method in ("gradcam-softknn", "input-grad"):
        m = sal.soft_knn_saliency(model, head, patched_glyphs.images[0], method)
        assert m.values.shape == (28, 28)
        assert m.values.min() >= 0 and m.values.max() <= 1
    tpath, cpath = m.save(tmp_path / "s")
    lines = cpath.read_text().splitlines()
    assert lines[0] == "row,col,value" and len(lines) == 1 + 28 * 28
    with pytest.raises(ValueError, match="input-grad"):
        sal.soft_knn_saliency(model, sal.SoftKnnHead.from_probe_set(ps, 7), patched_glyphs.images[0])


def test_zero_activations_give_zero_map():
    spec = ModelSpec([{"type": "conv", "out": 2, "k": 3, "pad": 1}, {"type": "relu"},
                      {"type": "flatten"}, {"type": "dense", "out": 2}], (1, 6, 6), 2)
    model = build_model(spec, 0)
    for p in model.params.values():
        p.data[...] = 0
    bank = np.random.default_rng(0).random((10, 72))
    head = sal.SoftKnnHead(1, bank, np.array([0, 1] * 5), k=5)
    m = sal.soft_knn_saliency(model, head, np.ones((1, 6, 6)))
    assert not m.values.any()


def test_ensemble_entropy_bounds():
    ds = dg.gen_glyphs(2, 30, 8, seed=0)
    per, mean = sal.ensemble_entropy(ds, count=2, family="linear", seed=0, cfg=TrainConfig(epochs=1))
    assert per.shape == (60,) and np.all(per >= 0) and np.all(per <= np.log(2) + 1e-12)
    assert mean == pytest.approx(per.mean())
    with pytest.raises(ValueError):
        sal.ensemble_entropy(ds, count=1)


def test_entropy_shrinks_on_separable_data():
    ds = dg.gen_glyphs(2, 40, 8, seed=0, noise=0.0)
    ds = dg.inject_patch(ds, dg.SpuriousSpec(size=3), 1.0)
    _, short = sal.ensemble_entropy(ds, 2, "linear", 0, TrainConfig(epochs=1, lr=0.01))
    _, long = sal.ensemble_entropy(ds, 2, "linear", 0, TrainConfig(epochs=30, lr=0.01))
    assert long < short and long < 0.05


def test_core_only_on_premasked_dominoes():
    top = dg.gen_glyphs(2, 60, 16, seed=1)
    bottom = dg.gen_glyphs(2, 60, 16, seed=2, noise=0.05)
    dom = dg.mask_core_only(dg.compose_dominoes(top, bottom))
    tr, te = dg.split(dom, (0.75, 0.25))
    model = build_model(reference_spec("mlp-2", (1, 32, 16), 2), 0)
    train(model, tr, TrainConfig(epochs=3, batch=16))
    val, core = sal.core_only_accuracy(model, te)
    assert abs(val - core) < 0.02


def test_verdict_rules():
    v = sal.Verdict("accuracy", [0.0, 0.1], [0.2, 0.3], [0, 1])
    assert v.verdict == "harmful"
    assert sal.Verdict("accuracy", [0.0, 0.25], [0.2, 0.3], [0, 1]).verdict == "benign"
    assert set(v.to_json()) >= {"metric", "psi_observational", "psi_interventional", "seeds", "verdict"}


def test_noise_attribute_is_benign():
    base = dg.gen_glyphs(2, 60, 10, seed=0, noise=0.0, jitter=1)
    ds = dg.inject_patch(base, dg.SpuriousSpec(size=2, content_shared=True), 0.5, seed=0)
    v = sal.harmfulness_verdict("mlp-2", ds, "accuracy", (0, 1, 2), TrainConfig(epochs=2, batch=16))
    assert v.verdict == "benign"


def test_mean_pd_metric_needs_probes():
    base = dg.gen_glyphs(2, 10, 10, seed=0)
    ds = dg.inject_patch(base, dg.SpuriousSpec(size=5), 1.0)
    with pytest.raises(ValueError, match="probes"):
        sal.harmfulness_verdict("patchpool", ds, "mean-pd")
    with pytest.raises(ValueError):
        sal.harmfulness_verdict("mlp-2", ds, "loss")
