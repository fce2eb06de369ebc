import numpy as np
import pytest

from spurscope import autodiff as ad
from spurscope.gradcheck import finite_diff_gradcheck
from spurscope.models import ModelSpec, SpecError, TrainedModel, build_model, reference_spec


def test_spec_json_roundtrip_and_unknown_field():
    spec = reference_spec("cnn-small", (1, 28, 28), 2)
    again = ModelSpec.from_json(spec.to_json())
    assert again.to_json() == spec.to_json()
    bad = dict(spec.to_json(), dropout=0.5)
    with pytest.raises(SpecError):
        ModelSpec.from_json(bad)


@pytest.mark.parametrize("name,n", [("cnn-small", 8), ("mlp-2", 3), ("patchpool", 2)])
def test_reference_probe_counts(name, n):
    shape = (1, 30, 30) if name == "patchpool" else (1, 28, 28)
    spec = reference_spec(name, shape, 2)
    assert len(spec.probe_layers()) == n
    assert spec.probe_layers()[-1] == len(spec.layers)


def test_explicit_probes_must_end_at_final_layer():
    layers = [{"type": "flatten"}, {"type": "dense", "out": 4}, {"type": "relu"}, {"type": "dense", "out": 2}]
    assert ModelSpec(layers, (1, 4, 4), 2, probes=[2, 4]).probe_layers() == [2, 4]
    with pytest.raises(SpecError):
        ModelSpec(layers, (1, 4, 4), 2, probes=[2, 3]).probe_layers()
    with pytest.raises(SpecError):
        ModelSpec(layers, (1, 4, 4), 2, probes=[3, 2, 4]).probe_layers()


def test_dense_before_flatten_rejected():
    spec = ModelSpec([{"type": "dense", "out": 2}], (1, 4, 4), 2)
    with pytest.raises((SpecError, ad.ShapeError)):
        build_model(spec, 0)


def test_same_seed_same_weights():
    spec = reference_spec("cnn-small", (1, 28, 28), 2)
    a, b = build_model(spec, 3), build_model(spec, 3)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert all(not b.params[k].data.any() for k in b.params if k.endswith("bias"))


def test_forward_with_probes_shapes(small_cnn, rng):
    x = rng.random((3, 1, 28, 28)).astype(np.float32)
    logits, emb = small_cnn.forward_with_probes(x)
    assert logits.shape == (3, 2)
    assert sorted(emb) == list(range(1, 9))
    assert np.array_equal(emb[8].data, logits.data)


def test_wrong_input_shape(small_cnn):
    with pytest.raises(ad.ShapeError):
        small_cnn.forward(np.zeros((1, 1, 20, 20), dtype=np.float32))


def test_patchpool_permutation_invariance(rng):
    spec = reference_spec("patchpool", (1, 30, 30), 2)
    model = build_model(spec, 0)
    x = rng.random((2, 1, 30, 30)).astype(np.float32)
    y = x.copy()
    # swap the top-left and bottom-right 5x5 cells
    y[:, :, :5, :5], y[:, :, 25:, 25:] = x[:, :, 25:, 25:], x[:, :, :5, :5]
    assert np.abs(model.forward(x).data - model.forward(y).data).max() <= 1e-5


def test_gradcheck_linear_quadratic(rng):
    spec = ModelSpec([{"type": "flatten"}, {"type": "dense", "out": 2}], (1, 3, 3), 2)
    model = build_model(spec, 0)

    def quad(logits, _labels):
        return ad.sum_reduce(ad.mul(logits, logits))

    rep = finite_diff_gradcheck(model, (rng.random((4, 1, 3, 3)), np.zeros(4, int)), h=1e-5, loss=quad)
    assert rep and all(r["rel_error"] < 1e-8 for r in rep.values())


def test_gradcheck_two_conv_cnn(tiny_cnn_spec, rng):
    model = build_model(tiny_cnn_spec, 1)
    rep = finite_diff_gradcheck(model, (rng.random((3, 1, 8, 8)), np.array([0, 1, 1])), h=1e-5)
    assert set(rep) == set(model.params)
    assert all(r["passed"] and r["rel_error"] < 1e-5 for r in rep.values())


def test_gradcheck_zero_parameter_model(rng):
    spec = ModelSpec([{"type": "flatten"}], (1, 1, 2), 2)
    model = TrainedModel(spec, {})
    assert finite_diff_gradcheck(model, (rng.random((2, 1, 1, 2)), np.array([0, 1]))) == {}
