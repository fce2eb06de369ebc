import math

import numpy as np
import pytest

from spurscope import datagen as dg
from spurscope import infometrics as im
from spurscope.models import build_model, reference_spec
from spurscope.probes import UNDEFINED
from spurscope.training import TrainConfig, train

SPEC = reference_spec("mlp-2", (1, 6, 6), 2)


@pytest.mark.parametrize("labels,expected", [
    ([0] * 50 + [1] * 50, 1.0),
    ([1] * 100, 0.0),
    ([0] * 90 + [1] * 10, -(0.9 * math.log2(0.9) + 0.1 * math.log2(0.1))),
])
def test_null_model_entropy(labels, expected):
    g = train_null = im.train_null_model(labels, SPEC, seed=0)
    h, terms, _ = im.marginal_entropy(train_null, labels)
    assert h == pytest.approx(expected, abs=0.01)
    assert g.meta["null_model"]


def test_pvi_mean_identity_and_pointwise():
    ds = dg.gen_glyphs(2, 30, 6, seed=1, jitter=0.5)
    gprime = build_model(SPEC, 0)
    train(gprime, ds, TrainConfig(epochs=3, batch=16))
    g = im.train_null_model(ds.labels, SPEC, seed=0)
    rec = im.pvi_dataset(g, gprime, ds)
    assert abs(rec.pvi.mean() - (rec.h_y - rec.h_y_given_x)) < 1e-9
    assert rec.pvi[3] == pytest.approx(im.pvi(g, gprime, ds.images[3], ds.labels[3]), abs=1e-5)
    second = im.pvi_second_term(gprime, ds.images[3], ds.labels[3])
    assert second == pytest.approx(-rec.neg_log2_gprime[3], abs=1e-5)


def test_clamping_is_counted():
    lp, clamps = im.log2_likelihood(np.array([[0.0, 100.0], [0.0, 0.0]]), [0, 0])
    assert clamps == 1 and lp[0] == im.LOG2_PMIN


def test_binned_correlation_monotone_and_skips():
    pd = np.array([1, 1, 2, 5, 6, 7, 8, UNDEFINED, UNDEFINED])
    ent = pd.astype(float)
    corr = im.pd_pvi_binned_correlation(pd, ent, bin_width=2, n_probes=8)
    assert corr.spearman == pytest.approx(1.0)
    assert corr.undefined_excluded == 2
    assert corr.skipped == [(3, 4)]
    with pytest.raises(ValueError):
        im.pd_pvi_binned_correlation(pd, ent[:-1])


def test_worked_separation_bound():
    # 121 layers, psi = 0.5, rarest class prevalence 1/1000: 16 < 121 - 3.45
    bound = im.assumption4_bound(121, 0.5, [0.001, 0.999])
    assert bound == pytest.approx(121 - 3.45, abs=0.01)
    assert 16 < bound
    assert f"{121 - bound:.2f}" == "3.45"


def _metrics(pd, vinfo):
    return im.DatasetMetrics(np.asarray(pd), vinfo, vinfo - 1.0)


def test_prop1_holds_and_gap_insufficient():
    s = _metrics([1] * 9 + [2], 0.9)
    i = _metrics([5] * 8 + [UNDEFINED] * 2, 0.4)
    rep = im.prop1_gap_check(s, i, psi=0.25, L=2, K=2, n_probes=8, marginals=[0.5, 0.5])
    assert rep.separation_satisfied and rep.assumption4_satisfied
    assert rep.verdict == "holds"
    same = im.prop1_gap_check(s, s, psi=0.25, L=2, K=2, n_probes=8, marginals=[0.5, 0.5])
    assert same.verdict == "gap insufficient"
    with pytest.raises(ValueError):
        im.prop1_gap_check(s, i, 0.2, 1, 1, 2, [0.5, 0.5])


def test_min_separation_psi():
    psi, depth = im.min_separation_psi([1, 1, 1, 2], [4, 4, 3, UNDEFINED], 5)
    assert depth in (1, 2) and psi == pytest.approx(0.25)
