import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError as SklearnNotFitted

from pemma import (CTSegmenter, EarlyFusionSegmenter, LateFusionSegmenter, PEMMAAdapter, PrognosisEstimator)
from pemma.exceptions import DataError, ModalityError, NotFittedError, ShapeError
from pemma.validation import check_labels, check_survival_y, check_volumes

GEOM = dict(side=32, patch=8, dim=16, heads=2, depth=2)


@pytest.fixture(scope="module")
def data(tiny_manifest):
    cases = tiny_manifest.cases("adapt_train")
    X = np.stack([np.stack([c.ct.grid, c.pet.grid], -1) for c in cases])
    y = np.stack([c.mask for c in cases]).astype(np.int64)
    return X, y


@pytest.fixture(scope="module")
def base(data):
    X, y = data
    return CTSegmenter(steps=3, **GEOM).fit(X[..., 0], y)


def test_get_params_and_clone(base):
    params = base.get_params()
    assert params["dim"] == 16 and params["steps"] == 3
    fresh = clone(base)
    assert not hasattr(fresh, "model_")
    ad = PEMMAAdapter(base=base, rank=2)
    assert "base__dim" in ad.get_params(deep=True)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        CTSegmenter().predict(np.zeros((1, 32, 32, 32)))
    with pytest.raises(SklearnNotFitted):
        PrognosisEstimator().predict(np.zeros((2, 3)))


def test_ct_segmenter_predict_and_features(base, data):
    X, y = data
    pred = base.predict(X[:2, ..., 0])
    assert pred.shape == (2, 32, 32, 32) and set(np.unique(pred)) <= {0, 1, 2}
    assert 0.0 <= base.score(X[:2, ..., 0], y[:2]) <= 1.0
    assert base.transform(X[:2, ..., 0]).shape == (2, 16)
    with pytest.raises(ModalityError):
        base.predict_proba(X[:1], mode="pet")


def test_pemma_adapter_leaves_base_untouched(base, data):
    X, y = data
    before = {k: v.copy() for k, v in base.model_.state_dict().items()}
    ad = PEMMAAdapter(base=base, rank=2, steps=3).fit(X, y)
    for k, v in base.model_.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    assert ad.param_report_["ratio"] < 1.0
    for mode in ("ct", "pet", "ctpet"):
        assert ad.predict(X[:1], mode=mode).shape == (1, 32, 32, 32)
    assert ad.transform(X[:2]).shape == (2, 16)


def test_fusion_estimators(base, data):
    X, y = data
    early = EarlyFusionSegmenter(base=base, steps=2).fit(X, y)
    assert early.param_report_["ratio"] == 1.0
    late = LateFusionSegmenter(base=base, steps=2, w_ct=1.0).fit(X, y)
    np.testing.assert_array_equal(late.predict_proba(X[:1], "ctpet"), base.predict_proba(X[:1, ..., 0]))
    assert late.param_report_["total_vs_base"] == 2.0


def test_input_validation(base):
    with pytest.raises(ShapeError):
        check_volumes(np.zeros((1, 4, 4, 5)))
    with pytest.raises(DataError):
        check_volumes(np.full((1, 4, 4, 4), np.nan))
    with pytest.raises(ShapeError):
        base.predict(np.zeros((1, 16, 16, 16)))
    with pytest.raises(DataError):
        check_labels(np.full((1, 2, 2, 2), 3), (1, 2, 2, 2))
    with pytest.raises(ShapeError):
        PEMMAAdapter(base=base).fit(np.zeros((1, 32, 32, 32)), np.zeros((1, 32, 32, 32), int))


def test_survival_targets():
    t, e = check_survival_y([[1.0, 1], [2.0, 0]])
    assert t.tolist() == [1.0, 2.0] and e.tolist() == [True, False]
    rec = np.array([(True, 3.0)], dtype=[("event", bool), ("time", float)])
    assert check_survival_y(rec)[0].tolist() == [3.0]
    with pytest.raises(DataError):
        check_survival_y([[1.0, 2]])


def test_prognosis_estimator():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(160, 4))
    t = rng.exponential(1.0, 160) / np.exp(1.5 * X[:, 1])
    y = np.column_stack([t, rng.random(160) < 0.7])
    est = PrognosisEstimator(hidden=8, n_bins=8, steps=150, lr=1e-2).fit(X[:100], y[:100])
    pmf = est.predict_proba(X[100:])
    np.testing.assert_allclose(pmf.sum(1), 1.0, atol=1e-6)
    assert est.predict_survival(X[100:]).shape == (60, 8)
    assert est.score(X[100:], y[100:]) > 0.6
    with pytest.raises(ShapeError):
        est.predict(X[:, :3])
