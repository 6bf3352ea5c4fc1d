import numpy as np
import pytest
from sklearn.base import clone

from msflow.dataset import toy_shapes
from msflow.estimator import BalancedDownsampler, MultiScaleFlowMatching
from msflow.geometry import check_pair


def test_downsampler_transform(rng):
    X = rng.normal(size=(3, 16, 3))
    ds = BalancedDownsampler(ratio=4).fit(X)
    coarse = ds.transform(X)
    fine = ds.reorder(X)
    assert coarse.shape == (3, 4, 3)
    for c, f in zip(coarse, fine):
        check_pair(c, f, 4)
    assert ds.transform(X[0]).shape == (4, 3)
    assert ds.inverse_transform(coarse).shape == (3, 16, 3)
    assert ds.fit_transform(X).shape == (3, 4, 3)
    assert clone(ds).get_params() == ds.get_params()


def _small(**kw):
    params = dict(hidden=8, time_dim=4, epochs=2, batch_size=4, nfe=(2, 2), n_init=1)
    params.update(kw)
    return MultiScaleFlowMatching(**params)


def test_fit_sample_deterministic():
    X = toy_shapes("sphere", 64, 6, 0)
    a = _small(random_state=3).fit(X)
    b = _small(random_state=3).fit(X)
    assert a.losses_ == b.losses_ and len(a.losses_) == 2
    np.testing.assert_array_equal(a.sample(2), b.sample(2))
    assert a.sample(2).shape == (2, 64, 3)
    assert a.get_params()["hidden"] == 8


def test_fit_conditional():
    X = np.concatenate([toy_shapes("sphere", 64, 4, 0), toy_shapes("torus", 64, 4, 1)])
    y = ["s"] * 4 + ["t"] * 4
    est = _small().fit(X, y)
    assert list(est.classes_) == ["s", "t"]
    assert est.sample(1, y="t").shape == (1, 64, 3)
    with pytest.raises(ValueError):
        est.sample(1, y="q")


def test_estimator_validation():
    X = toy_shapes("sphere", 64, 2, 0)
    with pytest.raises(ValueError, match="PSD"):
        _small(intervals=((0.9, 1.0), (0.0, 0.5))).fit(X)
    with pytest.raises(ValueError, match="start at 0"):
        _small(intervals=((0.6, 1.0), (0.2, 1.0))).fit(X)
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        _small().sample(1)
