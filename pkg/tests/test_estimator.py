import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from minktrack.estimator import MinkowskiTracker
from minktrack.nn import ConfigurationError

SMALL = dict(stage_channels=(8, 8, 8), c_out=8, steps=5)


def test_params_round_trip():
    est = MinkowskiTracker(lambda_d=0.3, steps=7)
    p = est.get_params()
    assert p["lambda_d"] == 0.3 and p["steps"] == 7
    est.set_params(lambda_s=0.4)
    assert clone(est).get_params()["lambda_s"] == 0.4


def test_fit_predict_score(tiny_ds):
    est = MinkowskiTracker(**SMALL).fit(tiny_ds)
    assert est.class_names_ == tiny_ds.class_names
    assert len(est.history_) == 5
    tracks = est.predict(tiny_ds)
    assert all(0 <= r.confidence <= 1 for r in tracks)
    s = est.score(tiny_ds)
    assert 0.0 <= s <= 1.0


def test_fit_is_deterministic(tiny_ds):
    a = MinkowskiTracker(**SMALL).fit(tiny_ds)
    b = MinkowskiTracker(**SMALL).fit(tiny_ds)
    assert [r.to_record() for r in a.predict(tiny_ds)] == [r.to_record() for r in b.predict(tiny_ds)]


def test_errors(tiny_ds):
    with pytest.raises(NotFittedError):
        MinkowskiTracker().predict(tiny_ds)
    with pytest.raises(TypeError):
        MinkowskiTracker(**SMALL).fit([[0.0, 1.0]])
    with pytest.raises(ConfigurationError):
        MinkowskiTracker(lr=-1.0, **{k: v for k, v in SMALL.items()}).fit(tiny_ds)
    est = MinkowskiTracker(**SMALL).fit(tiny_ds)
    with pytest.raises(ConfigurationError):
        est.set_params(lambda_d=1.5).predict(tiny_ds)
