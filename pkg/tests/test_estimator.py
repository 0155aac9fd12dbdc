import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from nfsm import workflow
from nfsm.estimator import NFSMPhaseRecognizer


@pytest.fixture(scope="module")
def data():
    spec = workflow.synth7(feat_dim=4)
    videos = [workflow.sample_video(spec, s, max_frames=40) for s in range(4)]
    names = np.array(list("abcdefg"))
    return [v.features for v in videos], [names[v.labels] for v in videos]


def small(**kw):
    params = dict(n=3, m=2, d=4, epochs_stage1=1, epochs_stage2=1, batch_size=32)
    params.update(kw)
    return NFSMPhaseRecognizer(**params)


def test_params_round_trip():
    est = small(alpha=0.5)
    assert est.get_params()["alpha"] == 0.5
    assert clone(est).get_params() == est.get_params()
    assert est.set_params(source="B").source == "B"


def test_fit_predict(data):
    X, y = data
    est = small().fit(X, y)
    assert set(est.classes_) <= set("abcdefg")
    assert est.n_features_in_ == 4
    pred = est.predict(X[:2])
    assert [len(p) for p in pred] == [len(x) for x in X[:2]]
    assert set(np.concatenate(pred)) <= set(est.classes_)
    proba = est.predict_proba(X[:1])[0]
    assert proba.shape == (len(X[0]), len(est.classes_))
    np.testing.assert_allclose(proba.sum(1), 1.0, atol=1e-9)
    assert 0.0 <= est.score(X, y) <= 1.0


def test_deterministic(data):
    X, y = data
    a = small().fit(X, y).predict_proba(X[:1])[0]
    b = small().fit(X, y).predict_proba(X[:1])[0]
    assert a.tobytes() == b.tobytes()


def test_sources_and_modes(data):
    X, y = data
    est = small().fit(X, y)
    for source in ("A", "B", "C"):
        for mode in ("online", "offline"):
            est.set_params(source=source, mode=mode)
            assert len(est.predict(X[:1])[0]) == len(X[0])


def test_validation(data):
    X, y = data
    with pytest.raises(NotFittedError):
        small().predict(X)
    with pytest.raises(ValueError, match="label sequences"):
        small().fit(X, y[:-1])
    with pytest.raises(ValueError, match="labels"):
        small().fit(X[:1], [y[0][:-1]])
    with pytest.raises(ValueError, match="sequence of"):
        small().fit(X[0], y[0])
    with pytest.raises(ValueError):
        small().fit([np.full((5, 4), np.nan)], [np.arange(5) % 2])
    with pytest.raises(ValueError, match="source"):
        small(source="Q").fit(X, y)
    est = small().fit(X, y)
    with pytest.raises(ValueError, match="features"):
        est.predict([np.zeros((3, 5))])
