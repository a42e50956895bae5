import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import cross_val_score

from throttlenet.data import synth_dataset
from throttlenet.estimator import ThrottleableClassifier


@pytest.fixture(scope="module")
def blobs():
    ds = synth_dataset("blobs", 160, seed=0, n_classes=3, shape=(1, 4, 4))
    names = np.array(["cat", "dog", "eel"])
    return ds.images.reshape(160, -1), names[ds.labels]


def _clf(**kw):
    params = dict(n_components=4, widths=(8, 8), epochs=15, batch_size=16)
    params.update(kw)
    return ThrottleableClassifier(**params)


def test_fit_predict_with_string_labels(blobs):
    X, y = blobs
    clf = _clf(epochs=40).fit(X, y)
    assert set(clf.predict(X)) <= set(y)
    assert clf.score(X, y) >= 0.9
    proba = clf.predict_proba(X[:5])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)


def test_u_changes_compute_after_fit(blobs):
    X, y = blobs
    clf = _clf().fit(X, y)
    assert clf.utilization() == 1.0
    clf.set_params(u=0.25)
    assert clf.utilization() == 0.25
    assert clf.predict(X).shape == (len(X),)


def test_image_inputs_accepted(blobs):
    X, y = blobs
    clf = ThrottleableClassifier(arch="t-resnext-w", n_components=2, widths=(4,), blocks=(1,), group_width=2,
                                 epochs=1, batch_size=32)
    clf.fit(X.reshape(-1, 1, 4, 4), y)
    assert clf.decision_function(X.reshape(-1, 4, 4)).shape == (len(X), 3)


def test_sweep_and_evaluate(blobs):
    X, y = blobs
    clf = _clf(epochs=3).fit(X, y)
    recs = clf.sweep(X, y)
    assert len(recs) == 17 and recs[-1].utilization == 1.0
    assert clf.evaluate(X, y, u=0.5).u_target == 0.5


def test_learned_strategy_needs_controller(blobs):
    X, y = blobs
    clf = _clf(epochs=2, strategy="learned").fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(X)
    clf.set_params(controller_epochs=2).fit_controller(X, y)
    assert 0.0 < clf.utilization() <= 1.0


def test_independent_is_not_a_predict_strategy(blobs):
    X, y = blobs
    clf = _clf(epochs=1, strategy="independent").fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(X)


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        _clf().predict(np.zeros((2, 16)))


def test_clone_and_cross_validation(blobs):
    X, y = blobs
    est = _clf(epochs=5)
    assert clone(est).get_params() == est.get_params()
    scores = cross_val_score(est, X, y, cv=2)
    assert scores.shape == (2,) and np.all(scores > 0.5)


def test_fit_is_deterministic(blobs):
    X, y = blobs
    a, b = _clf(epochs=2).fit(X, y), _clf(epochs=2).fit(X, y)
    np.testing.assert_array_equal(a.decision_function(X), b.decision_function(X))
