import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from bsprune import BasisPruningClassifier
from bsprune.data import synth_dataset
from bsprune.errors import ConfigError, ShapeError


@pytest.fixture(scope="module")
def fitted():
    ds = synth_dataset(240, seed=0)
    X = ds.images[..., 0]  # grayscale (n, h, w)
    y = np.where(ds.labels == 1, "cat", "dog")
    clf = BasisPruningClassifier(epochs=6, retrain_epochs=1, basis_fraction=0.5)
    return clf.fit(X, y), X, y


def test_params_round_trip_and_clone():
    clf = BasisPruningClassifier(epochs=2, channel_fraction=0.2)
    params = clf.get_params()
    assert params["epochs"] == 2 and params["channel_fraction"] == 0.2
    other = clone(clf)
    assert other.get_params() == params and other is not clf
    clf.set_params(basis_fraction=0.1)
    assert clf.basis_fraction == 0.1


def test_fit_predict(fitted):
    clf, X, y = fitted
    assert list(clf.classes_) == ["cat", "dog"]
    assert set(clf.predict(X[:10])) <= {"cat", "dog"}
    proba = clf.predict_proba(X[:10])
    assert proba.shape == (10, 2) and np.allclose(proba.sum(axis=1), 1)
    assert clf.score(X, y) > 0.8
    assert [r["stage"] for r in clf.report_] == ["baseline", "trained", "basis_pruned_1"]
    assert clf.report_[-1]["param_pr"] > 0


def test_unfitted_and_bad_inputs(fitted):
    with pytest.raises(NotFittedError):
        BasisPruningClassifier().predict(np.zeros((1, 16, 16)))
    clf, X, _ = fitted
    with pytest.raises(ShapeError):
        clf.predict(np.zeros((1, 8, 8)))
    with pytest.raises(ShapeError):
        BasisPruningClassifier().fit(X, np.zeros(3))
    with pytest.raises(ValueError):
        BasisPruningClassifier().fit(X, np.zeros(len(X)))
    with pytest.raises(ConfigError):
        BasisPruningClassifier(basis_fraction=1.0).fit(X, np.arange(len(X)) % 2)
