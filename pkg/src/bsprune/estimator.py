"""scikit-learn style classifier wrapping the whole procedure."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, train_val_split
from .execution import predict_logits
from .pipeline import RunConfig, run_procedure
from .validation import check_fraction, check_images, check_labels


class BasisPruningClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier built by decomposing a conv net into basis pairs,
    training the scaling factors and head, then pruning.

    ``X`` is an image batch (n, h, w[, c]). ``fit`` holds out
    ``validation_fraction`` of the data to score each stage; the per-stage
    rows end up in ``report_``.

    Parameters
    ----------
    architecture : str or dict
        Template name, config dict or config path for the source network.
    epochs, retrain_epochs : int
        Epochs for the initial training stage and for each retraining stage.
    basis_fraction, channel_fraction : float
        Fractions of basis vectors and channels removed (0 skips a stage).
    """

    def __init__(self, architecture="tiny_vgg", epochs=10, retrain_epochs=5,
                 basis_fraction=0.5, channel_fraction=0.0, basis_importance="taylor_fo",
                 channel_importance="taylor_fo", batch_size=32, lr_min=1e-4, lr_max=1e-1,
                 momentum=0.9, recompute_bn=True, validation_fraction=0.1, random_state=0):
        self.architecture = architecture
        self.epochs = epochs
        self.retrain_epochs = retrain_epochs
        self.basis_fraction = basis_fraction
        self.channel_fraction = channel_fraction
        self.basis_importance = basis_importance
        self.channel_importance = channel_importance
        self.batch_size = batch_size
        self.lr_min = lr_min
        self.lr_max = lr_max
        self.momentum = momentum
        self.recompute_bn = recompute_bn
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _run_config(self):
        return RunConfig(
            architecture=self.architecture,
            dataset={"kind": "memory"},
            epochs={"train": self.epochs, "basis": self.retrain_epochs, "double": self.retrain_epochs},
            remove_fraction={"basis": check_fraction(self.basis_fraction, "basis_fraction"),
                             "double": check_fraction(self.channel_fraction, "channel_fraction")},
            importance={"basis": self.basis_importance, "double": self.channel_importance},
            seed=int(self.random_state), momentum=self.momentum, lr_min=self.lr_min,
            lr_max=self.lr_max, batch_size=self.batch_size, recompute_bn=self.recompute_bn)

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X))
        cfg = self._run_config()
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        full = Dataset(X, encoded, len(self.classes_))
        train, val = train_val_split(full, self.validation_fraction, cfg.seed)
        if len(val) == 0:
            val = train
        report = run_procedure(cfg, data=(train, val, None))
        self.graph_ = report["graph"]
        self.report_ = report["rows"]
        self.history_ = report["histories"]
        self.input_shape_ = X.shape[1:]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "graph_")
        return predict_logits(self.graph_, check_images(X, self.input_shape_))

    def predict_proba(self, X):
        logits = self.decision_function(X)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
