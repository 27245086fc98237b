"""scikit-learn style wrappers around the training engines."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import IMAGE_SHAPE, NUM_CLASSES, ClientDataset
from .evaluation import CentralConfig, run_centralized
from .federation import FedConfig, run_federated
from .model import Network
from .personalization import PersonalizationConfig, personalize_client


def check_images(X) -> np.ndarray:
    """Accept ``(n, 20, 20, 3)`` images or ``(n, 1200)`` flat rows with
    values in [0, 1]."""
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_all_finite=True)
    n = X.shape[0]
    if X.shape[1:] == IMAGE_SHAPE:
        pass
    elif X.ndim == 2 and X.shape[1] == int(np.prod(IMAGE_SHAPE)):
        X = X.reshape((n,) + IMAGE_SHAPE)
    else:
        raise ValueError(f"expected samples of shape {IMAGE_SHAPE} or {int(np.prod(IMAGE_SHAPE))} "
                         f"features, got {X.shape[1:]}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integer class indices")
        y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= NUM_CLASSES:
        raise ValueError(f"labels must lie in [0, {NUM_CLASSES})")
    return y.astype(np.int64)


def _check_Xy(X, y):
    X = check_images(X)
    return X, check_labels(y, X.shape[0])


class _NetworkClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Shared prediction side: ``predict_proba``, ``predict`` and
    ``transform`` (latent vectors)."""

    def _net(self) -> Network:
        return Network(self.arch)

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self._net().predict_proba(self.params_, check_images(X))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self._net().encode(self.params_, check_images(X))

    def _finish(self, params):
        self.params_ = params
        self.classes_ = np.arange(NUM_CLASSES)
        self.n_features_in_ = int(np.prod(IMAGE_SHAPE))
        return self

    def personalize(self, X, y, epochs=10, batch_size=10, learning_rate=0.01, k_neighbors=5, seed=0):
        """Copy of this model with the head fine-tuned on SMOTE-balanced
        latents of ``(X, y)``."""
        check_is_fitted(self, "params_")
        X, y = _check_Xy(X, y)
        client = ClientDataset(0, X, y, np.zeros(len(y)), np.arange(len(y)))
        cfg = PersonalizationConfig(epochs, batch_size, learning_rate, k_neighbors, "user", seed)
        out = GCAEClassifier(arch=self.arch)
        return out._finish(personalize_client(self._net(), self.params_, client, cfg))


class GCAEClassifier(_NetworkClassifier):
    """Centrally trained network (GCAE by default).

    Parameters
    ----------
    arch : {"gcae", "fl-cnn", "fl-cnn-large", "fl-mlp"}
    lam : float
        Weight of the reconstruction term (ignored without a decoder).
    epochs, batch_size, learning_rate : training schedule for plain SGD.
    random_state : int
        Seeds initialisation and shuffling.
    """

    def __init__(self, arch="gcae", lam=0.01, epochs=10, batch_size=10, learning_rate=0.01, random_state=0):
        self.arch = arch
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        X, y = _check_Xy(X, y)
        train = ClientDataset(0, X, y, np.zeros(len(y)), np.arange(len(y)))
        cfg = CentralConfig(self.epochs, self.batch_size, self.learning_rate, self.lam, self.random_state)
        _, params = run_centralized(self.arch, train, [train], cfg)
        return self._finish(params)


class FederatedGCAEClassifier(_NetworkClassifier):
    """FedAvg-trained network.  ``fit(X, y, groups)`` treats each distinct
    ``groups`` value as one client."""

    def __init__(self, arch="gcae", clients_per_round=5, local_epochs=5, batch_size=10, learning_rate=0.01,
                 lam=0.01, rounds=150, random_state=0, workers=1):
        self.arch = arch
        self.clients_per_round = clients_per_round
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lam = lam
        self.rounds = rounds
        self.random_state = random_state
        self.workers = workers

    def fit(self, X, y, groups=None):
        X, y = _check_Xy(X, y)
        if groups is None:
            raise ValueError("groups (one client id per sample) is required")
        groups = check_array(np.asarray(groups).reshape(-1, 1), dtype=None).ravel()
        if len(groups) != len(y):
            raise ValueError("groups must align with X")
        ids = np.unique(groups)
        clients = [ClientDataset(i, X[groups == g], y[groups == g], np.full(int(np.sum(groups == g)), i),
                                 np.flatnonzero(groups == g)) for i, g in enumerate(ids)]
        cfg = FedConfig(num_clients=len(clients), clients_per_round=min(self.clients_per_round, len(clients)),
                        local_epochs=self.local_epochs, batch_size=self.batch_size,
                        learning_rate=self.learning_rate, lam=self.lam, rounds=self.rounds,
                        seed=self.random_state, arch=self.arch)
        params, logs = run_federated(clients, cfg, workers=self.workers)
        self.round_logs_ = logs
        self.client_ids_ = ids
        return self._finish(params)
