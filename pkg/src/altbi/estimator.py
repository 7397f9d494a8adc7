"""scikit-learn style wrappers around ALTBI and ODIM.

Both follow the PyOD output convention: ``decision_function`` is higher for
more outlying rows and ``predict`` returns 1 for outliers, 0 for inliers,
thresholding at the ``contamination`` quantile of the training scores.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.preprocessing import MinMaxScaler
from sklearn.utils.validation import check_array, check_is_fitted

from .baselines import OdimConfig, odim_train_and_score
from .core import HyperParams, score_heldout, train
from .data import apply_minmax
from .optim import DpConfig


class _DetectorMixin:
    def _prepare_fit(self, X):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        if not 0 < self.contamination < 0.5:
            raise ValueError("contamination must lie in (0, 0.5)")
        self.n_features_in_ = X.shape[1]
        if self.scale:
            scaler = MinMaxScaler(clip=False).fit(X)
            self.scale_min_, self.scale_max_ = scaler.data_min_, scaler.data_max_
            X = apply_minmax(X, self.scale_min_, self.scale_max_)
        return X

    def _prepare(self, X):
        check_is_fitted(self, "decision_scores_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the detector was fitted on {self.n_features_in_}")
        if self.scale:
            X = apply_minmax(X, self.scale_min_, self.scale_max_)
        return X

    def _set_threshold(self):
        self.threshold_ = float(np.percentile(self.decision_scores_, 100.0 * (1.0 - self.contamination)))
        self.labels_ = (self.decision_scores_ > self.threshold_).astype(int)

    def predict(self, X):
        return (self.decision_function(X) > self.threshold_).astype(int)

    def fit_predict(self, X, y=None):
        return self.fit(X, y).labels_


class ALTBI(_DetectorMixin, BaseEstimator):
    """IWAE outlier detector trained with adaptive loss truncation and batch increment.

    ``y`` passed to ``fit`` is never used for training; when given, the
    training trace records AUC and the outlier share of the kept samples.

    Attributes after ``fit``: ``decision_scores_`` (training-row scores),
    ``threshold_``, ``labels_``, ``result_`` (the full ``TrainResult``).
    """

    def __init__(self, n0=128, gamma=1.03, rho=0.92, T0=10, T1=60, T2=80, n_importance=2, lr=1e-3,
                 latent_dim=None, dp=False, clip_norm=10.0, noise_multiplier=0.7, contamination=0.1,
                 scale=True, random_state=0):
        self.n0 = n0
        self.gamma = gamma
        self.rho = rho
        self.T0 = T0
        self.T1 = T1
        self.T2 = T2
        self.n_importance = n_importance
        self.lr = lr
        self.latent_dim = latent_dim
        self.dp = dp
        self.clip_norm = clip_norm
        self.noise_multiplier = noise_multiplier
        self.contamination = contamination
        self.scale = scale
        self.random_state = random_state

    def hyperparams(self):
        return HyperParams(
            n0=self.n0, gamma=self.gamma, rho=self.rho, T0=self.T0, T1=self.T1, T2=self.T2,
            K=self.n_importance, lr=self.lr, seed=self.random_state, latent_dim=self.latent_dim,
            dp=DpConfig(enabled=self.dp, clip_norm=self.clip_norm, noise_multiplier=self.noise_multiplier),
        )

    def fit(self, X, y=None):
        X = self._prepare_fit(X)
        self.result_ = train(X, self.hyperparams(), labels=y)
        self.decision_scores_ = self.result_.scores
        self._set_threshold()
        return self

    def decision_function(self, X):
        X = self._prepare(X)
        return score_heldout(self.result_, X)


class ODIM(_DetectorMixin, BaseEstimator):
    """Ensemble of plainly trained IWAEs, each stopped at its most bimodal loss distribution."""

    def __init__(self, n_models=3, max_updates=100, batch_size=128, n_importance=2, lr=1e-3,
                 latent_dim=None, contamination=0.1, scale=True, random_state=0):
        self.n_models = n_models
        self.max_updates = max_updates
        self.batch_size = batch_size
        self.n_importance = n_importance
        self.lr = lr
        self.latent_dim = latent_dim
        self.contamination = contamination
        self.scale = scale
        self.random_state = random_state

    def fit(self, X, y=None):
        X = self._prepare_fit(X)
        cfg = OdimConfig(self.n_models, self.max_updates, self.batch_size)
        hp = HyperParams(K=self.n_importance, lr=self.lr, seed=self.random_state, latent_dim=self.latent_dim)
        self.result_ = odim_train_and_score(X, cfg, hp)
        self.decision_scores_ = self.result_.scores
        self._set_threshold()
        return self

    def decision_function(self, X):
        X = self._prepare(X)
        return self.result_.score(X)
