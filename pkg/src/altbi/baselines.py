"""Reference detectors: plain fixed-batch IWAE training and ODIM.

ODIM trains several independently initialised IWAEs on the plain mean loss.
After every update it fits a two-component Gaussian mixture to the
per-sample losses, measures the 2-Wasserstein gap between the components,
and keeps the losses of the update with the widest gap.  The final score
averages those losses over the models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import STREAM_SCORE, HyperParams, Trainer, _check_X, stream

VAR_FLOOR = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Gmm1d:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihoods: tuple = ()
    n_iter: int = 0

    def component(self, i):
        return float(self.means[i]), float(self.variances[i])

    def responsibilities(self, values):
        return _e_step(np.asarray(values, dtype=np.float64), self.weights, self.means, self.variances)[0]


def _e_step(x, w, mu, var):
    const = np.log(w) - 0.5 * (_LOG_2PI + np.log(var))
    logp = const[None, :] - 0.5 * (x[:, None] - mu[None, :]) ** 2 / var[None, :]
    lse = np.logaddexp(logp[:, 0], logp[:, 1])
    return np.exp(logp - lse[:, None]), float(lse.mean())


def fit_gmm1d(values, max_iters=200, tol=1e-6):
    """EM for a two-component 1-D Gaussian mixture.

    Stops once the mean per-point log-likelihood improves by less than
    ``tol``; ``log_likelihoods`` records it after every iteration.
    Initialised with means at the 25th/75th percentiles, equal weights and
    the sample variance for both components.  Components are returned in
    ascending order of their means.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if np.unique(x).size < 2:
        raise ValueError("need at least two distinct values to fit two components")
    w = np.array([0.5, 0.5])
    mu = np.percentile(x, [25.0, 75.0])
    var = np.full(2, max(x.var(), VAR_FLOOR))
    resp, ll = _e_step(x, w, mu, var)
    history = [ll]
    it = 0
    for it in range(1, max_iters + 1):
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-300)
        w = nk / x.size
        mu = (resp * x[:, None]).sum(axis=0) / nk
        var = np.maximum((resp * (x[:, None] - mu) ** 2).sum(axis=0) / nk, VAR_FLOOR)
        w = np.maximum(w, 1e-300)
        w = w / w.sum()
        resp, ll = _e_step(x, w, mu, var)
        history.append(ll)
        if ll - history[-2] < tol:
            break
    order = np.argsort(mu)
    return Gmm1d(w[order], mu[order], var[order], tuple(history), it)


def w2_gaussians(c1, c2):
    """Closed-form 2-Wasserstein distance between 1-D Gaussians given as (mean, variance)."""
    (m1, v1), (m2, v2) = c1, c2
    if v1 < 0 or v2 < 0:
        raise ValueError("variances must be non-negative")
    return math.sqrt((m1 - m2) ** 2 + (math.sqrt(v1) - math.sqrt(v2)) ** 2)


def bimodality(values):
    g = fit_gmm1d(values)
    return w2_gaussians(g.component(0), g.component(1))


def plain_hyperparams(hp=None, n0=128):
    hp = HyperParams() if hp is None else hp
    return hp.replace(n0=n0, gamma=1.0, rho=1.0)


def plain_trajectory(X, hp, n_updates, member=0, score_every=1):
    """Train on the untruncated mean loss with batch ``hp.n0``.

    Yields ``(update, losses, model)`` for the full dataset after every
    ``score_every``-th update, starting with update 0 (initialisation).
    """
    X = _check_X(X)
    n = X.shape[0]
    trainer = Trainer(X.shape[1], hp, member=member)
    yield 0, trainer.score(X, update=0), trainer.model
    for u in range(1, n_updates + 1):
        trainer.step(X, trainer.draw_batch(n, min(hp.n0, n)))
        if u % score_every == 0 or u == n_updates:
            yield u, trainer.score(X), trainer.model


def plain_score(X, hp=None, at_update=100):
    """Per-sample losses after ``at_update`` plain fixed-batch updates."""
    if at_update < 0:
        raise ValueError("at_update must be >= 0")
    hp = plain_hyperparams(hp) if hp is None else hp
    last = None
    for _, losses, _ in plain_trajectory(X, hp, at_update, score_every=max(at_update, 1)):
        last = losses
    return last


@dataclass(frozen=True)
class OdimConfig:
    n_models: int = 3
    max_updates: int = 100
    batch_size: int = 128

    def __post_init__(self):
        if self.n_models < 1:
            raise ValueError("n_models must be >= 1")
        if self.max_updates < 1 or self.batch_size < 1:
            raise ValueError("max_updates and batch_size must be positive")


@dataclass
class OdimResult:
    """``models`` holds the selected IWAE of every ensemble member."""

    scores: np.ndarray
    selected_updates: list
    gaps: list
    models: list
    hp: HyperParams

    def score(self, X):
        """Ensemble score of any rows; reproduces ``scores`` on the training rows."""
        X = _check_X(X)
        total = np.zeros(X.shape[0])
        for member, (update, model) in enumerate(zip(self.selected_updates, self.models)):
            rng = stream(self.hp.seed, member, STREAM_SCORE, update)
            total += model.losses(X, rng=rng, n_samples=self.hp.scoring_K)
        return total / len(self.models)


def odim_train_and_score(X, cfg=None, hp=None, force_update=None):
    """ODIM ensemble scores.

    ``force_update`` skips the bimodality search and uses that update for
    every model.
    """
    cfg = OdimConfig() if cfg is None else cfg
    hp = plain_hyperparams(hp, n0=cfg.batch_size)
    X = _check_X(X)
    total = np.zeros(X.shape[0])
    selected, gaps, models = [], [], []
    for b in range(cfg.n_models):
        best_gap, best_u, best_losses, best_model = -np.inf, None, None, None
        model_gaps = []
        for u, losses, model in plain_trajectory(X, hp, cfg.max_updates, member=b):
            if force_update is not None:
                if u == force_update:
                    best_u, best_losses, best_model = u, losses, model
                continue
            if u == 0:
                continue
            gap = _safe_bimodality(losses)
            model_gaps.append(gap)
            if gap > best_gap:
                best_gap, best_u, best_losses, best_model = gap, u, losses, model
        if best_losses is None:
            raise ValueError(f"forced update {force_update} outside 0..{cfg.max_updates}")
        total += best_losses
        selected.append(best_u)
        gaps.append(model_gaps)
        models.append(best_model)
    return OdimResult(total / cfg.n_models, selected, gaps, models, hp)


def _safe_bimodality(losses):
    try:
        return bimodality(losses)
    except ValueError:
        return 0.0
