"""Adaptive loss truncation with batch increment.

Training runs in two phases on a single IWAE:

1. warm-up: ``T0`` Adam updates on the plain mean loss of fixed-size
   mini-batches of ``n0`` rows;
2. enhancement: ``T2`` updates where update ``t`` draws ``n0 * gamma**(t-1)``
   rows, keeps only the samples whose loss is at most the ``rho``-quantile
   of the batch, and steps on the mean kept loss.

After every phase-2 update ``t > T1`` the whole dataset is scored, and the
outlier score of a sample is its loss averaged over those ``T2 - T1``
passes.  Higher means more outlying.

Random streams are keyed by ``(seed, member, stream, ...)`` so that
initialisation, batch sampling, training noise, scoring noise and DP noise
are independent of each other and of how many draws the others make.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .iwae import IwaeModel, NonFiniteLossError
from .metrics import roc_auc
from .optim import AdamState, DpConfig, adam_step, clip_factor

STREAM_INIT = 0
STREAM_BATCH = 1
STREAM_TRAIN_NOISE = 2
STREAM_SCORE = 3
STREAM_DP = 4


def stream(seed, member, kind, *keys):
    """Independent generator for one purpose of one model in one run."""
    return np.random.default_rng([int(seed), int(member), int(kind), *map(int, keys)])


class TrainingError(RuntimeError):
    def __init__(self, update, message):
        super().__init__(f"update {update}: {message}")
        self.update = update


@dataclass(frozen=True)
class HyperParams:
    n0: int = 128
    gamma: float = 1.03
    rho: float = 0.92
    T0: int = 10
    T1: int = 60
    T2: int = 80
    K: int = 2
    lr: float = 1e-3
    seed: int = 0
    score_K: int | None = None
    latent_dim: int | None = None
    encoder_hidden: tuple = (100, 50)
    decoder_hidden: tuple = (50, 100)
    dp: DpConfig = field(default_factory=DpConfig)

    def __post_init__(self):
        if self.n0 < 1:
            raise ValueError("n0 must be >= 1")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if self.T0 < 0 or self.T1 < 0:
            raise ValueError("T0 and T1 must be non-negative")
        if not self.T1 < self.T2:
            raise ValueError(f"need T1 < T2, got T1={self.T1}, T2={self.T2}")
        if self.K < 1 or (self.score_K is not None and self.score_K < 1):
            raise ValueError("K and score_K must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    @property
    def scoring_K(self):
        return self.K if self.score_K is None else self.score_K

    def replace(self, **changes):
        return replace(self, **changes)


def batch_size_at(t, hp, n=None):
    """Phase-2 batch size ``floor(n0 * gamma**(t-1))``, capped at ``n``."""
    if t < 1:
        raise ValueError("phase-2 updates are numbered from 1")
    # the relative nudge keeps exact products such as 100 * 1.1**2 from flooring to 120
    size = max(1, math.floor(hp.n0 * hp.gamma ** (t - 1) * (1 + 1e-12)))
    return size if n is None else min(size, n)


def quantile_threshold(losses, rho):
    """Nearest-rank ``rho``-quantile: the ``ceil(rho * len)``-th smallest loss."""
    losses = np.asarray(losses, dtype=np.float64).ravel()
    if losses.size == 0:
        raise ValueError("quantile of an empty loss vector")
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    k = math.ceil(rho * losses.size)
    return float(np.partition(losses, k - 1)[k - 1])


def truncated_loss(losses, tau):
    """Mean of the losses that do not exceed ``tau`` and the boolean kept-mask."""
    losses = np.asarray(losses, dtype=np.float64).ravel()
    mask = losses <= tau
    kept = int(mask.sum())
    if kept == 0:
        raise ValueError(f"no loss is <= tau={tau}")
    return float(losses[mask].sum() / kept), mask


class ScoreAccumulator:
    """Running per-sample sums of losses over scoring passes."""

    def __init__(self, n):
        self.sums = np.zeros(n)
        self.passes = 0

    def add(self, losses):
        self.sums += losses
        self.passes += 1

    def mean(self):
        if self.passes == 0:
            raise ValueError("no scoring pass recorded")
        return self.sums / self.passes


TRACE_COLUMNS = ("t", "n_t", "tau", "kept", "kept_outlier_frac", "mean_loss", "auc")


@dataclass
class TrainTrace:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def __len__(self):
        return len(self.rows)


@dataclass
class TrainResult:
    model: IwaeModel
    scores: np.ndarray
    trace: TrainTrace
    snapshots: list
    hp: HyperParams


class Trainer:
    """Mutable training state of one IWAE: parameters, Adam moments, streams.

    ``member`` separates independently initialised models that share a
    master seed (used by the ODIM ensemble).
    """

    def __init__(self, n_features, hp, member=0):
        self.hp = hp
        self.member = member
        self.model = IwaeModel(
            n_features,
            latent_dim=hp.latent_dim,
            n_samples=hp.K,
            encoder_hidden=hp.encoder_hidden,
            decoder_hidden=hp.decoder_hidden,
            rng=stream(hp.seed, member, STREAM_INIT),
        )
        self.adam = AdamState(lr=hp.lr)
        self.batch_rng = stream(hp.seed, member, STREAM_BATCH)
        self.noise_rng = stream(hp.seed, member, STREAM_TRAIN_NOISE)
        self.dp_rng = stream(hp.seed, member, STREAM_DP)
        self.updates = 0

    def draw_batch(self, n, size):
        if size >= n:
            return np.arange(n)
        return np.sort(self.batch_rng.choice(n, size=size, replace=False))

    def step(self, X, idx, tau=None, rho=None):
        """One update on rows ``idx``.

        With ``rho`` set, the threshold is the ``rho``-quantile of this
        batch's losses; otherwise ``tau`` is used as given (``None`` keeps
        every sample).  Returns ``(losses, mask, tau)`` for the batch under
        the pre-update parameters.
        """
        update = self.updates + 1
        xb = X[idx]
        eps = self.model.draw_noise(len(idx), self.noise_rng)
        try:
            tape, losses = self.model.loss_graph(xb, eps)
        except NonFiniteLossError as exc:
            raise TrainingError(update, f"non-finite loss for row {idx[exc.index]}") from exc
        values = losses.value[:, 0]
        if rho is not None:
            tau = quantile_threshold(values, rho)
        mask = np.ones(len(idx), dtype=bool) if tau is None else values <= tau
        kept = int(mask.sum())
        dp = self.hp.dp
        if dp.enabled:
            sq = tape.per_sample_sq_norms(losses, len(idx))
            factors = clip_factor(np.sqrt(sq), dp.clip_norm)
            denom = max(kept, 1)
        else:
            if kept == 0:
                raise TrainingError(update, "truncation kept no samples")
            factors = np.ones(len(idx))
            denom = kept
        weights = mask * factors / denom
        root = ad.sum(ad.mul(losses, tape.constant(weights[:, None])))
        grads = tape.backward(root)
        if dp.enabled and dp.noise_multiplier > 0:
            sigma = dp.noise_multiplier * dp.clip_norm
            grads = {k: g + sigma * self.dp_rng.standard_normal(g.shape) / denom for k, g in grads.items()}
        self.model = self.model.with_params(adam_step(self.adam, self.model.params, grads))
        self.updates = update
        return values, mask, tau

    def score(self, X, update=None):
        """Losses of every row under the current parameters, scoring noise keyed by update."""
        update = self.updates if update is None else update
        rng = stream(self.hp.seed, self.member, STREAM_SCORE, update)
        return self.model.losses(X, rng=rng, n_samples=self.hp.scoring_K)


def _check_X(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError(f"expected a non-empty 2-D array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or inf")
    return X


def train(X, hp=None, labels=None, keep_snapshots=True, trace_auc=True):
    """Fit an IWAE with ALTBI and score the training rows.

    ``labels`` (1 = outlier) are only used to fill the trace.  With
    ``hp.dp.enabled`` every update uses clipped, noised per-sample gradients
    and, if ``hp.dp.shift_threshold``, the threshold computed from the
    previous update's batch (no truncation at the first phase-2 update).
    """
    hp = HyperParams() if hp is None else hp
    X = _check_X(X)
    n = X.shape[0]
    if labels is not None:
        labels = np.asarray(labels).astype(int).ravel()
        if labels.shape[0] != n:
            raise ValueError("labels and X have different lengths")
    trainer = Trainer(X.shape[1], hp)

    for _ in range(hp.T0):
        trainer.step(X, trainer.draw_batch(n, min(hp.n0, n)))

    acc = ScoreAccumulator(n)
    trace = TrainTrace()
    snapshots = []
    shift = hp.dp.enabled and hp.dp.shift_threshold
    prev_tau = math.inf
    for t in range(1, hp.T2 + 1):
        idx = trainer.draw_batch(n, batch_size_at(t, hp, n))
        if shift:
            values, mask, tau = trainer.step(X, idx, tau=prev_tau)
            prev_tau = quantile_threshold(values, hp.rho)
        else:
            values, mask, tau = trainer.step(X, idx, rho=hp.rho)
        if t > hp.T1:
            acc.add(trainer.score(X))
            if keep_snapshots:
                snapshots.append((trainer.updates, trainer.model.params))
        kept = int(mask.sum())
        frac = math.nan
        auc = math.nan
        if labels is not None:
            if kept:
                frac = float(labels[idx][mask].mean())
            if trace_auc and acc.passes and 0 < labels.sum() < n:
                auc = roc_auc(acc.mean(), labels)
        trace.append(
            t=t, n_t=len(idx), tau=tau, kept=kept, kept_outlier_frac=frac,
            mean_loss=float(values[mask].mean()) if kept else math.nan, auc=auc,
        )
    return TrainResult(trainer.model, acc.mean(), trace, snapshots, hp)


def score_heldout(result, X, n_features=None):
    """Ensemble score of new rows from the parameter snapshots of a run.

    Each snapshot is evaluated with the scoring noise of its own update,
    so scoring the training rows reproduces ``result.scores`` exactly.
    """
    X = np.asarray(X, dtype=np.float64)
    d = result.model.n_features
    if X.ndim != 2 or (X.shape[0] and X.shape[1] != d):
        raise ValueError(f"heldout rows must have {d} features, got shape {X.shape}")
    if X.shape[0] == 0:
        return np.zeros(0)
    if not result.snapshots:
        raise ValueError("run kept no parameter snapshots")
    acc = ScoreAccumulator(X.shape[0])
    hp = result.hp
    for update, params in result.snapshots:
        model = result.model.with_params(params)
        rng = stream(hp.seed, 0, STREAM_SCORE, update)
        acc.add(model.losses(X, rng=rng, n_samples=hp.scoring_K))
    return acc.mean()
