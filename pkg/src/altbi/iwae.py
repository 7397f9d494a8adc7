"""Importance-weighted autoencoder with Gaussian encoder and decoder.

The per-sample loss is the negative K-sample importance-weighted bound

    l(x) = -log( (1/K) * sum_k p(x | z_k) p(z_k) / q(z_k | x) ),

with ``z_k = mu_z + sigma_z * eps_k``.  All three densities are diagonal
Gaussians and log-variances are clamped to ``[-5, 5]``.
"""

from __future__ import annotations

import json
import math

import numpy as np

from . import autodiff as ad

LOGVAR_MIN, LOGVAR_MAX = -5.0, 5.0
LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    """A per-sample loss came out as NaN or inf."""

    def __init__(self, index, value):
        super().__init__(f"non-finite loss {value!r} for sample {index}")
        self.index = index
        self.value = value


def default_latent_dim(n_features):
    return int(min(max(math.ceil(n_features / 4), 2), 32))


def _xavier(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class IwaeModel:
    """Parameter bundle plus architecture of an IWAE.

    Parameters
    ----------
    n_features : int
        Input dimension D.
    latent_dim : int, optional
        Latent dimension; defaults to ``clamp(ceil(D / 4), 2, 32)``.
    n_samples : int
        Importance samples K per input.
    encoder_hidden, decoder_hidden : tuple of int
        Hidden widths. The decoder mirrors the encoder by default.
    rng : numpy.random.Generator, optional
        Source for Xavier-uniform initialisation. If ``None`` all weights
        are left at zero and must be supplied via :attr:`params`.
    """

    def __init__(self, n_features, latent_dim=None, n_samples=2,
                 encoder_hidden=(100, 50), decoder_hidden=(50, 100), rng=None):
        if n_features < 1:
            raise ValueError("n_features must be positive")
        if n_samples < 1:
            raise ValueError("n_samples (K) must be >= 1")
        self.n_features = int(n_features)
        self.latent_dim = int(latent_dim) if latent_dim is not None else default_latent_dim(n_features)
        self.n_samples = int(n_samples)
        self.encoder_hidden = tuple(int(h) for h in encoder_hidden)
        self.decoder_hidden = tuple(int(h) for h in decoder_hidden)
        self.params = self._init_params(rng)

    def _layer_shapes(self):
        shapes = []
        widths = (self.n_features,) + self.encoder_hidden
        for i in range(len(self.encoder_hidden)):
            shapes.append((f"enc{i}", widths[i], widths[i + 1]))
        shapes.append(("enc_mu", widths[-1], self.latent_dim))
        shapes.append(("enc_logvar", widths[-1], self.latent_dim))
        widths = (self.latent_dim,) + self.decoder_hidden
        for i in range(len(self.decoder_hidden)):
            shapes.append((f"dec{i}", widths[i], widths[i + 1]))
        shapes.append(("dec_mu", widths[-1], self.n_features))
        shapes.append(("dec_logvar", widths[-1], self.n_features))
        return shapes

    def _init_params(self, rng):
        params = {}
        for name, fan_in, fan_out in self._layer_shapes():
            if rng is None:
                params[f"{name}.W"] = np.zeros((fan_in, fan_out))
            else:
                params[f"{name}.W"] = _xavier(rng, fan_in, fan_out)
            params[f"{name}.b"] = np.zeros((1, fan_out))
        return params

    @property
    def n_parameters(self):
        return int(np.sum([p.size for p in self.params.values()]))

    def config(self):
        return {
            "n_features": self.n_features,
            "latent_dim": self.latent_dim,
            "n_samples": self.n_samples,
            "encoder_hidden": list(self.encoder_hidden),
            "decoder_hidden": list(self.decoder_hidden),
        }

    def copy(self):
        clone = IwaeModel(**self.config())
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def with_params(self, params):
        clone = IwaeModel(**self.config())
        clone.params = params
        return clone

    def draw_noise(self, n, rng, n_samples=None):
        k = self.n_samples if n_samples is None else n_samples
        return rng.standard_normal((n, k, self.latent_dim))

    def loss_graph(self, X, eps):
        """Build the tape for the per-sample losses of ``X`` under noise ``eps``.

        Returns ``(tape, losses)`` where ``losses`` is an ``(n, 1)`` node.
        """
        X = np.asarray(X, dtype=np.float64)
        n, d = X.shape
        if d != self.n_features:
            raise ad.ShapeError(f"input has {d} features, model expects {self.n_features}")
        eps = np.asarray(eps, dtype=np.float64)
        if eps.ndim != 3 or eps.shape[0] != n or eps.shape[2] != self.latent_dim:
            raise ad.ShapeError(f"noise shape {eps.shape} does not match ({n}, K, {self.latent_dim})")
        k = eps.shape[1]
        owner = np.arange(n)
        owner_k = np.repeat(owner, k)

        tape = ad.Tape()
        p = {name: tape.leaf(value, name=name) for name, value in self.params.items()}

        def dense(h, name):
            return ad.add_row(h @ p[f"{name}.W"], p[f"{name}.b"])

        h = tape.constant(X, owner=owner)
        for i in range(len(self.encoder_hidden)):
            h = ad.relu(dense(h, f"enc{i}"))
        mu_z = ad.repeat_rows(dense(h, "enc_mu"), k)
        logvar_z = ad.repeat_rows(ad.clip(dense(h, "enc_logvar"), LOGVAR_MIN, LOGVAR_MAX), k)
        noise = eps.reshape(n * k, self.latent_dim)
        z = mu_z + ad.exp(ad.scale(logvar_z, 0.5)) * tape.constant(noise, owner=owner_k)

        g = z
        for i in range(len(self.decoder_hidden)):
            g = ad.relu(dense(g, f"dec{i}"))
        mu_x = dense(g, "dec_mu")
        logvar_x = ad.clip(dense(g, "dec_logvar"), LOGVAR_MIN, LOGVAR_MAX)

        x_rep = tape.constant(np.repeat(X, k, axis=0), owner=owner_k)
        resid = ad.square(mu_x - x_rep) * ad.exp(ad.scale(logvar_x, -1.0))
        log_px = ad.shift(ad.scale(ad.sum(logvar_x + resid, axis=1), -0.5), -0.5 * d * LOG_2PI)
        # log p(z) - log q(z|x); the 2*pi terms cancel and (z - mu)/sigma = eps.
        eps_sq = 0.5 * np.sum(noise * noise, axis=1, keepdims=True)
        log_prior_ratio = ad.scale(ad.sum(logvar_z, axis=1), 0.5) - ad.scale(ad.sum(ad.square(z), axis=1), 0.5)
        log_w = log_px + log_prior_ratio + tape.constant(eps_sq, owner=owner_k)

        lse = ad.logsumexp_rows(ad.reshape(log_w, (n, k)))
        losses = ad.shift(ad.scale(lse, -1.0), math.log(k))
        _check_finite(losses.value[:, 0])
        return tape, losses

    def losses(self, X, rng=None, eps=None, n_samples=None):
        """Per-sample losses as a 1-D array (no gradients kept)."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] == 0:
            return np.zeros(0)
        if eps is None:
            if rng is None:
                raise ValueError("either rng or eps is required")
            eps = self.draw_noise(X.shape[0], rng, n_samples)
        _, node = self.loss_graph(X, eps)
        return node.value[:, 0].copy()

    def save(self, path):
        arrays = {f"param:{k}": v for k, v in self.params.items()}
        meta = json.dumps({"format": "altbi-iwae", "version": CHECKPOINT_VERSION, "config": self.config()})
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(meta), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            if meta.get("format") != "altbi-iwae" or meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint: {meta.get('format')} v{meta.get('version')}")
            model = cls(**meta["config"])
            params = {k[len("param:"):]: data[k].copy() for k in data.files if k.startswith("param:")}
        if set(params) != set(model.params):
            raise ValueError("checkpoint parameters do not match the architecture")
        for k, v in params.items():
            if v.shape != model.params[k].shape:
                raise ValueError(f"parameter {k} has shape {v.shape}, expected {model.params[k].shape}")
        model.params = params
        return model


def _check_finite(values):
    bad = ~np.isfinite(values)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteLossError(i, float(values[i]))


def per_sample_loss(model, x, rng=None, eps=None):
    """Loss of a single feature vector.

    Returns ``(loss, tape, root)`` where ``root`` is the ``(1, 1)`` loss
    node, ready for ``tape.backward(root)``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if eps is None:
        eps = model.draw_noise(1, rng)
    eps = np.asarray(eps, dtype=np.float64).reshape(1, -1, model.latent_dim)
    tape, node = model.loss_graph(x, eps)
    return float(node.value[0, 0]), tape, node


def batch_losses(model, X, rng=None, eps=None):
    """Per-sample losses for every row of ``X``, in row order."""
    return model.losses(X, rng=rng, eps=eps)
