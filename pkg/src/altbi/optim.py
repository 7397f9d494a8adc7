"""Adam and the DP-SGD gradient aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """Return new parameters after one bias-corrected Adam step.

    ``params`` and ``grads`` are dicts of equally shaped arrays; neither is
    modified.  ``state`` is advanced in place.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    new = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        new[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new


@dataclass(frozen=True)
class DpConfig:
    """Per-sample clipping norm ``clip_norm`` and noise multiplier ``noise_multiplier``.

    ``shift_threshold`` applies the previous update's truncation threshold,
    which keeps the truncated loss separable across samples.
    """

    enabled: bool = False
    clip_norm: float = 10.0
    noise_multiplier: float = 0.7
    shift_threshold: bool = True

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be non-negative")


def global_norm(bundle):
    return float(np.sqrt(np.sum([np.sum(g * g) for g in bundle.values()])))


def clip_factor(norm, clip_norm):
    """Multiplier that brings a gradient of ``norm`` down to at most ``clip_norm``."""
    return 1.0 / np.maximum(1.0, np.asarray(norm) / clip_norm)


def dp_aggregate(per_sample_grads, cfg, rng, batch_size=None):
    """Clip each per-sample gradient, sum, add Gaussian noise, divide by batch size.

    Noise ``N(0, (noise_multiplier * clip_norm)^2)`` is added once per
    coordinate to the clipped sum, so the returned mean carries noise of
    standard deviation ``noise_multiplier * clip_norm / batch_size``.
    ``batch_size`` defaults to the number of gradients given.
    """
    if len(per_sample_grads) == 0:
        raise ValueError("dp_aggregate needs at least one per-sample gradient")
    names = list(per_sample_grads[0])
    total = {k: np.zeros_like(per_sample_grads[0][k]) for k in names}
    for g in per_sample_grads:
        c = clip_factor(global_norm(g), cfg.clip_norm)
        for k in names:
            total[k] = total[k] + c * g[k]
    b = len(per_sample_grads) if batch_size is None else batch_size
    sigma = cfg.noise_multiplier * cfg.clip_norm
    out = {}
    for k in names:
        noisy = total[k] + sigma * rng.standard_normal(total[k].shape) if sigma > 0 else total[k]
        out[k] = noisy / b
    return out
