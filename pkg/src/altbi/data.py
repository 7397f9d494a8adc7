"""Datasets: CSV ingestion, min-max scaling, SSOD splits and synthetic benchmarks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import chi2
from sklearn.preprocessing import MinMaxScaler


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""
    feature_names: tuple | None = None
    scale_min: np.ndarray | None = None
    scale_max: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise DataError(f"X must be 2-D, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise DataError("X contains NaN or inf")
        object.__setattr__(self, "X", X)
        if self.labels is not None:
            y = np.asarray(self.labels).astype(int).ravel()
            if y.shape[0] != X.shape[0]:
                raise DataError(f"{y.shape[0]} labels for {X.shape[0]} rows")
            if not np.all((y == 0) | (y == 1)):
                raise DataError("labels must be 0 (inlier) or 1 (outlier)")
            object.__setattr__(self, "labels", y)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def n_features(self):
        return self.X.shape[1]

    @property
    def outlier_ratio(self):
        return None if self.labels is None else float(self.labels.mean())

    def subset(self, idx):
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], labels=None if self.labels is None else self.labels[idx])


def _is_number(cell):
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, label_column=None, name=None):
    """Read a numeric CSV; the first row is a header when none of its cells parse as numbers.

    ``label_column`` names the 0/1 label column; an integer index (negative
    counts from the end) is accepted as well.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = None
    if not any(_is_number(c) for c in rows[0]):
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
        first_line = 2
    else:
        first_line = 1
    width = len(header) if header else len(rows[0])
    values = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {i + first_line} has {len(row)} columns, expected {width}")
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {i + first_line}, column {j + 1}") from None
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise DataError(f"{path}: non-finite value at row {bad[0] + first_line}, column {bad[1] + 1}")

    labels = None
    names = tuple(header) if header else tuple(f"x{j}" for j in range(width))
    if label_column is not None:
        if header and label_column in header:
            col = header.index(label_column)
        elif str(label_column).lstrip("-").isdigit() and -width <= int(label_column) < width:
            col = int(label_column) % width
        else:
            raise DataError(f"{path}: label column {label_column!r} not found")
        labels = values[:, col]
        values = np.delete(values, col, axis=1)
        names = names[:col] + names[col + 1:]
    return Dataset(values, labels, name=name or str(path), feature_names=names)


def save_csv(dataset, path, label_column="y"):
    names = list(dataset.feature_names or (f"x{j}" for j in range(dataset.n_features)))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names + ([label_column] if dataset.labels is not None else []))
        for i in range(dataset.n):
            row = [repr(float(v)) for v in dataset.X[i]]
            if dataset.labels is not None:
                row.append(str(int(dataset.labels[i])))
            w.writerow(row)


def minmax_scale(dataset, reference=None):
    """Scale every feature to [0, 1] by its min and max; constant features become 0.

    With ``reference`` the min/max are taken from that (training) dataset and
    values outside its range are left unclipped.
    """
    ref = dataset if reference is None else reference
    if ref.scale_min is not None and reference is not None:
        lo, hi = ref.scale_min, ref.scale_max
    else:
        scaler = MinMaxScaler(clip=False).fit(ref.X)
        lo, hi = scaler.data_min_, scaler.data_max_
    return replace(dataset, X=apply_minmax(dataset.X, lo, hi), scale_min=lo, scale_max=hi)


def apply_minmax(X, lo, hi):
    span = hi - lo
    return (X - lo) / np.where(span > 0, span, 1.0)


def split_ssod(dataset, ratio=0.7, seed=0):
    """Train on a random ``ratio`` share of the inliers; test on everything else.

    Returns ``(train, test, train_idx, test_idx)``.
    """
    if dataset.labels is None:
        raise DataError("SSOD split needs labels")
    rng = np.random.default_rng(seed)
    inliers = np.flatnonzero(dataset.labels == 0)
    n_train = int(round(ratio * inliers.size))
    train_idx = np.sort(rng.permutation(inliers)[:n_train])
    test_mask = np.ones(dataset.n, dtype=bool)
    test_mask[train_idx] = False
    test_idx = np.flatnonzero(test_mask)
    return dataset.subset(train_idx), dataset.subset(test_idx), train_idx, test_idx


@dataclass(frozen=True)
class SynthSpec:
    """Gaussian-mixture inliers plus outliers outside the inlier envelope.

    Inliers come from ``n_components`` unit-variance Gaussians, truncated to
    the radius ``envelope`` around their mean (by default the D-dimensional
    equivalent of 3 standard deviations: the chi quantile at 99.73%).
    Outliers never fall inside any envelope.

    ``outlier_mode``:
      * ``"uniform-box"``: uniform over the means' bounding box padded by
        ``box_pad`` envelopes on every side;
      * ``"shifted-gaussian"``: one Gaussian cluster of scale
        ``outlier_scale`` whose centre lies ``shift`` envelopes away from
        the nearest inlier mean.
    """

    n: int = 2000
    D: int = 10
    alpha: float = 0.05
    n_components: int = 2
    outlier_mode: str = "uniform-box"
    seed: int = 0
    spread: float = 4.0
    envelope: float | None = None
    box_pad: float = 1.0
    shift: float = 1.5
    outlier_scale: float = 1.0

    @property
    def envelope_radius(self):
        if self.envelope is not None:
            return float(self.envelope)
        return float(math.sqrt(chi2.ppf(0.9973, self.D)))

    @property
    def n_outliers(self):
        return int(math.floor(self.alpha * self.n + 0.5))


def _reject_sample(draw, keep, count, what, max_rounds=200):
    if count == 0:
        return draw(0)
    chunks = []
    have = 0
    for _ in range(max_rounds):
        if have >= count:
            break
        cand = draw(max(2 * (count - have), 64))
        cand = cand[keep(cand)]
        chunks.append(cand)
        have += cand.shape[0]
    else:
        if have < count:
            raise DataError(f"cannot place {count} {what}: acceptance region too small")
    return np.concatenate(chunks)[:count]


def gen_synthetic(spec):
    if spec.n < 1 or spec.D < 1 or spec.n_components < 1:
        raise DataError("n, D and n_components must be positive")
    if not 0 <= spec.alpha < 1:
        raise DataError("alpha must lie in [0, 1)")
    rng = np.random.default_rng(spec.seed)
    r = spec.envelope_radius
    means = rng.uniform(-spec.spread, spec.spread, size=(spec.n_components, spec.D))
    n_out = spec.n_outliers
    n_in = spec.n - n_out

    def dist_to_means(P):
        return np.sqrt(((P[:, None, :] - means[None, :, :]) ** 2).sum(axis=2))

    comp = rng.integers(spec.n_components, size=n_in)
    inliers = np.empty((n_in, spec.D))
    for c in range(spec.n_components):
        k = int((comp == c).sum())
        inliers[comp == c] = _reject_sample(
            lambda m: means[c] + rng.standard_normal((m, spec.D)),
            lambda P: np.linalg.norm(P - means[c], axis=1) <= r,
            k, "inliers",
        )

    outside = lambda P: dist_to_means(P).min(axis=1) > r  # noqa: E731
    if spec.outlier_mode == "uniform-box":
        lo = means.min(axis=0) - spec.box_pad * r
        hi = means.max(axis=0) + spec.box_pad * r
        outliers = _reject_sample(lambda m: rng.uniform(lo, hi, size=(m, spec.D)), outside, n_out, "outliers")
    elif spec.outlier_mode == "shifted-gaussian":
        direction = rng.standard_normal(spec.D)
        direction /= np.linalg.norm(direction)
        anchor = means[rng.integers(spec.n_components)]
        centre = anchor + spec.shift * r * direction
        outliers = _reject_sample(
            lambda m: centre + spec.outlier_scale * rng.standard_normal((m, spec.D)), outside, n_out, "outliers"
        )
    else:
        raise DataError(f"unknown outlier mode {spec.outlier_mode!r}")

    X = np.vstack([inliers, outliers.reshape(n_out, spec.D)])
    y = np.r_[np.zeros(n_in, dtype=int), np.ones(n_out, dtype=int)]
    perm = rng.permutation(spec.n)
    return Dataset(X[perm], y[perm], name=f"synthetic-{spec.outlier_mode}-a{spec.alpha}-s{spec.seed}",
                   feature_names=tuple(f"x{j}" for j in range(spec.D)))


def component_means(spec):
    """Inlier component means of a spec (re-derived from its seed)."""
    rng = np.random.default_rng(spec.seed)
    return rng.uniform(-spec.spread, spec.spread, size=(spec.n_components, spec.D))
