import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from altbi.core import (
    HyperParams, ScoreAccumulator, Trainer, TrainingError, batch_size_at, quantile_threshold, score_heldout, stream,
    train, truncated_loss,
)
from altbi.data import SynthSpec, gen_synthetic, minmax_scale
from altbi.metrics import roc_auc
from altbi.optim import DpConfig
from oracles import nearest_rank_quantile, schedule

SMALL = dict(T0=2, T1=4, T2=7, encoder_hidden=(8,), decoder_hidden=(8,))


@pytest.fixture(scope="module")
def synth():
    return minmax_scale(gen_synthetic(SynthSpec(n=600, D=6, seed=1)))


def test_defaults():
    hp = HyperParams()
    assert (hp.n0, hp.gamma, hp.rho, hp.T0, hp.T1, hp.T2) == (128, 1.03, 0.92, 10, 60, 80)
    assert hp.K == 2 and hp.lr == 1e-3 and hp.scoring_K == 2


@pytest.mark.parametrize("bad", [dict(n0=0), dict(gamma=0.9), dict(rho=0.0), dict(rho=1.1), dict(T1=80, T2=80),
                                 dict(T0=-1), dict(K=0), dict(lr=0.0), dict(score_K=0)])
def test_invalid_hyperparams(bad):
    with pytest.raises(ValueError):
        HyperParams(**bad)


def test_batch_schedule_examples():
    hp = HyperParams()
    assert batch_size_at(1, hp) == 128
    assert batch_size_at(2, hp) == 131
    assert batch_size_at(80, hp) == 1322
    assert batch_size_at(80, hp, n=683) == 683
    assert batch_size_at(5, HyperParams(n0=100, gamma=1.1)) == math.floor(100 * 1.1 ** 4)
    assert batch_size_at(3, HyperParams(n0=100, gamma=1.1)) == 121
    with pytest.raises(ValueError):
        batch_size_at(0, hp)


@given(st.integers(1, 500), st.decimals("1.00", "1.20", places=2), st.integers(1, 120))
def test_batch_schedule_matches_exact_arithmetic(n0, gamma, t):
    assume(n0 * float(gamma) ** (t - 1) < 1e7)  # batch sizes beyond any dataset are capped anyway
    assert batch_size_at(t, HyperParams(n0=n0, gamma=float(gamma))) == max(1, schedule(n0, float(gamma), t))


def test_quantile_examples():
    assert quantile_threshold([0.3] * 7, 0.5) == 0.3
    assert quantile_threshold(np.arange(1, 11) / 10, 0.92) == 1.0
    assert quantile_threshold([3.0, 1.0, 2.0], 1.0) == 3.0
    with pytest.raises(ValueError):
        quantile_threshold([], 0.5)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=60),
       st.floats(0.01, 1.0))
def test_quantile_matches_sort_oracle(values, rho):
    assert quantile_threshold(values, rho) == nearest_rank_quantile(values, rho)


def test_quantile_keeps_exact_share_of_distinct_values():
    v = np.random.default_rng(0).uniform(size=100)
    tau = quantile_threshold(v, 0.92)
    assert (v <= tau).sum() == 92


def test_truncated_loss_examples():
    value, mask = truncated_loss([0.2, 0.4, 0.6, 0.8], 0.5)
    assert value == pytest.approx(0.3)
    assert mask.tolist() == [True, True, False, False]
    value, mask = truncated_loss([1.0, 2.0], 5.0)
    assert value == 1.5 and mask.all()
    with pytest.raises(ValueError):
        truncated_loss([1.0, 2.0], 0.5)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=60), st.floats(0.01, 1.0))
def test_truncated_loss_matches_filter_then_mean(values, rho):
    tau = quantile_threshold(values, rho)
    got, mask = truncated_loss(values, tau)
    kept = [v for v in values if v <= tau]
    assert got == np.mean(kept)
    assert mask.tolist() == [v <= tau for v in values]


def test_score_accumulator():
    acc = ScoreAccumulator(2)
    with pytest.raises(ValueError):
        acc.mean()
    acc.add(np.array([1.0, 2.0]))
    acc.add(np.array([3.0, 6.0]))
    np.testing.assert_array_equal(acc.mean(), [2.0, 4.0])
    assert acc.passes == 2


def test_streams_are_independent_and_reproducible():
    a = stream(1, 0, 2).standard_normal(3)
    assert np.array_equal(a, stream(1, 0, 2).standard_normal(3))
    assert not np.array_equal(a, stream(1, 0, 3).standard_normal(3))
    assert not np.array_equal(a, stream(1, 1, 2).standard_normal(3))


def test_draw_batch_without_replacement():
    tr = Trainer(3, HyperParams(**SMALL))
    idx = tr.draw_batch(50, 20)
    assert len(set(idx.tolist())) == 20 and idx.max() < 50
    np.testing.assert_array_equal(tr.draw_batch(10, 30), np.arange(10))


def test_trace_follows_the_schedule(synth):
    hp = HyperParams(n0=64, gamma=1.1, **SMALL)
    res = train(synth.X, hp, labels=synth.labels)
    assert len(res.trace) == hp.T2
    for row in res.trace.rows:
        assert row["n_t"] == batch_size_at(row["t"], hp, synth.n)
        # continuous losses are distinct, so the nearest rank keeps exactly ceil(rho * n_t)
        assert row["kept"] == math.ceil(hp.rho * row["n_t"])
    auc = res.trace.column("auc")
    assert np.all(np.isnan(auc[: hp.T1])) and np.all(np.isfinite(auc[hp.T1:]))
    assert auc[-1] == roc_auc(res.scores, synth.labels)
    assert len(res.snapshots) == hp.T2 - hp.T1


def test_training_is_deterministic(synth):
    hp = HyperParams(seed=4, **SMALL)
    a = train(synth.X, hp).scores
    b = train(synth.X, hp).scores
    assert np.array_equal(a, b)
    assert not np.array_equal(a, train(synth.X, hp.replace(seed=5)).scores)


def test_full_rho_and_unit_gamma_keep_everything(synth):
    res = train(synth.X, HyperParams(gamma=1.0, rho=1.0, **SMALL))
    assert all(r["kept"] == r["n_t"] == 128 for r in res.trace.rows)


def test_heldout_on_training_rows_reproduces_scores(synth):
    res = train(synth.X, HyperParams(seed=2, **SMALL))
    assert np.array_equal(score_heldout(res, synth.X), res.scores)
    assert score_heldout(res, np.zeros((0, synth.n_features))).shape == (0,)
    with pytest.raises(ValueError):
        score_heldout(res, np.zeros((3, synth.n_features + 1)))


def test_heldout_outlier_scores_above_central_inlier():
    ds = gen_synthetic(SynthSpec(n=1000, D=6, alpha=0.0, seed=3))
    scaled = minmax_scale(ds)
    res = train(scaled.X, HyperParams(seed=0, T0=10, T1=30, T2=40))
    centre = np.median(scaled.X, axis=0, keepdims=True)
    far = np.full((1, 6), 2.5)
    s = score_heldout(res, np.vstack([centre, far]))
    assert s[1] > s[0]


def test_dp_first_update_keeps_everything_then_uses_previous_quantile(synth):
    hp = HyperParams(seed=1, dp=DpConfig(enabled=True), **SMALL)
    res = train(synth.X, hp)
    rows = res.trace.rows
    assert rows[0]["tau"] == math.inf and rows[0]["kept"] == rows[0]["n_t"]
    assert all(r["kept"] <= r["n_t"] for r in rows)
    assert np.all(np.isfinite(res.scores))


def test_non_finite_input_is_rejected():
    X = np.zeros((10, 2))
    X[3, 1] = np.nan
    with pytest.raises(ValueError):
        train(X, HyperParams(**SMALL))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_abort_reports_the_update():
    X = np.random.default_rng(0).uniform(size=(50, 3))
    X[7] = 1e200
    with pytest.raises(TrainingError) as info:
        train(X, HyperParams(**SMALL))
    assert info.value.update == 1
