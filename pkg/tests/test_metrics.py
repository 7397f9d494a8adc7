import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from altbi.metrics import evaluate, kept_outlier_fraction, pr_auc, roc_auc
from oracles import ap_sweep, auc_pairs


def instance(seed, n, ties):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    scores = rng.integers(0, 5, n).astype(float) if ties else rng.normal(size=n)
    return scores, y


@given(st.integers(0, 100_000), st.integers(2, 60), st.booleans())
def test_roc_auc_matches_pairwise_oracle(seed, n, ties):
    s, y = instance(seed, n, ties)
    assert roc_auc(s, y) == auc_pairs(s.tolist(), y.tolist())


@given(st.integers(0, 100_000), st.integers(2, 30), st.booleans())
def test_pr_auc_matches_threshold_sweep(seed, n, ties):
    s, y = instance(seed, n, ties)
    assert pr_auc(s, y) == pytest.approx(ap_sweep(s.tolist(), y.tolist()), rel=1e-12, abs=0)


def test_examples():
    y = np.array([0, 0, 0, 0, 0, 1, 1, 1, 1, 1])
    assert roc_auc(y.astype(float), y) == 1.0
    assert pr_auc(y.astype(float), y) == 1.0
    assert roc_auc(np.ones(10), y) == 0.5
    assert roc_auc(-y.astype(float), y) == 0.0


def test_frozen_six_row_fixture():
    # values from the pairwise and sweep oracles
    s = [0.9, 0.4, 0.4, 0.7, 0.1, 0.4]
    y = [1, 0, 1, 0, 0, 1]
    assert roc_auc(s, y) == 2 / 3
    assert pr_auc(s, y) == pytest.approx(1 / 3 + (2 / 3) * (3 / 5))


@given(st.integers(0, 100_000))
def test_roc_auc_invariant_under_increasing_maps(seed):
    s, y = instance(seed, 40, ties=True)
    base = roc_auc(s, y)
    assert roc_auc(np.exp(s), y) == base
    assert roc_auc(3.0 * s + 11.0, y) == base
    assert roc_auc(s + 100.0, y) == base


@given(st.integers(0, 100_000))
def test_roc_auc_of_negated_scores_is_complement(seed):
    s, y = instance(seed, 40, ties=False)
    assert roc_auc(s, y) + roc_auc(-s, y) == pytest.approx(1.0, abs=1e-15)


@given(st.integers(0, 100_000), st.integers(2, 60))
def test_pr_auc_in_unit_interval(seed, n):
    s, y = instance(seed, n, ties=True)
    assert 0.0 <= pr_auc(s, y) <= 1.0


def expected_random_ap(n_pos, n):
    """Exact mean AP of a uniformly random ranking.

    AP = (1/P) sum_j (1 + #{positives ranked above j}) / rank_j; with E[1/rank] = H_n / n and
    P(r_i < r_j | r_j = r) = (r - 1) / (n - 1) this gives H_n/n + (P - 1)(n - H_n) / (n (n - 1)).
    """
    h = sum(1 / k for k in range(1, n + 1))
    return h / n + (n_pos - 1) * (n - h) / (n * (n - 1))


@pytest.mark.parametrize("n_pos,n", [(20, 100), (500, 5000)])
def test_random_scores_average_precision(n_pos, n):
    rng = np.random.default_rng(n)
    y = np.r_[np.ones(n_pos, int), np.zeros(n - n_pos, int)]
    aps = np.array([pr_auc(rng.uniform(size=n), y) for _ in range(1000)])
    se = aps.std(ddof=1) / np.sqrt(len(aps))
    assert abs(aps.mean() - expected_random_ap(n_pos, n)) < 3 * se


def test_random_average_precision_approaches_prevalence():
    assert expected_random_ap(20, 100) - 0.2 > 0.03
    assert expected_random_ap(500, 5000) - 0.1 < 0.002


@pytest.mark.parametrize("fn", [roc_auc, pr_auc])
def test_errors(fn):
    with pytest.raises(ValueError, match="both classes"):
        fn([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        fn([0.1, 0.2], [1])
    with pytest.raises(ValueError):
        fn([0.1, np.nan], [0, 1])
    with pytest.raises(ValueError):
        fn([0.1, 0.2], [0, 2])


def test_kept_outlier_fraction():
    assert kept_outlier_fraction([1, 1, 0], [0, 0, 1]) == 0.0
    assert kept_outlier_fraction([1, 1, 1, 1, 0], [1, 0, 0, 0, 1]) == 0.25
    labels = np.array([0, 1, 0, 1, 1, 0])
    idx = np.array([1, 2, 5])
    assert kept_outlier_fraction(np.ones(3, bool), labels, idx) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        kept_outlier_fraction([0, 0], [0, 1])


def test_evaluate_bundle():
    r = evaluate([0.1, 0.9, 0.2], [0, 1, 0])
    assert r.as_dict() == {"auc": 1.0, "prauc": 1.0, "n_pos": 1, "n_neg": 2}
