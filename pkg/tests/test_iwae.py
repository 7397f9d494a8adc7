import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from altbi.iwae import IwaeModel, NonFiniteLossError, batch_losses, default_latent_dim, per_sample_loss
from oracles import central_difference, iwae_loss_reference


def tiny_model(seed, D=4, dz=2, K=2, hidden=(5, 3)):
    rng = np.random.default_rng(seed)
    return IwaeModel(D, latent_dim=dz, n_samples=K, encoder_hidden=hidden, decoder_hidden=hidden[::-1], rng=rng)


@pytest.mark.parametrize("D,expected", [(1, 2), (8, 2), (9, 3), (32, 8), (166, 32), (500, 32)])
def test_default_latent_dim(D, expected):
    assert default_latent_dim(D) == expected


def test_initialisation_shapes_and_ranges():
    m = IwaeModel(9, rng=np.random.default_rng(0))
    assert m.params["enc0.W"].shape == (9, 100)
    assert m.params["enc1.W"].shape == (100, 50)
    assert m.params["enc_mu.W"].shape == (50, 3)
    assert m.params["dec0.W"].shape == (3, 50)
    assert m.params["dec_logvar.W"].shape == (100, 9)
    assert np.all(m.params["dec0.b"] == 0.0)
    limit = math.sqrt(6.0 / (9 + 100))
    assert np.abs(m.params["enc0.W"]).max() <= limit


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_loss_matches_direct_density_evaluation(seed, K):
    m = tiny_model(seed, K=K)
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(size=4)
    eps = m.draw_noise(1, rng)
    loss, _, _ = per_sample_loss(m, x, eps=eps)
    assert loss == pytest.approx(iwae_loss_reference(m, x, eps), rel=1e-10)


def test_single_sample_loss_is_negative_elbo_term():
    m = tiny_model(3, K=1)
    x = np.array([0.1, 0.5, 0.9, 0.3])
    eps = np.array([[[0.4, -1.2]]])
    loss, _, _ = per_sample_loss(m, x, eps=eps)
    assert loss == pytest.approx(iwae_loss_reference(m, x, eps), rel=1e-12)


def test_expected_loss_decreases_with_more_importance_samples():
    m = tiny_model(5, D=4, dz=2)
    x = np.full((1, 4), 0.5)
    rng = np.random.default_rng(0)
    means = []
    for K in (1, 5, 50):
        X = np.repeat(x, 2000, axis=0)
        means.append(m.losses(X, rng=rng, n_samples=K).mean())
    assert means[0] > means[1] > means[2]


def test_gradients_match_finite_differences():
    m = tiny_model(11, D=3, dz=2, K=3, hidden=(4,))
    x = np.array([0.2, 0.7, 0.4])
    eps = m.draw_noise(1, np.random.default_rng(1))

    def f(params):
        return per_sample_loss(m.with_params(params), x, eps=eps)[0]

    _, tape, root = per_sample_loss(m, x, eps=eps)
    grads = tape.backward(root)
    fd = central_difference(f, {k: v.copy() for k, v in m.params.items()})
    for name in m.params:
        np.testing.assert_allclose(grads[name], fd[name], rtol=1e-4, atol=1e-8, err_msg=name)


def test_batch_losses_equal_row_by_row():
    m = tiny_model(7)
    rng = np.random.default_rng(2)
    X = rng.uniform(size=(6, 4))
    eps = m.draw_noise(6, rng)
    batch = batch_losses(m, X, eps=eps)
    single = [per_sample_loss(m, X[i], eps=eps[i])[0] for i in range(6)]
    np.testing.assert_allclose(batch, single, rtol=1e-12)


def test_batch_losses_are_permutation_equivariant():
    m = tiny_model(8)
    rng = np.random.default_rng(3)
    X = rng.uniform(size=(10, 4))
    eps = m.draw_noise(10, rng)
    perm = rng.permutation(10)
    np.testing.assert_allclose(batch_losses(m, X[perm], eps=eps[perm]), batch_losses(m, X, eps=eps)[perm],
                               rtol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    m = tiny_model(4)
    path = tmp_path / "model.npz"
    m.save(path)
    loaded = IwaeModel.load(path)
    assert loaded.config() == m.config()
    X = np.random.default_rng(0).uniform(size=(5, 4))
    eps = m.draw_noise(5, np.random.default_rng(1))
    np.testing.assert_array_equal(loaded.losses(X, eps=eps), m.losses(X, eps=eps))


def test_checkpoint_with_wrong_format_is_rejected(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, __meta__=np.array('{"format": "other", "version": 1}'))
    with pytest.raises(ValueError, match="unsupported checkpoint"):
        IwaeModel.load(path)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_the_sample():
    m = tiny_model(0)
    X = np.zeros((3, 4))
    X[2, 1] = 1e200
    with pytest.raises(NonFiniteLossError) as info:
        m.losses(X, rng=np.random.default_rng(0))
    assert info.value.index == 2


def test_input_width_is_checked():
    m = tiny_model(0)
    with pytest.raises(ValueError):
        m.losses(np.zeros((2, 5)), rng=np.random.default_rng(0))


def test_invalid_construction():
    with pytest.raises(ValueError):
        IwaeModel(0)
    with pytest.raises(ValueError):
        IwaeModel(3, n_samples=0)


def test_duplicated_rows_with_identical_noise_have_identical_losses():
    m = tiny_model(2)
    x = np.random.default_rng(0).uniform(size=(1, 4))
    eps = np.repeat(m.draw_noise(1, np.random.default_rng(1)), 3, axis=0)
    losses = m.losses(np.repeat(x, 3, axis=0), eps=eps)
    assert losses[0] == losses[1] == losses[2]


def test_losses_and_gradients_stay_finite_on_the_unit_cube():
    rng = np.random.default_rng(4)
    largest = 0.0
    for seed in range(100):
        m = IwaeModel(6, n_samples=2, encoder_hidden=(10, 5), decoder_hidden=(5, 10), rng=np.random.default_rng(seed))
        x = rng.uniform(size=6)
        loss, tape, root = per_sample_loss(m, x, rng=rng)
        g = tape.backward(root)
        norm = math.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
        assert math.isfinite(loss) and math.isfinite(norm)
        largest = max(largest, norm)
    assert largest < 1e6


def test_loss_moves_at_most_gradient_bound_times_step():
    m = tiny_model(6)
    x = np.array([0.3, 0.6, 0.1, 0.8])
    eps = m.draw_noise(1, np.random.default_rng(2))
    loss, tape, root = per_sample_loss(m, x, eps=eps)
    g = tape.backward(root)
    G = math.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
    rng = np.random.default_rng(3)
    for _ in range(20):
        delta = {k: rng.normal(size=v.shape) * 1e-6 for k, v in m.params.items()}
        size = math.sqrt(sum(float(np.sum(d * d)) for d in delta.values()))
        moved = per_sample_loss(m.with_params({k: v + delta[k] for k, v in m.params.items()}), x, eps=eps)[0]
        assert abs(moved - loss) <= 2 * G * size
