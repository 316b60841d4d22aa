import numpy as np
import pytest

from gptube.core.control import ControlInput, Policy
from gptube.core.gp import posterior_mean, posterior_variance, predict
from gptube.core.moment_matching import GaussianBelief, clip_psd, mm_rollout, mm_step, predict_moments
from gptube.core.predictors import MeanPredictor, MomentMatchingPredictor, make_predictor

N_MC = 200_000


def _mc(m, mean, cov, seed=0):
    x = np.random.default_rng(seed).multivariate_normal(mean, cov, size=N_MC)
    mu, var = predict(m, x)
    return x, mu, var


def _within(value, samples, z=4.0):
    """|value − mean(samples)| within z standard errors."""
    se = samples.std() / np.sqrt(samples.size)
    return abs(value - samples.mean()) <= z * se + 1e-9


# ------------------------------------------------------------------ #
def test_zero_input_covariance_is_the_posterior(model_2d):
    x = np.array([0.1, -0.2])
    M, S, V = predict_moments(model_2d, x, np.zeros((2, 2)))
    assert np.allclose(M, posterior_mean(model_2d, x), atol=1e-9)
    assert np.allclose(np.diag(S), posterior_variance(model_2d, x), atol=1e-9)
    assert S[0, 1] == pytest.approx(0.0, abs=1e-9)
    assert np.allclose(V, 0.0)


def test_monte_carlo_one_dimensional(model_1d):
    M, S, V = predict_moments(model_1d, np.array([0.3]), np.array([[0.04]]))
    x, mu, var = _mc(model_1d, [0.3], [[0.04]])
    assert _within(M[0], mu[:, 0])
    assert _within(S[0, 0], var[:, 0] + (mu[:, 0] - mu[:, 0].mean()) ** 2)
    assert _within(V[0, 0], (x[:, 0] - x[:, 0].mean()) * (mu[:, 0] - mu[:, 0].mean()))


def test_monte_carlo_two_dimensional_with_cross_terms(model_2d):
    mean, cov = np.array([0.2, -0.1]), np.array([[0.04, 0.01], [0.01, 0.09]])
    M, S, V = predict_moments(model_2d, mean, cov)
    x, mu, var = _mc(model_2d, mean, cov, seed=1)
    dmu, dx = mu - mu.mean(axis=0), x - x.mean(axis=0)
    for a in range(2):
        assert _within(M[a], mu[:, a])
        assert _within(S[a, a], var[:, a] + dmu[:, a] ** 2)
        for d in range(2):
            assert _within(V[d, a], dx[:, d] * dmu[:, a])
    # outputs are independent given the input, so only the mean couples them
    assert _within(S[0, 1], dmu[:, 0] * dmu[:, 1])
    assert S[0, 1] == S[1, 0]


def test_linear_policy_matches_monte_carlo(controlled_model):
    policy = Policy.linear([[-0.5]])
    nxt = mm_step(controlled_model, GaussianBelief([0.2], [[0.05]]), policy)
    x = np.random.default_rng(2).normal(0.2, np.sqrt(0.05), size=N_MC)[:, None]
    mu, var = predict(controlled_model, np.hstack([x, -0.5 * x]))
    assert _within(nxt.mean[0], mu[:, 0])
    assert _within(nxt.covariance[0, 0], var[:, 0] + (mu[:, 0] - mu[:, 0].mean()) ** 2)


def test_fixed_control_input(controlled_model):
    nxt = mm_step(controlled_model, GaussianBelief([0.3], [[0.0]]), [0.4])
    assert nxt.mean[0] == pytest.approx(posterior_mean(controlled_model, [0.3, 0.4])[0], abs=1e-9)
    with pytest.raises(ValueError):
        mm_step(controlled_model, GaussianBelief([0.3], [[0.0]]), None)


def test_sine_policy_is_rejected(controlled_model):
    with pytest.raises(ValueError):
        mm_step(controlled_model, GaussianBelief([0.0], [[0.01]]), Policy.sine([[1.0]]))


def test_noise_and_cross_covariance_switches(model_2d):
    mean, cov = np.zeros(2), np.eye(2) * 0.02
    _, S, _ = predict_moments(model_2d, mean, cov)
    _, S_noisy, _ = predict_moments(model_2d, mean, cov, include_noise=True)
    _, S_diag, _ = predict_moments(model_2d, mean, cov, cross_covariance=False)
    assert np.allclose(S_noisy - S, np.eye(2) * 1e-4)
    assert S_diag[0, 1] == 0.0
    assert np.allclose(np.diag(S_diag), np.diag(S))


def test_input_shape_checked(model_2d):
    with pytest.raises(ValueError):
        predict_moments(model_2d, np.zeros(3), np.eye(3))


# ------------------------------------------------------------------ #
def test_rollout_lengths(model_1d):
    init = GaussianBelief([0.5], [[0.01]])
    assert mm_rollout(model_1d, init, None, 0) == [init]
    beliefs = mm_rollout(model_1d, init, None, 3)
    assert len(beliefs) == 4
    first = mm_step(model_1d, init)
    assert np.allclose(beliefs[1].mean, first.mean)
    assert np.allclose(beliefs[1].covariance, first.covariance)


def test_rollout_checks_sequence_length(controlled_model):
    with pytest.raises(ValueError):
        mm_rollout(controlled_model, GaussianBelief([0.0], [[0.01]]), [[0.1], [0.2]], 3)
    with pytest.raises(ValueError):
        mm_rollout(controlled_model, GaussianBelief([0.0], [[0.01]]), None, -1)


# ------------------------------------------------------------------ #
def test_clip_psd():
    good = np.array([[2.0, 0.5], [0.5, 1.0]])
    cov, magnitude = clip_psd(good)
    assert magnitude == 0.0 and np.allclose(cov, good)
    cov, magnitude = clip_psd(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert magnitude == pytest.approx(1.0)
    assert np.linalg.eigvalsh(cov).min() >= -1e-12


def test_belief_validation():
    b = GaussianBelief([0.0, 1.0], [0.04, 0.09])
    assert np.allclose(b.covariance, np.diag([0.04, 0.09]))
    lo, hi = b.band(2.0)
    assert np.allclose(lo, [-0.4, 0.4]) and np.allclose(hi, [0.4, 1.6])
    with pytest.raises(ValueError):
        GaussianBelief([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        GaussianBelief([0.0], [[1.0, 0.0], [0.0, 1.0]])


# ------------------------------------------------------------------ #
def test_make_predictor():
    assert isinstance(make_predictor("mean"), MeanPredictor)
    assert isinstance(make_predictor("moment-matching"), MomentMatchingPredictor)
    with pytest.raises(ValueError):
        make_predictor("particles")


def test_moment_matching_predictor_needs_linear_controls(controlled_model):
    ctrl = ControlInput(policy=Policy.sine([[1.0]]))
    with pytest.raises(ValueError):
        MomentMatchingPredictor().reset(controlled_model, 0.0, 0.01, ctrl)


def test_predictors_agree_for_point_beliefs(model_1d):
    step = ControlInput().at(0)
    x0 = np.array([0.4])
    mean_next, _ = MeanPredictor().advance(model_1d, 0, x0, step, None)
    mm = MomentMatchingPredictor()
    centre, state = mm.reset(model_1d, x0, 0.0, ControlInput())
    mm_next, _ = mm.advance(model_1d, 0, centre, step, state)
    assert np.allclose(mean_next, mm_next, atol=1e-9)
