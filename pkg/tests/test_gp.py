import numpy as np
import pytest

from gptube.core.gp import (JITTER, Dataset, GpModel, Hyperparams, fit_hyperparameters, kernel_eval,
                            log_marginal_likelihood, posterior_covariance, posterior_mean,
                            posterior_variance, predict, se_kernel)


def _three_point_model(noise=0.0):
    X = np.array([[-1.0], [0.2], [1.1]])
    y = np.array([0.5, -0.3, 0.8])
    return GpModel(Dataset(X, y), [Hyperparams(1.5, (0.7,), noise)])


def _dense_oracle(m, x):
    h = m.hyperparams[0]
    X, y = m.dataset.inputs, m.dataset.targets[:, 0]
    K = se_kernel(h, X, X) + h.diagonal_load * np.eye(len(X))
    k = se_kernel(h, np.atleast_2d(x), X)[0]
    return k @ np.linalg.solve(K, y), h.signal_variance - k @ np.linalg.solve(K, k)


# ------------------------------------------------------------------ #
def test_kernel_at_zero_distance():
    h = Hyperparams(2.3, (0.4, 1.7))
    assert kernel_eval(h, [0.3, -1.0], [0.3, -1.0]) == pytest.approx(2.3)


def test_kernel_hand_value_and_symmetry():
    h = Hyperparams(2.0, (1.0,))
    assert kernel_eval(h, [0.0], [1.0]) == pytest.approx(2.0 * np.exp(-0.5))
    assert kernel_eval(h, [0.0], [1.0]) == kernel_eval(h, [1.0], [0.0])


def test_kernel_decreases_with_distance():
    h = Hyperparams(1.0, (1.0,))
    values = [kernel_eval(h, [0.0], [d]) for d in (0.0, 0.5, 1.0, 3.0, 40.0)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] == pytest.approx(0.0, abs=1e-300)


def test_kernel_dimension_mismatch():
    with pytest.raises(ValueError):
        kernel_eval(Hyperparams(1.0, (1.0, 1.0)), [0.0], [1.0])


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        Hyperparams(0.0, (1.0,))
    with pytest.raises(ValueError):
        Hyperparams(1.0, (1.0, -2.0))
    with pytest.raises(ValueError):
        Hyperparams(1.0, (1.0,), -1e-3)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset([[0.0], [1.0]], [[0.0]])
    with pytest.raises(ValueError):
        Dataset([[0.0], [np.nan]], [[0.0], [1.0]])
    d = Dataset([[0.0, 1.0]], [[2.0]]).append([[1.0, 0.0]], [[3.0]])
    assert (d.size, d.n_state, d.n_control) == (2, 1, 1)


def test_model_rejects_wrong_hyperparameter_count(model_2d):
    with pytest.raises(ValueError):
        GpModel(model_2d.dataset, model_2d.hyperparams[:1])


# ------------------------------------------------------------------ #
def test_noiseless_interpolation():
    m = _three_point_model()
    for x, y in zip(m.dataset.inputs, m.dataset.targets[:, 0]):
        assert posterior_mean(m, x)[0] == pytest.approx(y, abs=1e-6)
        # the diagonal jitter is the only source of variance at a training input
        assert 0.0 <= posterior_variance(m, x)[0] <= 2.0 * JITTER * 1.5


def test_prior_reversion_far_from_data():
    m = _three_point_model()
    assert posterior_mean(m, [50.0])[0] == pytest.approx(0.0, abs=1e-12)
    assert posterior_variance(m, [50.0])[0] == pytest.approx(1.5)


@pytest.mark.parametrize("x", [-2.0, -0.4, 0.0, 0.65, 1.9])
def test_matches_dense_solve(x):
    m = _three_point_model(noise=1e-3)
    mean, var = _dense_oracle(m, [x])
    assert posterior_mean(m, [x])[0] == pytest.approx(mean, rel=1e-9, abs=1e-12)
    assert posterior_variance(m, [x])[0] == pytest.approx(var, rel=1e-9, abs=1e-12)


def test_batched_prediction_matches_single_points(model_2d):
    X = np.array([[0.1, -0.3], [0.7, 0.7], [-0.9, 0.2]])
    mean, var = predict(model_2d, X)
    for row, mu, v in zip(X, mean, var):
        assert np.allclose(posterior_mean(model_2d, row), mu)
        assert np.allclose(posterior_variance(model_2d, row), v)


def test_posterior_covariance_diagonal_is_variance(model_1d):
    x = np.array([0.37])
    assert posterior_covariance(model_1d, x, x)[0] == pytest.approx(posterior_variance(model_1d, x)[0])


def test_non_finite_input_rejected(model_1d):
    with pytest.raises(ValueError):
        posterior_mean(model_1d, [np.inf])


def test_variance_never_negative(model_2d, rng):
    X = rng.uniform(-3, 3, size=(500, 2))
    _, var = predict(model_2d, X)
    assert np.all(var >= 0)
    assert np.all(var <= 1.0)


def test_extra_data_never_increases_variance(rng):
    h = Hyperparams(1.0, (0.6,), 1e-3)
    for _ in range(20):
        X = rng.uniform(-2, 2, size=(8, 1))
        d = Dataset(X, np.cos(X[:, 0]))
        bigger = d.append(rng.uniform(-2, 2, size=(1, 1)), [[0.0]])
        tests = np.linspace(-3, 3, 41)[:, None]
        before = predict(GpModel(d, [h]), tests)[1]
        after = predict(GpModel(bigger, [h]), tests)[1]
        assert np.all(after <= before + 1e-12)


# ------------------------------------------------------------------ #
def test_log_marginal_likelihood_dense_oracle():
    m = _three_point_model(noise=0.01)
    h = m.hyperparams[0]
    X, y = m.dataset.inputs, m.dataset.targets[:, 0]
    K = se_kernel(h, X, X) + h.diagonal_load * np.eye(3)
    sign, logdet = np.linalg.slogdet(K)
    expected = -0.5 * y @ np.linalg.solve(K, y) - 0.5 * logdet - 1.5 * np.log(2 * np.pi)
    assert sign > 0
    assert log_marginal_likelihood(m)[0] == pytest.approx(expected, rel=1e-10)


def test_log_marginal_likelihood_drops_with_absurd_noise(model_1d):
    h = model_1d.hyperparams[0]
    noisy = model_1d.with_hyperparams([h.with_noise(1e4)])
    assert log_marginal_likelihood(noisy)[0] < log_marginal_likelihood(model_1d)[0]


# ------------------------------------------------------------------ #
def test_fit_is_deterministic_under_seed(rng):
    X = rng.uniform(-2, 2, size=(30, 1))
    d = Dataset(X, np.sin(2 * X[:, 0]))
    a, _ = fit_hyperparameters(d, restarts=2, seed=5)
    b, _ = fit_hyperparameters(d, restarts=2, seed=5)
    assert a == b


def test_fit_recovers_lengthscale():
    gen = np.random.default_rng(0)
    X = gen.uniform(-5, 5, size=(200, 1))
    h = Hyperparams(1.0, (1.0,))
    K = se_kernel(h, X, X) + 1e-6 * np.eye(len(X))
    f = np.linalg.cholesky(K) @ gen.standard_normal(len(X))
    y = f + 0.1 * gen.standard_normal(len(X))
    (fitted,), report = fit_hyperparameters(Dataset(X, y), restarts=2, seed=0)
    assert 0.5 <= fitted.lengthscales[0] <= 2.0
    assert np.isfinite(report.log_likelihood[0])


def test_fit_constant_targets_stays_finite():
    X = np.linspace(-1, 1, 12)[:, None]
    (fitted,), report = fit_hyperparameters(Dataset(X, np.full(12, 0.7)), restarts=1, seed=0)
    assert np.isfinite(fitted.signal_variance) and fitted.signal_variance > 0
    assert all(np.isfinite(l) and l > 0 for l in fitted.lengthscales)
    assert fitted.noise_variance >= 0
    assert len(report.successful_restarts) == 1


def test_fit_needs_two_points():
    with pytest.raises(ValueError):
        fit_hyperparameters(Dataset([[0.0]], [[1.0]]))
