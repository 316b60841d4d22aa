from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from gptube.core.control import ControlInput, Policy
from gptube.core.gp import posterior_mean, se_kernel
from gptube.core.regions import Box
from gptube.core.tail_bound import (BoundSchedule, BoundSettings, InfeasibleStepError, KGrid,
                                    StepCertificate, TubeShape, bound_trajectory, dudley_integral,
                                    initial_certificate, initial_error_probability,
                                    next_error_probability, propagate_step, region_statistics,
                                    safety_check, select_k, sup_tail_probability, tail_probability)

GRID = KGrid("geometric", 1e-3, 10.0, 60).values()


def _dudley_oracle(L, D, n, lam, N=None):
    c = np.sqrt(n if N is None else N) * L * D
    value, _ = integrate.quad(lambda z: np.sqrt(n * np.log(c / z + 1.0)), 0.0, lam, limit=400, epsabs=0.0)
    return 12.0 * value


def _start(settings, k0=0.3):
    return initial_certificate(0.0, 0.01, np.zeros(1), 0.5, GRID, replace(settings, k0=k0))


# ------------------------------------------------------------------ #
def test_recursion_hand_arithmetic():
    assert next_error_probability(0.02, 0.05) == pytest.approx(0.069)
    assert next_error_probability(0.0, 0.03) == pytest.approx(0.03)
    assert next_error_probability(0.04, 0.0) == 0.04


def test_recursion_monotone_on_random_pairs(rng):
    p, q = rng.uniform(size=1000), rng.uniform(size=1000)
    nxt = np.array([next_error_probability(a, b) for a, b in zip(p, q)])
    assert np.all(nxt >= p) and np.all(nxt >= q) and np.all(nxt <= 1.0)
    larger = np.array([next_error_probability(a, min(1.0, b + 0.1)) for a, b in zip(p, q)])
    assert np.all(larger >= nxt)


# ------------------------------------------------------------------ #
def test_initial_probability_one_dimensional_oracle():
    p = initial_error_probability(0.0, 0.01, 0.0, 0.196)
    assert p == pytest.approx(1.0 - (norm.cdf(1.96) - norm.cdf(-1.96)), rel=1e-9)
    assert p == pytest.approx(0.05, abs=1e-3)


def test_initial_probability_vanishes_for_huge_radius():
    assert initial_error_probability([0.0, 0.0], np.eye(2) * 0.01, [0.0, 0.0], 1e3) == pytest.approx(0.0, abs=1e-15)


def test_initial_probability_sound_for_l1_ball(rng):
    cov = np.diag([0.01, 0.02])
    p = initial_error_probability([0.0, 0.0], cov, [0.0, 0.0], 0.3)
    x = rng.multivariate_normal([0.0, 0.0], cov, size=200_000)
    assert p >= np.mean(np.abs(x).sum(axis=1) > 0.3)


def test_initial_probability_box_tube():
    p = initial_error_probability([0.0, 0.0], [0.01, 0.04], [0.0, 0.0], [0.2, 0.4], TubeShape.BOX)
    inside = (norm.cdf(2.0) - norm.cdf(-2.0)) ** 2
    assert p == pytest.approx(1.0 - inside)


def test_initial_probability_needs_diagonal_covariance():
    with pytest.raises(ValueError):
        initial_error_probability([0.0, 0.0], [[0.01, 0.005], [0.005, 0.01]], [0.0, 0.0], 0.3)


# ------------------------------------------------------------------ #
def test_dudley_zero_radius():
    assert dudley_integral(1.0, 1.0, 1, 0.0) == 0.0


def test_dudley_matches_quadrature_from_above():
    value = dudley_integral(1.0, 1.0, 1, 1.0)
    oracle = _dudley_oracle(1.0, 1.0, 1, 1.0)
    assert oracle * (1 - 1e-9) <= value <= oracle * 1.005


def test_dudley_monotone_in_lipschitz():
    values = [dudley_integral(L, 0.5, 2, 0.3) for L in (0.25, 0.5, 1.0, 2.0, 4.0)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_dudley_random_tuples():
    gen = np.random.default_rng(7)
    for _ in range(100):
        L, D, lam = gen.uniform(0.1, 10.0), gen.uniform(0.01, 2.0), gen.uniform(0.01, 1.0)
        n = int(gen.integers(1, 4))
        value, oracle = dudley_integral(L, D, n, lam), _dudley_oracle(L, D, n, lam)
        assert value >= oracle * (1 - 1e-5)
        assert value <= oracle * 1.01


def test_dudley_rejects_negative_arguments():
    with pytest.raises(ValueError):
        dudley_integral(-1.0, 1.0, 1, 1.0)


# ------------------------------------------------------------------ #
def test_tail_probability_deep_and_vacuous(model_1d):
    region = Box([-0.1], [0.1])
    g = posterior_mean(model_1d, [0.0])
    deep = sup_tail_probability(model_1d, region, g, None, 50.0)
    assert deep.q == pytest.approx(0.0, abs=1e-12) and not deep.vacuous
    tiny = sup_tail_probability(model_1d, region, g, None, 1e-9)
    assert tiny.q == 1.0 and tiny.vacuous


def test_tail_probability_monotone_in_radius(model_2d):
    step = ControlInput().at(0)
    stats = region_statistics(model_2d, Box([-0.2, -0.2], [0.2, 0.2]),
                              posterior_mean(model_2d, [0.0, 0.0]), step)
    qs = [tail_probability(stats, k)[0] for k in np.geomspace(1e-3, 10.0, 40)]
    assert all(a >= b for a, b in zip(qs, qs[1:]))


def test_tail_probability_sound_against_path_samples(prior_model):
    region = Box([-0.2], [0.2])
    est = sup_tail_probability(prior_model, region, np.zeros(1), None, 100.0)
    s = est.stats
    k = float(s.sup_mean[0] + s.dudley[0] + 1.5 * np.sqrt(s.xi[0]))
    q = tail_probability(s, k)[0]
    assert 0.0 < q < 1.0

    xs = np.linspace(-0.2, 0.2, 50)[:, None]
    K = se_kernel(prior_model.hyperparams[0], xs, xs) + 1e-9 * np.eye(50)
    paths = np.random.default_rng(3).standard_normal((10_000, 50)) @ np.linalg.cholesky(K).T
    assert np.mean(np.abs(paths).max(axis=1) > k) <= q


# ------------------------------------------------------------------ #
def test_propagate_step_applies_the_recursion(model_1d):
    settings = BoundSettings()
    prev = _start(settings)
    cert = propagate_step(prev, model_1d, None, None, 0.05, settings)
    assert cert.t == 1
    assert cert.p == pytest.approx(cert.q * (1.0 - prev.p) + prev.p)
    assert np.allclose(cert.center, posterior_mean(model_1d, prev.center))


def test_select_k_with_trivial_tolerance(model_1d):
    settings = BoundSettings()
    k, cert = select_k(_start(settings), model_1d, None, None, 1.0, [0.01, 0.1, 1.0], settings)
    assert k == 0.01 and cert.k == 0.01


def test_select_k_tighter_tolerance_needs_larger_radius(model_1d):
    settings = BoundSettings()
    prev = _start(settings)
    k_loose, _ = select_k(prev, model_1d, None, None, 0.2, GRID, settings)
    k_tight, _ = select_k(prev, model_1d, None, None, 0.05, GRID, settings)
    assert k_tight >= k_loose


def test_select_k_matches_linear_scan(model_1d):
    settings = BoundSettings()
    prev = _start(settings)
    k, cert = select_k(prev, model_1d, None, None, 0.1, GRID, settings)
    center = posterior_mean(model_1d, prev.center)
    stats = region_statistics(model_1d, prev.region, center, ControlInput().at(0), settings)
    scan = next(g for g in GRID
                if next_error_probability(prev.p, tail_probability(stats, g)[0]) < 0.1)
    assert k == scan
    assert cert.p < 0.1


def test_infeasible_step_carries_best_pair(model_1d):
    settings = BoundSettings()
    with pytest.raises(InfeasibleStepError) as info:
        select_k(_start(settings), model_1d, None, None, 0.1, [1e-6, 2e-6], settings)
    assert info.value.t == 1
    assert info.value.best_k == 2e-6
    assert info.value.best_p == 1.0


# ------------------------------------------------------------------ #
def test_single_step_trajectory(model_1d):
    schedule = bound_trajectory(model_1d, (0.0, 0.01), None, horizon=1, epsilon=0.1)
    assert len(schedule) == 2 and schedule.complete
    assert np.all(schedule.probabilities < 0.1)
    assert schedule.steps[0].p <= 0.2 * 0.1


def test_trajectory_probabilities_accumulate(model_1d):
    schedule = bound_trajectory(model_1d, (0.0, 0.01), None, horizon=4, epsilon=0.1)
    p = schedule.probabilities
    assert np.all(np.diff(p) >= 0) and np.all(p < 0.1)
    assert [s.t for s in schedule.steps] == [0, 1, 2, 3, 4]


def test_box_tube_in_two_dimensions(model_2d):
    settings = BoundSettings(tube=TubeShape.BOX)
    schedule = bound_trajectory(model_2d, (np.zeros(2), np.eye(2) * 0.005), None, horizon=2,
                                epsilon=0.2, settings=settings)
    assert schedule.half_widths.shape == (3, 2)
    assert np.all(schedule.probabilities < 0.2)
    assert schedule.tube is TubeShape.BOX


def test_closed_loop_trajectory(controlled_model):
    policy = Policy.linear([[-0.5]])
    schedule = bound_trajectory(controlled_model, (0.0, 0.005), policy, horizon=2, epsilon=0.1)
    assert schedule.complete
    assert schedule.centers[1, 0] == pytest.approx(
        posterior_mean(controlled_model, [0.0, 0.0])[0])


def test_moment_matching_predictor_centres(model_1d):
    schedule = bound_trajectory(model_1d, (0.3, 0.01), None, horizon=2, epsilon=0.1,
                                settings=BoundSettings(predictor="mm"))
    assert schedule.complete
    assert schedule.steps[2].predictor_state is not None


def test_infeasible_trajectory_keeps_partial_schedule(model_1d):
    settings = BoundSettings(k0=0.3, grid=KGrid("linear", 1e-6, 2e-6, 2))
    with pytest.raises(InfeasibleStepError) as info:
        bound_trajectory(model_1d, (0.0, 0.01), None, horizon=3, epsilon=0.1, settings=settings)
    partial = info.value.partial
    assert isinstance(partial, BoundSchedule)
    assert len(partial) == 1 and not partial.complete
    assert partial.diagnosis.startswith("step 1")


def test_horizon_must_be_positive(model_1d):
    with pytest.raises(ValueError):
        bound_trajectory(model_1d, (0.0, 0.01), None, horizon=0)


# ------------------------------------------------------------------ #
def test_certificate_membership():
    l1 = StepCertificate(t=1, k=0.5, p=0.01, center=np.zeros(2), region=Box.around(np.zeros(2), 0.5),
                         half_widths=np.full(2, 0.5))
    assert l1.contains([0.2, 0.2]) and not l1.contains([0.3, 0.3])
    box = StepCertificate(t=1, k=0.5, p=0.01, center=np.zeros(2), region=Box.around(np.zeros(2), [0.5, 0.1]),
                          half_widths=np.array([0.5, 0.1]), tube=TubeShape.BOX)
    assert box.contains([0.45, 0.05]) and not box.contains([0.1, 0.2])


def test_safety_check_reports_first_violation():
    steps = [StepCertificate(t=t, k=0.1, p=0.0, center=np.array([c]), region=Box.around([c], 0.1),
                             half_widths=np.array([0.1])) for t, c in enumerate((0.0, 0.5, 0.95))]
    report = safety_check(BoundSchedule(0.1, 2, steps), Box([-1.0], [1.0]))
    assert not report.safe and report.first_violation == 2
    assert report.margins[0] == pytest.approx(0.9)


def test_k_grid_values():
    assert KGrid("linear", 0.0005, 2.0, step=0.0005).values().size == 4000
    assert KGrid("geometric", 1e-3, 10.0, 60).values()[-1] == pytest.approx(10.0)
    with pytest.raises(ValueError):
        KGrid("cubic").values()
