import numpy as np
import pytest

from gptube.core.control import Policy
from gptube.core.moment_matching import GaussianBelief, mm_rollout
from gptube.core.regions import Box
from gptube.core.tail_bound import BoundSchedule, StepCertificate
from gptube.core.validation import (SamplingMode, TrajectoryBatch, mm_coverage, per_step_coverage,
                                    sample_gp_trajectories, sample_system_trajectories, summarize,
                                    trajectory_containment, violation_ratio)
from gptube.systems.dynamics import rollout
from gptube.systems.presets import preset


def _schedule(k, horizon, epsilon=0.1, center=0.0):
    steps = [StepCertificate(t=t, k=k, p=0.0, center=np.array([center]),
                             region=Box.around([center], k), half_widths=np.array([k]))
             for t in range(horizon + 1)]
    return BoundSchedule(epsilon, horizon, steps)


@pytest.fixture
def hand_batch():
    states = np.array([[0.0, 0.2, 0.3],
                       [0.0, 0.8, 0.1]])[:, :, None]
    return TrajectoryBatch(states, None, 0, "ground-truth")


@pytest.fixture
def gp_batch(model_1d):
    return sample_gp_trajectories(model_1d, (0.0, 0.01), None, 3, 400, seed=4)


# ------------------------------------------------------------------ #
def test_hand_batch_statistics(hand_batch):
    schedule = _schedule(0.5, 2)
    assert violation_ratio(hand_batch, schedule) == 0.25
    assert per_step_coverage(hand_batch, schedule).tolist() == [1.0, 0.5, 1.0]
    assert trajectory_containment(hand_batch, schedule) == 0.5


def test_extreme_tubes(gp_batch):
    assert violation_ratio(gp_batch, _schedule(1e6, 3)) == 0.0
    assert violation_ratio(gp_batch, _schedule(1e-12, 3)) == 1.0


def test_violation_ratio_is_mean_step_exceedance(gp_batch):
    schedule = _schedule(0.15, 3)
    coverage = per_step_coverage(gp_batch, schedule)
    assert violation_ratio(gp_batch, schedule) == pytest.approx(1.0 - coverage[1:].mean())
    assert trajectory_containment(gp_batch, schedule) <= coverage.min()


def test_schedule_must_match_horizon(gp_batch):
    with pytest.raises(ValueError):
        violation_ratio(gp_batch, _schedule(0.5, 2))


# ------------------------------------------------------------------ #
def test_sampling_is_reproducible(model_1d):
    a = sample_gp_trajectories(model_1d, (0.0, 0.01), None, 3, 10, seed=4)
    b = sample_gp_trajectories(model_1d, (0.0, 0.01), None, 3, 10, seed=4)
    c = sample_gp_trajectories(model_1d, (0.0, 0.01), None, 3, 10, seed=5)
    assert np.array_equal(a.states, b.states)
    assert not np.allclose(a.states, c.states)
    assert a.mode is SamplingMode.GP_POSTERIOR and a.states.shape == (10, 4, 1)


def test_trajectory_streams_do_not_depend_on_batch_size(model_1d):
    small = sample_gp_trajectories(model_1d, (0.0, 0.01), None, 3, 5, seed=9)
    large = sample_gp_trajectories(model_1d, (0.0, 0.01), None, 3, 10, seed=9)
    assert np.allclose(small.states, large.states[:5])


def test_noiseless_system_batch_follows_the_rollout():
    s = preset("system1").system
    policy = Policy.linear([[-0.2]])
    batch = sample_system_trajectories(s, (1.0, 0.0), policy, 4, 3, include_noise=False)
    expected = rollout(s, [1.0], policy, 4)
    for states in batch.states:
        assert np.allclose(states, expected)
    assert batch.controls.shape == (3, 4, 1)
    assert np.allclose(batch.controls[0, :, 0], -0.2 * expected[:-1, 0])


def test_system_noise_spreads_the_batch():
    s = preset("system1").system
    batch = sample_system_trajectories(s, (1.0, 0.0), Policy.linear([[-0.2]]), 2, 50, seed=1)
    assert batch.states[:, 2, 0].std() > 0


def test_sampling_arguments_checked(model_1d):
    with pytest.raises(ValueError):
        sample_gp_trajectories(model_1d, (0.0, 0.01), None, 3, 0)
    with pytest.raises(ValueError):
        TrajectoryBatch(np.zeros((4, 3)), None, 0, "gp-posterior")


# ------------------------------------------------------------------ #
def test_mm_coverage_limits(model_1d, gp_batch):
    beliefs = mm_rollout(model_1d, GaussianBelief([0.0], [[0.01]]), None, 3)
    assert mm_coverage(gp_batch, beliefs, k=1e6).tolist() == [1.0] * 4
    assert mm_coverage(gp_batch, beliefs, k=0.0).tolist() == [0.0] * 4
    with pytest.raises(ValueError):
        mm_coverage(gp_batch, beliefs, k=-1.0)
    with pytest.raises(ValueError):
        mm_coverage(gp_batch, beliefs[:2])


def test_truncate(gp_batch):
    short = gp_batch.truncate(1)
    assert short.horizon == 1 and short.size == gp_batch.size
    assert np.array_equal(short.states, gp_batch.states[:, :2])
    with pytest.raises(ValueError):
        gp_batch.truncate(4)


def test_summary(model_1d, gp_batch):
    beliefs = mm_rollout(model_1d, GaussianBelief([0.0], [[0.01]]), None, 3)
    summary = summarize(gp_batch, _schedule(1e6, 3), beliefs, preset="synthetic-1d")
    assert summary.sound and summary.violation_ratio == 0.0
    assert summary.soundness_slack == pytest.approx(3.0 * np.sqrt(0.1 / 400))
    d = summary.to_dict()
    assert set(d) == {"preset", "epsilon", "N", "violation_ratio", "per_step_coverage",
                      "trajectory_containment", "mm_coverage", "sound"}
    assert d["N"] == 400 and len(d["mm_coverage"]) == 4


def test_unsound_summary(hand_batch):
    assert not summarize(hand_batch, _schedule(0.5, 2, epsilon=0.01)).sound
