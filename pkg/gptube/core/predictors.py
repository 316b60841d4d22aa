"""
Deterministic centre trajectories x̂_t around which tubes are built.
"""
from abc import ABC, abstractmethod
from typing import Any, Tuple

import numpy as np

from .control import ControlInput, StepControl
from .gp import GpModel, posterior_mean
from .moment_matching import GaussianBelief, mm_control, mm_step


class Predictor(ABC):
    """
    Pure interface: the state a predictor needs between steps travels with
    the certificates, so the same instance can serve several tubes.
    """
    name = "base"

    @abstractmethod
    def reset(self, m: GpModel, mu0, cov0, controls: ControlInput) -> Tuple[np.ndarray, Any]:
        """Returns (x̂_0, state)."""

    @abstractmethod
    def advance(self, m: GpModel, t: int, x_hat: np.ndarray, step: StepControl,
                state: Any) -> Tuple[np.ndarray, Any]:
        """Returns (x̂_{t+1}, state)."""


class MeanPredictor(Predictor):
    """x̂_{t+1} = posterior mean at (x̂_t, u_t)."""
    name = "mean"

    def reset(self, m, mu0, cov0, controls):
        return np.atleast_1d(np.asarray(mu0, dtype=float)), None

    def advance(self, m, t, x_hat, step, state):
        return posterior_mean(m, step.lift_point(x_hat)), None


class MomentMatchingPredictor(Predictor):
    """x̂_t = moment-matching mean of the propagated belief."""
    name = "mm"

    def __init__(self, cross_covariance: bool = True):
        self.cross_covariance = cross_covariance

    def reset(self, m, mu0, cov0, controls):
        if not controls.is_linear:
            raise ValueError("moment-matching predictor needs a linear policy or open-loop controls")
        belief = GaussianBelief(mu0, cov0)
        return belief.mean, belief

    def advance(self, m, t, x_hat, step, state):
        belief = state if state is not None else GaussianBelief(x_hat, np.zeros(np.size(x_hat)))
        nxt = mm_step(m, belief, mm_control(step.source, t), self.cross_covariance)
        return nxt.mean, nxt


def make_predictor(name: str) -> Predictor:
    if name == "mean":
        return MeanPredictor()
    if name in ("mm", "moment-matching"):
        return MomentMatchingPredictor()
    raise ValueError(f"Unsupported predictor: {name}. Supported: mean, mm")
