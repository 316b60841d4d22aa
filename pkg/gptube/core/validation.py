"""
Monte-Carlo checks of certified tubes: trajectory sampling from the GP or
from a ground-truth system, and coverage statistics.

Each trajectory owns an RNG stream spawned from the batch seed, so results
do not depend on how trajectories are grouped or ordered.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .control import ControlInput
from .gp import GpModel, predict
from .moment_matching import GaussianBelief
from .tail_bound import BoundSchedule
from ..systems.dynamics import SystemSpec, step

logger = logging.getLogger(__name__)


class SamplingMode(Enum):
    GP_POSTERIOR = "gp-posterior"
    GROUND_TRUTH = "ground-truth"


@dataclass(eq=False)
class TrajectoryBatch:
    states:        np.ndarray               # (N, H+1, n)
    controls:      Optional[np.ndarray]     # (N, H, m)
    seed:          int
    mode:          SamplingMode
    include_noise: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 3:
            raise ValueError(f"states must be (N, H+1, n), got shape {self.states.shape}")
        self.mode = SamplingMode(self.mode) if not isinstance(self.mode, SamplingMode) else self.mode

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1] - 1

    @property
    def n_state(self) -> int:
        return self.states.shape[2]

    def truncate(self, horizon: int) -> "TrajectoryBatch":
        if not 0 <= horizon <= self.horizon:
            raise ValueError(f"cannot truncate a batch of horizon {self.horizon} to {horizon}")
        controls = None if self.controls is None else self.controls[:, :horizon]
        return TrajectoryBatch(self.states[:, :horizon + 1], controls, self.seed, self.mode,
                               self.include_noise)


# ------------------------------------------------------------------ #
def _cov_root(cov0, n: int) -> np.ndarray:
    cov = np.asarray(cov0, dtype=float)
    if cov.ndim <= 1:
        cov = np.diag(np.broadcast_to(cov, (n,)))
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def _draws(seed: int, N: int, H: int, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Standard normals for x_0 (N, n) and the H steps (N, H, n), one stream per trajectory."""
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(N)]
    z0 = np.array([g.standard_normal(n) for g in streams])
    steps = np.array([g.standard_normal((H, n)) for g in streams])
    return z0, steps


def _simulate(init, controls: ControlInput, H: int, N: int, seed: int,
              transition: Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]):
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if H < 0:
        raise ValueError(f"horizon must be >= 0, got {H}")
    controls.check_horizon(H)
    mu0, cov0 = init
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    n = mu0.size
    z0, z = _draws(seed, N, H, n)
    states = np.empty((N, H + 1, n))
    inputs = np.empty((N, H, controls.n_control))
    states[:, 0] = mu0 + z0 @ _cov_root(cov0, n).T
    for t in range(H):
        u = controls.control(t, states[:, t])
        inputs[:, t] = u
        states[:, t + 1] = transition(t, states[:, t], u, z[:, t])
    return states, inputs


def sample_gp_trajectories(m: GpModel,
                           init,
                           controls,
                           H: int,
                           N: int,
                           seed: int = 0,
                           include_noise: bool = False) -> TrajectoryBatch:
    """x_{t+1} drawn from the per-step posterior predictive at (x_t, u_t), independently per step."""
    ctrl = ControlInput.from_any(controls, m.n_control)
    noise = np.array([h.noise_variance for h in m.hyperparams]) if include_noise else 0.0

    def transition(t, x, u, z):
        mean, var = predict(m, np.concatenate([x, u], axis=1))
        return mean + np.sqrt(var + noise) * z

    states, inputs = _simulate(init, ctrl, H, N, seed, transition)
    return TrajectoryBatch(states, inputs, seed, SamplingMode.GP_POSTERIOR, include_noise)


def sample_system_trajectories(s: SystemSpec,
                               init,
                               controls,
                               H: int,
                               N: int,
                               seed: int = 0,
                               include_noise: bool = True) -> TrajectoryBatch:
    """Same as ``sample_gp_trajectories`` with the ground-truth ``SystemSpec`` step."""
    ctrl = ControlInput.from_any(controls, s.n_control)

    def transition(t, x, u, z):
        return step(s, x, u, noise=z if include_noise else None)

    states, inputs = _simulate(init, ctrl, H, N, seed, transition)
    return TrajectoryBatch(states, inputs, seed, SamplingMode.GROUND_TRUTH, include_noise)


# ------------------------------------------------------------------ #
def _outside(batch: TrajectoryBatch, schedule: BoundSchedule) -> np.ndarray:
    """(N, H+1) mask of states outside the tube."""
    if len(schedule) != batch.horizon + 1:
        raise ValueError(f"schedule covers {len(schedule)} steps, batch has {batch.horizon + 1}")
    if schedule.steps and schedule.steps[0].center.size != batch.n_state:
        raise ValueError("schedule and batch have different state dimensions")
    return np.stack([~np.asarray(s.contains(batch.states[:, s.t]), dtype=bool)
                     for s in schedule.steps], axis=1)


def violation_ratio(batch: TrajectoryBatch, schedule: BoundSchedule) -> float:
    """Fraction of transitions t = 1..H landing outside the tube."""
    if batch.horizon < 1:
        raise ValueError("violation ratio needs at least one transition")
    return float(_outside(batch, schedule)[:, 1:].mean())


def per_step_coverage(batch: TrajectoryBatch, schedule: BoundSchedule) -> np.ndarray:
    """Inside-tube fraction for t = 0..H."""
    return 1.0 - _outside(batch, schedule).mean(axis=0)


def trajectory_containment(batch: TrajectoryBatch, schedule: BoundSchedule) -> float:
    """Fraction of trajectories inside the tube at every step."""
    return float(1.0 - _outside(batch, schedule).any(axis=1).mean())


def mm_coverage(batch: TrajectoryBatch, rollout: Sequence[GaussianBelief], k: float = 2.0) -> np.ndarray:
    """Per-step fraction of samples with every coordinate in mean ± k·σ."""
    if len(rollout) != batch.horizon + 1:
        raise ValueError(f"rollout has {len(rollout)} beliefs, batch has {batch.horizon + 1} steps")
    if k < 0:
        raise ValueError(f"sigma multiplier must be non-negative, got {k}")
    out = np.empty(len(rollout))
    for t, b in enumerate(rollout):
        lo, hi = b.band(k)
        x = batch.states[:, t]
        out[t] = np.mean(np.all((x >= lo) & (x <= hi), axis=1))
    return out


@dataclass
class ValidationSummary:
    preset:             Optional[str]
    epsilon:            float
    n_trajectories:     int
    violation_ratio:    float
    per_step_coverage:  List[float]
    containment:        float
    mm_coverage:        Optional[List[float]] = None
    soundness_slack:    float = 0.0

    @property
    def sound(self) -> bool:
        return bool(self.violation_ratio <= self.epsilon + self.soundness_slack)

    def to_dict(self) -> dict:
        return {
            "preset":                 self.preset,
            "epsilon":                self.epsilon,
            "N":                      self.n_trajectories,
            "violation_ratio":        self.violation_ratio,
            "per_step_coverage":      self.per_step_coverage,
            "trajectory_containment": self.containment,
            "mm_coverage":            self.mm_coverage,
            "sound":                  self.sound,
        }


def summarize(batch: TrajectoryBatch,
              schedule: BoundSchedule,
              rollout: Optional[Sequence[GaussianBelief]] = None,
              k: float = 2.0,
              preset: Optional[str] = None) -> ValidationSummary:
    """Report of one validation run; the soundness slack is 3·sqrt(ε/N)."""
    eps, N = schedule.epsilon, batch.size
    summary = ValidationSummary(
        preset            = preset,
        epsilon           = eps,
        n_trajectories    = N,
        violation_ratio   = violation_ratio(batch, schedule),
        per_step_coverage = per_step_coverage(batch, schedule).tolist(),
        containment       = trajectory_containment(batch, schedule),
        mm_coverage       = None if rollout is None else mm_coverage(batch, rollout, k).tolist(),
        soundness_slack   = 3.0 * np.sqrt(eps / N),
    )
    if not summary.sound:
        logger.warning("violation ratio %.4f exceeds ε=%.3g + slack %.4f",
                       summary.violation_ratio, eps, summary.soundness_slack)
    return summary
