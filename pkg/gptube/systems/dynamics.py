"""
Sistemas de referencia: dinámica verdadera y recolección de transiciones.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Union

import numpy as np
from scipy.interpolate import RBFInterpolator

from ..core.control import ControlInput, policy_eval
from ..core.gp import Dataset
from ..core.regions import Box

logger = logging.getLogger(__name__)

DEFAULT_DT = 0.1
DEFAULT_NOISE_STD = 0.01

MOUNTAIN_CAR_DEFAULTS = {
    "power":     2.5,
    "gravity":   5.0,
    "dt":        0.25,
    "v_max":     2.0,
    "x_min":    -1.2,
    "x_max":     0.6,
}


class SystemKind(Enum):
    LINEAR_QUADRATIC = "linear-quadratic"
    MOUNTAIN_CAR = "mountain-car"
    PIECEWISE_QUARTIC = "piecewise-quartic"
    CUSTOM_TABLE = "custom-table"


class Sampling(Enum):
    RANDOM_POLICY = "random-policy"
    GIVEN_CONTROLS = "given-controls"
    UNIFORM_STATES = "uniform-states"


@dataclass(eq=False)
class SystemSpec:
    """
    Ground-truth transition x' = f(x, u) + noise.

    linear-quadratic systems are continuous-time ẋ^i = A^i x + xᵀQ^i x + B^i u
    integrated with one forward-Euler step of length ``dt``.
    """
    kind:      SystemKind
    A:         Optional[np.ndarray] = None
    Q:         Optional[List[np.ndarray]] = None
    B:         Optional[np.ndarray] = None
    dt:        float = DEFAULT_DT
    noise_std: Union[float, np.ndarray] = DEFAULT_NOISE_STD
    params:    Dict = field(default_factory=dict)
    table:     Optional[Dict] = None

    def __post_init__(self):
        self.kind = SystemKind(self.kind) if not isinstance(self.kind, SystemKind) else self.kind
        if self.kind is SystemKind.LINEAR_QUADRATIC:
            self._init_linear_quadratic()
        elif self.kind is SystemKind.MOUNTAIN_CAR:
            self.params = {**MOUNTAIN_CAR_DEFAULTS, **self.params}
            self.dt = float(self.params["dt"])
            self._n, self._m = 2, 1
        elif self.kind is SystemKind.PIECEWISE_QUARTIC:
            self._n, self._m = 1, 0
        else:
            self._init_table()
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        noise = np.broadcast_to(np.asarray(self.noise_std, dtype=float), (self._n,)).copy()
        if np.any(noise < 0):
            raise ValueError(f"process-noise std must be non-negative, got {noise}")
        self.noise_std = noise

    def _init_linear_quadratic(self):
        if self.A is None:
            raise ValueError("linear-quadratic systems need an A matrix")
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        B = np.zeros((n, 0)) if self.B is None else np.asarray(self.B, dtype=float).reshape(n, -1)
        Q = [np.zeros((n, n))] * n if not self.Q else [np.asarray(q, dtype=float) for q in self.Q]
        if len(Q) != n or any(q.shape != (n, n) for q in Q):
            raise ValueError(f"Q must hold {n} matrices of shape ({n}, {n})")
        if any(not np.allclose(q, q.T) for q in Q):
            raise ValueError("every Q^i must be symmetric")
        self.A, self.B, self.Q = A, B, Q
        self._n, self._m = n, B.shape[1]

    def _init_table(self):
        if not self.table or "inputs" not in self.table or "targets" not in self.table:
            raise ValueError("custom-table systems need a table with 'inputs' and 'targets'")
        inputs = np.atleast_2d(np.asarray(self.table["inputs"], dtype=float))
        targets = np.asarray(self.table["targets"], dtype=float).reshape(inputs.shape[0], -1)
        self._n = targets.shape[1]
        self._m = inputs.shape[1] - self._n
        if self._m < 0:
            raise ValueError("table inputs must hold at least the state columns")
        self._interpolator = RBFInterpolator(inputs, targets,
                                             kernel=self.params.get("kernel", "thin_plate_spline"),
                                             smoothing=float(self.params.get("smoothing", 0.0)))

    @property
    def n_state(self) -> int:
        return self._n

    @property
    def n_control(self) -> int:
        return self._m

    def to_dict(self) -> Dict:
        out = {"kind": self.kind.value, "dt": self.dt, "noise_std": self.noise_std.tolist()}
        if self.kind is SystemKind.LINEAR_QUADRATIC:
            out.update(A=self.A.tolist(), B=self.B.tolist(), Q=[q.tolist() for q in self.Q])
        if self.params:
            out["params"] = dict(self.params)
        return out


def load_system(mapping: Dict) -> SystemSpec:
    """Config form of a SystemSpec."""
    if "kind" not in mapping:
        raise ValueError("system config needs a 'kind'")
    return SystemSpec(
        kind      = mapping["kind"],
        A         = mapping.get("A"),
        Q         = mapping.get("Q"),
        B         = mapping.get("B"),
        dt        = float(mapping.get("dt", DEFAULT_DT)),
        noise_std = mapping.get("noise_std", DEFAULT_NOISE_STD),
        params    = dict(mapping.get("params", {})),
        table     = mapping.get("table"),
    )


# ------------------------------------------------------------------ #
def quartic(x) -> np.ndarray:
    """sign(x)·x⁴ inside (−1, 1), identity outside."""
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) < 1.0, np.sign(x) * x ** 4, x)


def _mountain_car(p: Dict, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    pos, vel = x[..., 0], x[..., 1]
    force = np.clip(u[..., 0], -1.0, 1.0)
    vel = vel + p["dt"] * (p["power"] * force - p["gravity"] * np.cos(3.0 * pos))
    vel = np.clip(vel, -p["v_max"], p["v_max"])
    pos = np.clip(pos + p["dt"] * vel, p["x_min"], p["x_max"])
    # inelastic left wall
    vel = np.where((pos <= p["x_min"]) & (vel < 0), 0.0, vel)
    return np.stack([pos, vel], axis=-1)


def _drift(s: SystemSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    if s.kind is SystemKind.LINEAR_QUADRATIC:
        quad = np.stack([np.einsum("...i,ij,...j->...", x, q, x) for q in s.Q], axis=-1)
        return x + s.dt * (x @ s.A.T + quad + u @ s.B.T)
    if s.kind is SystemKind.PIECEWISE_QUARTIC:
        return quartic(x)
    if s.kind is SystemKind.MOUNTAIN_CAR:
        return _mountain_car(s.params, x, u)
    flat = np.concatenate([x, u], axis=-1).reshape(-1, s.n_state + s.n_control)
    return s._interpolator(flat).reshape(x.shape)


def step(s: SystemSpec, x, u=None, rng: Optional[np.random.Generator] = None, noise=None) -> np.ndarray:
    """
    Next state for one state (n,) or a batch (..., n). Process noise is added
    when an ``rng`` is given or explicit standard-normal ``noise`` is passed.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != s.n_state:
        raise ValueError(f"state of dimension {x.shape[-1]} for a system with {s.n_state} states")
    if u is None:
        u = np.zeros(x.shape[:-1] + (s.n_control,))
    u = np.asarray(u, dtype=float)
    if u.ndim == 0 or u.shape[-1] != s.n_control:
        u = np.broadcast_to(u, x.shape[:-1] + (s.n_control,))
    nxt = _drift(s, x, u)
    if noise is None and rng is not None and np.any(s.noise_std > 0):
        noise = rng.standard_normal(nxt.shape)
    if noise is not None:
        nxt = nxt + s.noise_std * np.asarray(noise, dtype=float)
    return nxt


# ------------------------------------------------------------------ #
def _as_box(region, dim: int, default: float = 1.0) -> Box:
    if isinstance(region, Box):
        return region
    half = np.broadcast_to(np.asarray(default if region is None else region, dtype=float), (dim,))
    return Box(-half, half)


def collect_dataset(s: SystemSpec,
                    sampling: Union[str, Sampling],
                    M: int,
                    seed: int = 0,
                    state_region=None,
                    control_region=None,
                    x0=None,
                    controls=None,
                    episode_length: int = 10,
                    reset_spread: float = 0.1) -> Dataset:
    """
    M transitions (x, u) → x'.

      uniform-states   x ~ U(state_region), u ~ U(control_region)
      random-policy    episodes from x0 (+ U(±reset_spread)) with uniform random actions
      given-controls   one rollout from x0 driven by ``controls`` (sequence or Policy), cycled
    """
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    sampling = Sampling(sampling) if not isinstance(sampling, Sampling) else sampling
    rng = np.random.default_rng(seed)
    n, m = s.n_state, s.n_control
    states_box = _as_box(state_region, n)
    controls_box = _as_box(control_region, m)
    start = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)

    if sampling is Sampling.UNIFORM_STATES:
        X = states_box.sample(rng, M)
        U = controls_box.sample(rng, M) if m else np.zeros((M, 0))
        Y = step(s, X, U, rng)
    elif sampling is Sampling.RANDOM_POLICY:
        if episode_length < 1:
            raise ValueError(f"episode_length must be >= 1, got {episode_length}")
        X, U, Y = np.empty((M, n)), np.empty((M, m)), np.empty((M, n))
        x = None
        for i in range(M):
            if i % episode_length == 0:
                x = start + rng.uniform(-reset_spread, reset_spread, n)
            u = controls_box.sample(rng, 1)[0] if m else np.zeros(0)
            X[i], U[i] = x, u
            x = Y[i] = step(s, x, u, rng)
    else:
        if controls is None:
            raise ValueError("given-controls sampling needs a control sequence or a policy")
        ctrl = ControlInput.from_any(controls, m)
        X, U, Y = np.empty((M, n)), np.empty((M, m)), np.empty((M, n))
        x = start.copy()
        for i in range(M):
            if ctrl.policy is not None:
                u = policy_eval(ctrl.policy, x)
            else:
                u = ctrl.sequence[i % ctrl.sequence.shape[0]]
            X[i], U[i] = x, u
            x = Y[i] = step(s, x, u, rng)

    logger.debug("collected %d transitions (%s, seed=%d)", M, sampling.value, seed)
    return Dataset(np.hstack([X, U]), Y)


def rollout(s: SystemSpec, x0, controls, horizon: int,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """States x_0..x_H of one trajectory (open-loop sequence or Policy)."""
    ctrl = ControlInput.from_any(controls, s.n_control)
    ctrl.check_horizon(horizon)
    xs = [np.asarray(x0, dtype=float)]
    for t in range(horizon):
        xs.append(step(s, xs[-1], ctrl.control(t, xs[-1]), rng))
    return np.array(xs)

