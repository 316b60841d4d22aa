"""
Built-in benchmarks: system, policy variants, initial belief, ε, H and the
certification settings each one is run with.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..core.control import ControlInput, Policy
from ..core.tail_bound import BoundSettings, KGrid, TubeShape
from .dynamics import SystemKind, SystemSpec

PRESET_NAMES = ("system1", "system2", "system3", "system4", "system5",
                "mountain-car", "quartic", "synthetic-1d")

# open-loop actions of the mountain-car run
MOUNTAIN_CAR_ACTIONS = (1.85, -0.97, 1.39, 0.17, -1.95)

LINEAR_SYSTEM_NOISE = 1e-4
LINEAR_SYSTEM_K0 = 0.165
LINEAR_SYSTEM_SIGMA0 = 0.055


@dataclass(eq=False)
class Preset:
    name:           str
    system:         SystemSpec
    init_mean:      np.ndarray
    init_cov:       np.ndarray
    epsilon:        float
    horizon:        int
    policies:       Dict[str, Optional[Policy]] = field(default_factory=dict)
    default_policy: Optional[str] = None
    controls:       Optional[np.ndarray] = None
    cov_sweep:      List[float] = field(default_factory=list)
    dataset_size:   int = 300
    sampling:       str = "uniform-states"
    sampling_args:  Dict = field(default_factory=dict)
    settings:       BoundSettings = field(default_factory=BoundSettings)
    safe_box:       Optional[Dict] = None

    def policy(self, variant: Optional[str] = None) -> Optional[Policy]:
        variant = variant or self.default_policy
        if variant is None:
            return None
        if variant not in self.policies:
            raise ValueError(f"Unknown policy variant '{variant}' for {self.name}. "
                             f"Available: {', '.join(self.policies)}")
        return self.policies[variant]

    def control_input(self, variant: Optional[str] = None) -> ControlInput:
        p = self.policy(variant)
        if p is not None:
            return ControlInput(policy=p)
        if self.controls is not None:
            return ControlInput(sequence=self.controls)
        return ControlInput(n_control=0)

    def with_covariance(self, var: float) -> "Preset":
        """Same preset with isotropic initial variance ``var``."""
        n = self.init_mean.size
        return Preset(**{**self.__dict__, "init_cov": np.eye(n) * float(var)})


# ------------------------------------------------------------------ #
def _linear_settings(tube: TubeShape) -> BoundSettings:
    return BoundSettings(
        mean_tol      = 1e-5,
        variance_rtol = 0.25,
        grid          = KGrid(kind="linear", start=0.0005, stop=2.0, step=0.0005),
        tube          = tube,
        k0            = LINEAR_SYSTEM_K0,
    )


def _linear_system(name: str, A, B, policies: Dict[str, Policy], default: str,
                   Q=None, control_range: float = 0.5) -> Preset:
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    system = SystemSpec(SystemKind.LINEAR_QUADRATIC, A=A, B=B, Q=Q, dt=0.1,
                        noise_std=LINEAR_SYSTEM_NOISE)
    return Preset(
        name           = name,
        system         = system,
        init_mean      = np.zeros(n),
        init_cov       = np.eye(n) * LINEAR_SYSTEM_SIGMA0 ** 2,
        epsilon        = 0.1,
        horizon        = 6,
        policies       = policies,
        default_policy = default,
        dataset_size   = 300,
        sampling       = "uniform-states",
        sampling_args  = {"state_region": 0.5, "control_region": control_range},
        settings       = _linear_settings(TubeShape.L1 if n == 1 else TubeShape.BOX),
    )


def _system1() -> Preset:
    return _linear_system("system1", [[0.05]], [[1.0]],
                          {"open": Policy.linear([[0.0]]), "controlled": Policy.linear([[-0.2]])},
                          "controlled")


def _system2() -> Preset:
    return _linear_system("system2", [[0.1, 0.0], [0.0, -0.4]], [[1.0], [0.0]],
                          {"controlled": Policy.linear([[-0.6, 0.0]])}, "controlled")


def _system3() -> Preset:
    return _linear_system("system3", [[0.1, 0.08], [-0.05, 0.15]], np.eye(2),
                          {"controlled": Policy.linear([[-0.4, 0.0], [0.0, -0.5]])}, "controlled")


def _system4() -> Preset:
    Q = [[[1.0, 0.0], [0.0, 0.0]],
         [[1.0, 0.0], [0.0, 0.2]]]
    return _linear_system("system4", [[-0.2, 0.05], [-0.05, -0.4]], [[1.0], [0.0]],
                          {"controlled": Policy.sine([[-8.61, -0.02]])}, "controlled",
                          Q=Q, control_range=1.0)


def _system5() -> Preset:
    return _linear_system("system5", np.diag([-0.2, -0.3, -0.6]),
                          [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]],
                          {"controlled": Policy.linear([[-0.4, 0.0, 0.0], [0.0, -0.2, 0.0]])},
                          "controlled")


def _mountain_car() -> Preset:
    system = SystemSpec(SystemKind.MOUNTAIN_CAR, noise_std=1e-3)
    return Preset(
        name          = "mountain-car",
        system        = system,
        init_mean     = np.array([-0.5, 0.0]),
        init_cov      = np.eye(2) * 1e-5,
        epsilon       = 0.1,
        horizon       = 5,
        controls      = np.array(MOUNTAIN_CAR_ACTIONS)[:, None],
        dataset_size  = 500,
        sampling      = "random-policy",
        sampling_args = {"x0": [-0.5, 0.0], "control_region": 2.0,
                         "episode_length": 10, "reset_spread": 0.1},
        settings      = BoundSettings(
            mean_tol      = 1e-4,
            variance_rtol = 0.25,
            grid          = KGrid(kind="linear", start=0.005, stop=5.0, step=0.005),
            tube          = TubeShape.BOX,
        ),
        safe_box      = {"lower": [-1.2, -2.0], "upper": [0.6, 2.0]},
    )


def _quartic() -> Preset:
    system = SystemSpec(SystemKind.PIECEWISE_QUARTIC, noise_std=1e-3)
    return Preset(
        name          = "quartic",
        system        = system,
        init_mean     = np.zeros(1),
        init_cov      = np.eye(1) * 0.6,
        epsilon       = 0.05,
        horizon       = 10,
        cov_sweep     = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        dataset_size  = 300,
        sampling      = "uniform-states",
        sampling_args = {"state_region": 3.0},
        settings      = BoundSettings(mean_tol=1e-4, variance_rtol=0.25),
    )


def _synthetic_1d() -> Preset:
    # x' = 0.9 x
    system = SystemSpec(SystemKind.LINEAR_QUADRATIC, A=[[-1.0]], dt=0.1)
    return Preset(
        name          = "synthetic-1d",
        system        = system,
        init_mean     = np.zeros(1),
        init_cov      = np.eye(1) * 0.01,
        epsilon       = 0.05,
        horizon       = 10,
        dataset_size  = 100,
        sampling      = "uniform-states",
        sampling_args = {"state_region": 1.0},
        settings      = BoundSettings(mean_tol=1e-4, variance_rtol=0.25),
    )


_BUILDERS = {
    "system1":      _system1,
    "system2":      _system2,
    "system3":      _system3,
    "system4":      _system4,
    "system5":      _system5,
    "mountain-car": _mountain_car,
    "quartic":      _quartic,
    "synthetic-1d": _synthetic_1d,
}


def preset(name: str) -> Preset:
    """Fresh copy of a built-in benchmark."""
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise ValueError(f"Unknown preset: {name}. Available: {', '.join(PRESET_NAMES)}") from None
