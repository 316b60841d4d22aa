"""
Políticas deterministas y sus extremos sobre cajas de estado.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Union

import numpy as np

from .regions import Box

_TWO_PI = 2.0 * np.pi


class PolicyKind(Enum):
    LINEAR = "linear"
    SINE = "sine"           # u_max · sin(Wx)

    @classmethod
    def parse(cls, value: Union[str, "PolicyKind"]) -> "PolicyKind":
        if isinstance(value, PolicyKind):
            return value
        aliases = {"linear": cls.LINEAR, "sine": cls.SINE,
                   "sine-squashed": cls.SINE, "sine-squashed-linear": cls.SINE}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"Unsupported policy kind: {value}. Supported: linear, sine") from None


@dataclass(eq=False)
class Policy:
    kind:  PolicyKind
    W:     np.ndarray
    u_max: Optional[np.ndarray] = None

    def __post_init__(self):
        self.kind = PolicyKind.parse(self.kind)
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        if W.ndim != 2 or not np.all(np.isfinite(W)):
            raise ValueError("policy gain W must be a finite 2-D matrix")
        self.W = W
        u_max = np.ones(W.shape[0]) if self.u_max is None else np.asarray(self.u_max, dtype=float)
        u_max = np.broadcast_to(u_max, (W.shape[0],)).copy()
        if np.any(u_max <= 0):
            raise ValueError(f"u_max must be positive, got {u_max}")
        self.u_max = u_max

    @classmethod
    def linear(cls, W) -> "Policy":
        return cls(PolicyKind.LINEAR, W)

    @classmethod
    def sine(cls, W, u_max=1.0) -> "Policy":
        return cls(PolicyKind.SINE, W, u_max)

    @property
    def n_state(self) -> int:
        return self.W.shape[1]

    @property
    def n_control(self) -> int:
        return self.W.shape[0]

    def to_dict(self) -> Dict:
        out = {"kind": self.kind.value, "W": self.W.tolist()}
        if self.kind is PolicyKind.SINE:
            out["u_max"] = self.u_max.tolist()
        return out


def load_policy(mapping: Dict) -> Policy:
    """Config form: {kind, W (row-major), u_max}."""
    if "W" not in mapping:
        raise ValueError("policy config needs a 'W' gain matrix")
    return Policy(mapping.get("kind", "linear"), mapping["W"], mapping.get("u_max"))


# ------------------------------------------------------------------ #
def policy_eval(p: Policy, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.n_state:
        raise ValueError(f"state of dimension {x.shape[-1]} for a policy over {p.n_state} states")
    pre = x @ p.W.T
    if p.kind is PolicyKind.SINE:
        return p.u_max * np.sin(pre)
    return pre


def _sine_range(a: float, b: float):
    if b - a >= _TWO_PI:
        return -1.0, 1.0
    lo, hi = sorted((np.sin(a), np.sin(b)))
    # a crest π/2 + 2πk or a trough −π/2 + 2πk inside [a, b]
    if np.ceil((a - 0.5 * np.pi) / _TWO_PI) <= np.floor((b - 0.5 * np.pi) / _TWO_PI):
        hi = 1.0
    if np.ceil((a + 0.5 * np.pi) / _TWO_PI) <= np.floor((b + 0.5 * np.pi) / _TWO_PI):
        lo = -1.0
    return lo, hi


def policy_extrema(p: Policy, b: Box) -> Box:
    """Exact per-dimension control interval over the state box ``b``."""
    if b.dim != p.n_state:
        raise ValueError(f"state box of dimension {b.dim} for a policy over {p.n_state} states")
    W_pos, W_neg = np.maximum(p.W, 0.0), np.minimum(p.W, 0.0)
    pre_lo = W_pos @ b.lower + W_neg @ b.upper
    pre_hi = W_pos @ b.upper + W_neg @ b.lower
    if p.kind is PolicyKind.LINEAR:
        return Box(pre_lo, pre_hi)
    ranges = np.array([_sine_range(a, c) for a, c in zip(pre_lo, pre_hi)])
    return Box(p.u_max * ranges[:, 0], p.u_max * ranges[:, 1])


def extend_input_box(b: Box, u_interval) -> Box:
    """State box ⊕ control box, the GP-input region in closed loop."""
    if not isinstance(u_interval, Box):
        pairs = np.atleast_2d(np.asarray(u_interval, dtype=float))
        u_interval = Box(pairs[:, 0], pairs[:, 1])
    return b.concat(u_interval)


# ------------------------------------------------------------------ #
class ControlInput:
    """
    Controls fed to the GP at each step: none, an open-loop sequence of
    shape (H, m), or a closed-loop policy.
    """

    def __init__(self, n_control: int = 0, sequence=None, policy: Optional[Policy] = None):
        if sequence is not None and policy is not None:
            raise ValueError("give either an open-loop sequence or a policy, not both")
        if policy is not None:
            n_control = policy.n_control
        if sequence is not None:
            sequence = np.asarray(sequence, dtype=float)
            if sequence.ndim == 1:
                sequence = sequence[:, None] if n_control <= 1 else sequence[None, :]
            n_control = sequence.shape[1]
        if n_control > 0 and sequence is None and policy is None:
            raise ValueError(f"{n_control} control inputs need a sequence or a policy")
        self.n_control = int(n_control)
        self.sequence = sequence
        self.policy = policy

    @classmethod
    def from_any(cls, controls, n_control: int = 0) -> "ControlInput":
        if isinstance(controls, ControlInput):
            return controls
        if isinstance(controls, Policy):
            return cls(policy=controls)
        if controls is None:
            return cls(n_control=0)
        return cls(n_control=n_control, sequence=controls)

    @property
    def is_closed_loop(self) -> bool:
        return self.policy is not None

    @property
    def is_linear(self) -> bool:
        return self.policy is None or self.policy.kind is PolicyKind.LINEAR

    def check_horizon(self, horizon: int) -> None:
        if self.sequence is not None and self.sequence.shape[0] < horizon:
            raise ValueError(
                f"open-loop sequence has {self.sequence.shape[0]} controls for horizon {horizon}")

    def control(self, t: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.policy is not None:
            return policy_eval(self.policy, x)
        if self.sequence is not None:
            return np.broadcast_to(self.sequence[t], x.shape[:-1] + (self.n_control,)).copy()
        return np.zeros(x.shape[:-1] + (0,))

    def at(self, t: int) -> "StepControl":
        return StepControl(self, t)

    def to_dict(self) -> Dict:
        if self.policy is not None:
            return {"policy": self.policy.to_dict()}
        if self.sequence is not None:
            return {"controls": self.sequence.tolist()}
        return {}


@dataclass(frozen=True)
class StepControl:
    """Lifts state boxes and points to GP inputs at step ``t``."""
    source: ControlInput
    t:      int

    def control(self, x) -> np.ndarray:
        return self.source.control(self.t, x)

    def lift_point(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.concatenate([x, self.control(x)], axis=-1)

    def lift_box(self, box: Box) -> Box:
        src = self.source
        if src.policy is not None:
            return extend_input_box(box, policy_extrema(src.policy, box))
        if src.sequence is not None:
            return extend_input_box(box, Box.point(src.sequence[self.t]))
        return box
