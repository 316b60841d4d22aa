"""
Exact moment matching for SE-kernel GPs under Gaussian inputs.

The closed forms are the usual Gaussian-integral ones: output mean, output
covariance (including cross terms between output dimensions) and the
input–output cross-covariance.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .control import ControlInput, Policy, PolicyKind
from .gp import GpModel

logger = logging.getLogger(__name__)

PSD_TOL = 1e-10


def clip_psd(cov: np.ndarray) -> Tuple[np.ndarray, float]:
    """Symmetrize and clip negative eigenvalues; returns the clipping magnitude."""
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    if w.min() >= 0:
        return cov, 0.0
    magnitude = float(-w.min())
    return (V * np.maximum(w, 0.0)) @ V.T, magnitude


@dataclass(eq=False)
class GaussianBelief:
    mean:       np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.covariance, dtype=float)
        if cov.ndim <= 1:
            cov = np.diag(np.broadcast_to(cov, mean.shape))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance of shape {cov.shape} for a mean of size {mean.size}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("belief contains non-finite values")
        cov = 0.5 * (cov + cov.T)
        scale = max(1.0, float(np.abs(np.diag(cov)).max()))
        if np.linalg.eigvalsh(cov).min() < -PSD_TOL * scale:
            raise ValueError("belief covariance is not positive semi-definite")
        self.mean, self.covariance = mean, cov

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def band(self, k: float = 2.0) -> Tuple[np.ndarray, np.ndarray]:
        return self.mean - k * self.std, self.mean + k * self.std


# ------------------------------------------------------------------ #
def _joint_input(m: GpModel, b: GaussianBelief, u) -> Tuple[np.ndarray, np.ndarray]:
    """Gaussian over the GP input (x ⊕ u) for a fixed control or a linear policy."""
    mu, S = b.mean, b.covariance
    if mu.size != m.n_state:
        raise ValueError(f"belief over {mu.size} states for a model with {m.n_state}")
    if m.n_control == 0:
        if u is not None and np.size(u if not isinstance(u, Policy) else u.W) > 0:
            raise ValueError("model has no control inputs")
        return mu, S
    if u is None:
        raise ValueError(f"model needs {m.n_control} control inputs")
    if isinstance(u, Policy):
        if u.kind is not PolicyKind.LINEAR:
            raise ValueError("moment matching is exact only for linear policies; "
                             "sine-squashed policies are not supported")
        W = u.W
        mean = np.r_[mu, W @ mu]
        SW = S @ W.T
        cov = np.block([[S, SW], [SW.T, W @ SW]])
        return mean, cov
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.size != m.n_control:
        raise ValueError(f"{u.size} controls for a model with {m.n_control} control inputs")
    cov = np.zeros((m.input_dim, m.input_dim))
    cov[:mu.size, :mu.size] = S
    return np.r_[mu, u], cov


def predict_moments(m: GpModel,
                    mean_in,
                    cov_in,
                    cross_covariance: bool = True,
                    include_noise: bool = False) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Output mean (n,), output covariance (n, n) and input–output
    cross-covariance (D, n) for a Gaussian GP input N(mean_in, cov_in).
    """
    X = m.dataset.inputs
    mu = np.asarray(mean_in, dtype=float)
    s = np.asarray(cov_in, dtype=float)
    D, E = m.input_dim, m.n_state
    if mu.shape != (D,) or s.shape != (D, D):
        raise ValueError(f"input moments of shapes {mu.shape}, {s.shape} for {D} inputs")
    inp = X - mu
    eye = np.eye(D)

    M = np.zeros(E)
    V = np.zeros((D, E))
    log_k, zeta = [], []
    for a, h in enumerate(m.hyperparams):
        beta = m.factor(a).alpha
        ell2 = h.ell ** 2
        iR = np.linalg.inv(s + np.diag(ell2))
        T = inp @ iR
        c = h.signal_variance / np.sqrt(np.linalg.det(s / ell2[None, :] + eye))
        qb = c * np.exp(-0.5 * np.sum(T * inp, axis=1)) * beta
        M[a] = qb.sum()
        V[:, a] = s @ (T.T @ qb)
        log_k.append(np.log(h.signal_variance) - 0.5 * np.sum(inp ** 2 / ell2, axis=1))
        zeta.append(inp / ell2)

    S = np.zeros((E, E))
    for a in range(E):
        ha, fa = m.hyperparams[a], m.factor(a)
        for b in range(a + 1):
            if a != b and not cross_covariance:
                continue
            hb, fb = m.hyperparams[b], m.factor(b)
            R = s * (1.0 / ha.ell ** 2 + 1.0 / hb.ell ** 2)[None, :] + eye
            Qm = np.linalg.solve(R, s) / 2.0
            Qm = 0.5 * (Qm + Qm.T)
            aQ, bQ = zeta[a] @ Qm, zeta[b] @ Qm
            maha = (np.sum(aQ * zeta[a], axis=1)[:, None]
                    + np.sum(bQ * zeta[b], axis=1)[None, :]
                    + 2.0 * aQ @ zeta[b].T)
            Q = np.exp(log_k[a][:, None] + log_k[b][None, :] + maha) / np.sqrt(np.linalg.det(R))
            value = fa.alpha @ Q @ fb.alpha
            if a == b:
                value += ha.signal_variance - np.sum(fa.inverse * Q)
            S[a, b] = S[b, a] = value - M[a] * M[b]

    if include_noise:
        S += np.diag([h.noise_variance for h in m.hyperparams])
    S, clipped = clip_psd(S)
    if clipped > 1e-8:
        logger.warning("output covariance clipped to PSD by %.3e", clipped)
    elif clipped > 0:
        logger.debug("output covariance clipped to PSD by %.3e", clipped)
    return M, S, V


def mm_step(m: GpModel,
            b: GaussianBelief,
            u=None,
            cross_covariance: bool = True,
            include_noise: bool = False) -> GaussianBelief:
    """Next-state belief; ``u`` is None, a fixed control vector or a linear Policy."""
    mean_in, cov_in = _joint_input(m, b, u)
    M, S, _ = predict_moments(m, mean_in, cov_in, cross_covariance, include_noise)
    return GaussianBelief(M, S)


def mm_control(controls: ControlInput, t: int):
    """What ``mm_step`` gets at step ``t``."""
    if controls.policy is not None:
        return controls.policy
    if controls.sequence is not None:
        return controls.sequence[t]
    return None


def mm_rollout(m: GpModel,
               init: GaussianBelief,
               controls,
               horizon: int,
               cross_covariance: bool = True,
               include_noise: bool = False) -> List[GaussianBelief]:
    """Beliefs for t = 0..H."""
    if horizon < 0:
        raise ValueError(f"horizon must be >= 0, got {horizon}")
    ctrl = ControlInput.from_any(controls, m.n_control)
    ctrl.check_horizon(horizon)
    beliefs = [init]
    for t in range(horizon):
        beliefs.append(mm_step(m, beliefs[-1], mm_control(ctrl, t), cross_covariance, include_noise))
    return beliefs
