"""
Certified extrema of the posterior over axis-aligned boxes.

Two sound per-box bounds are combined and refined by best-first branch and
bound:

* linear kernel bounds in the auxiliary variable z_j (scaled squared
  distance to training point j) pushed through the inference formulas; the
  result is a separable quadratic in x, optimised exactly per dimension;
* a Taylor expansion around the box centre whose remainder is bounded with
  the RKHS norm of the mean (mean) or with prior derivative variances
  (posterior standard deviation).

The second one keeps the search convergent when the Gram matrix is badly
conditioned, where the first one is loose.
"""
import heapq
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.linalg import solve_triangular

from .gp import GpModel, posterior_covariance, se_kernel

logger = logging.getLogger(__name__)

DEFAULT_NODE_BUDGET = 100_000
_SQRT3, _SQRT15 = np.sqrt(3.0), np.sqrt(15.0)


# ------------------------------------------------------------------ #
@dataclass(eq=False)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError(f"box bounds must be 1-D and equal length, got {lo.shape} and {hi.shape}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError(f"lower {lo} exceeds upper {hi}")
        self.lower, self.upper = lo, hi

    @classmethod
    def around(cls, center, half_widths) -> "Box":
        c = np.atleast_1d(np.asarray(center, dtype=float))
        hw = np.broadcast_to(np.abs(np.asarray(half_widths, dtype=float)), c.shape)
        return cls(c - hw, c + hw)

    @classmethod
    def point(cls, x) -> "Box":
        return cls(x, x)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * self.width

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def radius(self) -> float:
        """Half the Euclidean diagonal."""
        return float(np.linalg.norm(self.half_width))

    @property
    def is_point(self) -> bool:
        return bool(np.all(self.width == 0))

    def contains(self, x, atol: float = 0.0):
        x = np.asarray(x, dtype=float)
        inside = np.all((x >= self.lower - atol) & (x <= self.upper + atol), axis=-1)
        return bool(inside) if inside.ndim == 0 else inside

    def encloses(self, other: "Box", atol: float = 0.0) -> bool:
        return bool(np.all(other.lower >= self.lower - atol) and np.all(other.upper <= self.upper + atol))

    def split(self, d: int) -> Tuple["Box", "Box"]:
        mid = 0.5 * (self.lower[d] + self.upper[d])
        left_hi, right_lo = self.upper.copy(), self.lower.copy()
        left_hi[d], right_lo[d] = mid, mid
        return Box(self.lower, left_hi), Box(right_lo, self.upper)

    def concat(self, other: "Box") -> "Box":
        return Box(np.r_[self.lower, other.lower], np.r_[self.upper, other.upper])

    def restrict(self, n: int) -> "Box":
        """Leading ``n`` coordinates."""
        return Box(self.lower[:n], self.upper[:n])

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(size, self.dim))

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    def __repr__(self) -> str:
        return f"Box(lower={self.lower.tolist()}, upper={self.upper.tolist()})"


@dataclass(eq=False)
class LinearKernelBounds:
    """a_lo + b_lo·z_j ≤ k(x, x_j) ≤ a_hi + b_hi·z_j for every x in ``box``."""
    a_lo:  np.ndarray
    b_lo:  np.ndarray
    a_hi:  np.ndarray
    b_hi:  np.ndarray
    z_min: np.ndarray
    z_max: np.ndarray
    box:   Box

    def lower_at(self, z) -> np.ndarray:
        return self.a_lo + self.b_lo * z

    def upper_at(self, z) -> np.ndarray:
        return self.a_hi + self.b_hi * z


@dataclass(eq=False)
class CertifiedInterval:
    lo:  float
    hi:  float
    gap: float = field(init=False)
    budget_exceeded: bool = False
    nodes:   int = 0
    witness: Optional[np.ndarray] = None
    trace:   Optional[List[dict]] = None

    def __post_init__(self):
        self.lo, self.hi = float(self.lo), float(max(self.hi, self.lo))
        self.gap = self.hi - self.lo

    def contains(self, value: float, atol: float = 0.0) -> bool:
        return self.lo - atol <= value <= self.hi + atol


# ------------------------------------------------------------------ #
#  linear kernel bounds
# ------------------------------------------------------------------ #
def _z_range(X: np.ndarray, box: Box, ell: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    lo, hi = box.lower - X, box.upper - X
    near = np.where((lo <= 0) & (hi >= 0), 0.0, np.minimum(lo ** 2, hi ** 2))
    far = np.maximum(lo ** 2, hi ** 2)
    w = 1.0 / ell ** 2
    return near @ w, far @ w


def linear_kernel_bounds(m: GpModel, b: Box, dim: int, tangent_at: str = "mid") -> LinearKernelBounds:
    """Tangent (lower) and chord (upper) of k = σ_f² exp(−z/2) over [z_min, z_max], all j."""
    h = m.hyperparams[dim]
    if b.dim != m.input_dim:
        raise ValueError(f"box of dimension {b.dim} for a model with {m.input_dim} inputs")
    z_min, z_max = _z_range(m.dataset.inputs, b, h.ell)
    z0 = {"mid": 0.5 * (z_min + z_max), "min": z_min, "max": z_max}[tangent_at]

    k0 = h.signal_variance * np.exp(-0.5 * z0)
    b_lo = -0.5 * k0
    a_lo = k0 - b_lo * z0

    k_near = h.signal_variance * np.exp(-0.5 * z_min)
    k_far = h.signal_variance * np.exp(-0.5 * z_max)
    dz = z_max - z_min
    wide = dz > 1e-12 * np.maximum(1.0, z_max)
    b_hi = np.where(wide, (k_far - k_near) / np.where(wide, dz, 1.0), -0.5 * k_near)
    a_hi = k_near - b_hi * z_min
    return LinearKernelBounds(a_lo, b_lo, a_hi, b_hi, z_min, z_max, b)


def kernel_linear_bounds(m: GpModel, j: int, b: Box, dim: int, tangent_at: str = "mid") -> LinearKernelBounds:
    """Bounds for training point ``j`` only."""
    full = linear_kernel_bounds(m, b, dim, tangent_at)
    sl = slice(j, j + 1)
    return LinearKernelBounds(full.a_lo[sl], full.b_lo[sl], full.a_hi[sl], full.b_hi[sl],
                              full.z_min[sl], full.z_max[sl], b)


def _separable_max(beta: np.ndarray, X: np.ndarray, w: np.ndarray, box: Box) -> Tuple[float, np.ndarray]:
    """Exact max over ``box`` of Σ_j β_j Σ_d w_d (x_d − X_jd)²."""
    total = beta.sum()
    P = beta @ X
    R = beta @ (X ** 2)
    x_best = np.empty(box.dim)
    value = 0.0
    for d in range(box.dim):
        cands = [box.lower[d], box.upper[d]]
        if total < 0:
            vertex = P[d] / total
            if box.lower[d] < vertex < box.upper[d]:
                cands.append(vertex)
        vals = [w[d] * (total * t * t - 2.0 * P[d] * t + R[d]) for t in cands]
        k = int(np.argmax(vals))
        x_best[d], value = cands[k], value + vals[k]
    return value, x_best


# ------------------------------------------------------------------ #
#  search plumbing
# ------------------------------------------------------------------ #
class _Unlifted:
    """Search directly in GP-input space."""

    def lift_box(self, box: Box) -> Box:
        return box

    def lift_point(self, x: np.ndarray) -> np.ndarray:
        return x


def _search_space(m: GpModel, b: Box, control):
    if control is None:
        if b.dim != m.input_dim:
            raise ValueError(f"box of dimension {b.dim} for a model with {m.input_dim} inputs")
        return _Unlifted(), b
    if b.dim != m.n_state:
        raise ValueError(f"state box of dimension {b.dim} for a model with {m.n_state} states")
    return control, b


def _branch_and_bound(evaluate: Callable[[Box], Tuple[float, float, np.ndarray]],
                      root: Box,
                      split_scale: np.ndarray,
                      tol: float,
                      rtol: float,
                      node_budget: int,
                      trace: bool,
                      label: str) -> CertifiedInterval:
    """
    Certified maximum. ``evaluate(box)`` returns (upper bound over the box,
    attained value, point attaining it).
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    counter = itertools.count()
    upper, best, best_x = evaluate(root)
    heap = [(-upper, next(counter), root)]
    stuck = -np.inf
    nodes, exceeded = 1, False
    log: Optional[List[dict]] = [] if trace else None

    def threshold(value: float) -> float:
        return max(tol, rtol * abs(value))

    while heap:
        top = -heap[0][0]
        hi = max(top, stuck)
        if hi - best <= threshold(hi) or stuck >= top:
            break
        if nodes >= node_budget:
            exceeded = True
            break
        _, node_id, node = heapq.heappop(heap)
        scaled = node.width / split_scale
        d = int(np.argmax(scaled))
        if scaled[d] <= 1e-12:
            stuck = max(stuck, top)
            continue
        for child in node.split(d):
            c_up, c_val, c_x = evaluate(child)
            nodes += 1
            if c_val > best:
                best, best_x = c_val, c_x
            if c_up > best:
                heapq.heappush(heap, (-c_up, next(counter), child))
            if log is not None:
                log.append({"parent": node_id, "lower": child.lower.tolist(),
                            "upper": child.upper.tolist(), "bound": float(c_up), "best": float(best)})

    hi = max([stuck, best] + ([-heap[0][0]] if heap else []))
    if exceeded:
        logger.warning("%s: node budget %d exhausted, gap %.3e", label, node_budget, hi - best)
    return CertifiedInterval(lo=best, hi=hi, budget_exceeded=exceeded, nodes=nodes,
                             witness=best_x, trace=log)


def _flip(iv: CertifiedInterval) -> CertifiedInterval:
    return CertifiedInterval(lo=-iv.hi, hi=-iv.lo, budget_exceeded=iv.budget_exceeded,
                             nodes=iv.nodes, witness=iv.witness, trace=iv.trace)


def _active(box: Box) -> np.ndarray:
    return box.width > 0


# ------------------------------------------------------------------ #
#  posterior mean
# ------------------------------------------------------------------ #
def rkhs_norm(m: GpModel, dim: int) -> float:
    """RKHS norm of the posterior mean of output ``dim``."""
    f, h = m.factor(dim), m.hyperparams[dim]
    y = m.dataset.targets[:, dim]
    sq = float(f.alpha @ y - h.diagonal_load * f.alpha @ f.alpha)
    return float(np.sqrt(max(sq, 0.0)))


def _mean_evaluator(m: GpModel, dim: int, sign: float, lifter):
    h, f = m.hyperparams[dim], m.factor(dim)
    X = m.dataset.inputs
    weights = sign * f.alpha
    inv_ell2 = 1.0 / h.ell ** 2
    third = rkhs_norm(m, dim) * h.signal_std * _SQRT15

    def value_at(x_input: np.ndarray) -> float:
        return float(weights @ se_kernel(h, x_input, X)[0])

    def evaluate(box: Box):
        lifted = lifter.lift_box(box)

        # linear kernel bounds: pick the side that upper-bounds each weighted term
        lkb = linear_kernel_bounds(m, lifted, dim)
        pos = weights >= 0
        a = np.where(pos, lkb.a_hi, lkb.a_lo)
        b = np.where(pos, lkb.b_hi, lkb.b_lo)
        relax, x_relax = _separable_max(weights * b, X, inv_ell2, lifted)
        relax += float(weights @ a)

        # Taylor around the centre
        c, hw = lifted.center, lifted.half_width
        active = _active(lifted)
        k = se_kernel(h, c, X)[0]
        wk = weights * k
        S = (c - X) * inv_ell2
        grad = -(wk @ S)
        taylor = float(wk.sum()) + float(np.abs(grad) @ hw)
        if active.any():
            Sa = S[:, active]
            hess = (Sa.T * wk) @ Sa - wk.sum() * np.diag(inv_ell2[active])
            r = float(np.linalg.norm(hw))
            ell_min = float(h.ell[active].min())
            taylor += 0.5 * max(float(np.linalg.eigvalsh(hess)[-1]), 0.0) * r * r
            taylor += third / ell_min ** 3 * r ** 3 / 6.0

        ns = box.dim
        cands = [lifter.lift_point(box.center), lifter.lift_point(x_relax[:ns])]
        vals = [value_at(p) for p in cands]
        i = int(np.argmax(vals))
        return min(relax, taylor), vals[i], cands[i]

    return evaluate


def mean_extrema(m: GpModel,
                 b: Box,
                 dim: int,
                 tol: float = 1e-3,
                 control=None,
                 rtol: float = 0.0,
                 node_budget: int = DEFAULT_NODE_BUDGET,
                 trace: bool = False) -> Tuple[CertifiedInterval, CertifiedInterval]:
    """
    Certified (min, max) of the posterior mean of output ``dim`` over ``b``.

    Without ``control`` the box lives in GP-input space. With a control
    lifter (see ``control.ControlInput``) the box is a state box and every
    node is lifted to state ⊕ control before bounding.
    """
    lifter, search = _search_space(m, b, control)
    scale = m.hyperparams[dim].ell[:search.dim]
    hi = _branch_and_bound(_mean_evaluator(m, dim, +1.0, lifter), search, scale,
                           tol, rtol, node_budget, trace, f"mean max (output {dim})")
    lo = _branch_and_bound(_mean_evaluator(m, dim, -1.0, lifter), search, scale,
                           tol, rtol, node_budget, trace, f"mean min (output {dim})")
    return _flip(lo), hi


# ------------------------------------------------------------------ #
#  posterior variance
# ------------------------------------------------------------------ #
def _gradient_covariance(m: GpModel, dim: int, c: np.ndarray, active: np.ndarray):
    """Posterior covariance of the gradient at ``c`` on the active dims, and k(c)."""
    h, f = m.hyperparams[dim], m.factor(dim)
    X = m.dataset.inputs
    inv_ell2 = 1.0 / h.ell ** 2
    k = se_kernel(h, c, X)[0]
    J = -(k[:, None] * (c - X) * inv_ell2)[:, active]
    C = h.signal_variance * np.diag(inv_ell2[active]) - J.T @ f.inverse @ J
    return 0.5 * (C + C.T), J, k


def _variance_at(m: GpModel, dim: int, x_input: np.ndarray) -> float:
    h, f = m.hyperparams[dim], m.factor(dim)
    k = se_kernel(h, x_input, m.dataset.inputs)[0]
    v = solve_triangular(f.chol, k, lower=True)
    return float(np.clip(h.signal_variance - v @ v, 0.0, h.signal_variance))


def _variance_evaluator(m: GpModel, dim: int, lifter):
    h, f = m.hyperparams[dim], m.factor(dim)
    X = m.dataset.inputs
    inv_ell2 = 1.0 / h.ell ** 2
    sf2 = h.signal_variance

    def evaluate(box: Box):
        lifted = lifter.lift_box(box)
        c, hw = lifted.center, lifted.half_width
        active = _active(lifted)

        # tangent plane of the convex form kᵀBk at k(c), then linear kernel bounds
        k0 = se_kernel(h, c, X)[0]
        g = f.inverse @ k0
        q0 = float(k0 @ g)
        lkb = linear_kernel_bounds(m, lifted, dim)
        pos = g >= 0
        a = np.where(pos, lkb.a_lo, lkb.a_hi)
        b = np.where(pos, lkb.b_lo, lkb.b_hi)
        neg_min, x_relax = _separable_max(-(g * b), X, inv_ell2, lifted)
        lin_min = float(g @ a) - neg_min
        relax = min(sf2, sf2 - (2.0 * lin_min - q0))

        # Taylor bound on the posterior standard deviation
        sd_c = np.sqrt(_variance_at(m, dim, c))
        if active.any():
            C, _, _ = _gradient_covariance(m, dim, c, active)
            r = float(np.linalg.norm(hw))
            ell_min = float(h.ell[active].min())
            slope = np.sqrt(max(float(np.linalg.eigvalsh(C)[-1]), 0.0))
            sd_up = sd_c + r * slope + 0.5 * r * r * _SQRT3 * h.signal_std / ell_min ** 2
        else:
            sd_up = sd_c
        taylor = min(sf2, sd_up * sd_up)

        ns = box.dim
        cands = [lifter.lift_point(box.center), lifter.lift_point(x_relax[:ns])]
        vals = [_variance_at(m, dim, p) for p in cands]
        i = int(np.argmax(vals))
        return max(min(relax, taylor), 0.0), vals[i], cands[i]

    return evaluate


def variance_upper(m: GpModel,
                   b: Box,
                   dim: int,
                   tol: float = 1e-6,
                   control=None,
                   rtol: float = 0.0,
                   node_budget: int = DEFAULT_NODE_BUDGET,
                   trace: bool = False) -> CertifiedInterval:
    """Certified interval around the supremum of the latent variance of output ``dim``."""
    lifter, search = _search_space(m, b, control)
    scale = m.hyperparams[dim].ell[:search.dim]
    return _branch_and_bound(_variance_evaluator(m, dim, lifter), search, scale,
                             tol, rtol, node_budget, trace, f"variance max (output {dim})")


# ------------------------------------------------------------------ #
#  canonical metric
# ------------------------------------------------------------------ #
def canonical_metric(m: GpModel, x1, x2, dim: int) -> float:
    """d(x1, x2) = sqrt(Σ(x1,x1) + Σ(x2,x2) − 2Σ(x1,x2)) for output ``dim``."""
    x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
    s11 = posterior_covariance(m, x1, x1)[dim]
    s22 = posterior_covariance(m, x2, x2)[dim]
    s12 = posterior_covariance(m, x1, x2)[dim]
    return float(np.sqrt(max(s11 + s22 - 2.0 * s12, 0.0)))


def metric_lipschitz(m: GpModel, b: Box, dim: int, control=None) -> float:
    """
    Lipschitz constant of the canonical metric over ``b``: the smallest of
    the global SE bound σ_f/ℓ_min, an interval-arithmetic bound on the
    posterior gradient covariance, and a Taylor bound around the centre.
    """
    lifter, search = _search_space(m, b, control)
    lifted = lifter.lift_box(search)
    active = _active(lifted)
    if not active.any():
        return 0.0

    h, f = m.hyperparams[dim], m.factor(dim)
    X = m.dataset.inputs
    ell_min = float(h.ell[active].min())
    global_bound = h.signal_std / ell_min

    c, hw = lifted.center, lifted.half_width
    C, J, _ = _gradient_covariance(m, dim, c, active)
    lam = float(np.linalg.eigvalsh(C)[-1])
    r = float(np.linalg.norm(hw))
    taylor = np.sqrt(max(lam, 0.0)) + r * _SQRT3 * h.signal_std / ell_min ** 2

    # interval enclosure of each ∂k_j/∂x_d = −k_j(x)·(x_d − X_jd)/ℓ_d² over the box
    z_min, z_max = _z_range(X, lifted, h.ell)
    k_lo = h.signal_variance * np.exp(-0.5 * z_max)[:, None]
    k_hi = h.signal_variance * np.exp(-0.5 * z_min)[:, None]
    inv_ell2 = (1.0 / h.ell ** 2)[active]
    t_lo = (lifted.lower[active] - X[:, active]) * inv_ell2
    t_hi = (lifted.upper[active] - X[:, active]) * inv_ell2
    corners = np.stack([k_lo * t_lo, k_lo * t_hi, k_hi * t_lo, k_hi * t_hi])
    J_lo, J_hi = -corners.max(axis=0), -corners.min(axis=0)
    E = np.maximum(np.abs(J_hi - J), np.abs(J - J_lo))
    B = f.inverse
    cross = np.abs(J.T @ B) @ E
    R = cross + cross.T + E.T @ np.abs(B) @ E
    interval = np.sqrt(max(lam + float(np.linalg.norm(R, 2)), 0.0))

    return float(min(global_bound, taylor, interval))


def canonical_metric_diameter(m: GpModel,
                              b: Box,
                              dim: int,
                              control=None,
                              xi: Optional[float] = None,
                              lipschitz: Optional[float] = None,
                              variance_rtol: float = 0.1,
                              node_budget: int = DEFAULT_NODE_BUDGET) -> float:
    """
    Upper bound on half the diameter of ``b`` under the canonical metric:
    ½·min(prior increment bound, 2√ξ, L·diagonal).
    """
    lifter, search = _search_space(m, b, control)
    lifted = lifter.lift_box(search)
    if lifted.is_point:
        return 0.0
    h = m.hyperparams[dim]
    z_diag = float(np.sum((lifted.width / h.ell) ** 2))
    prior = np.sqrt(-2.0 * h.signal_variance * np.expm1(-0.5 * z_diag))
    if xi is None:
        xi = variance_upper(m, b, dim, tol=1e-12, control=control, rtol=variance_rtol,
                            node_budget=node_budget).hi
    if lipschitz is None:
        lipschitz = metric_lipschitz(m, b, dim, control=control)
    diagonal = float(np.linalg.norm(lifted.width))
    return 0.5 * float(min(prior, 2.0 * np.sqrt(max(xi, 0.0)), lipschitz * diagonal))
