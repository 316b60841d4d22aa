"""
Certified probability tubes around a deterministic predictor.

For each step the supremum of the GP over the current tube region is
bounded with a Gaussian tail (expected supremum from an entropy integral,
concentration from the worst-case variance), then the error probability is
propagated as p_{t+1} = q·(1 − p_t) + p_t and the smallest radius keeping
p_{t+1} < ε is picked from a grid.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erfc
from scipy.stats import norm

from .control import ControlInput, StepControl
from .gp import GpModel
from .predictors import Predictor, make_predictor
from .regions import (DEFAULT_NODE_BUDGET, Box, canonical_metric_diameter, mean_extrema,
                      metric_lipschitz, variance_upper)

logger = logging.getLogger(__name__)

DUDLEY_MIN_PANELS = 16
DUDLEY_MAX_PANELS = 10_000
DUDLEY_RTOL = 1e-4


class TubeShape(Enum):
    L1 = "l1"       # L1 ball of radius K, enclosed by the hypercube of half-side K
    BOX = "box"     # axis-aligned box with one half-width per state dimension


class InfeasibleStepError(RuntimeError):
    """No grid radius meets ε at step ``t``; carries the best radius tried."""

    def __init__(self, t: int, best_k, best_p: float, reason: str = ""):
        self.t = t
        self.best_k = best_k
        self.best_p = float(best_p)
        self.partial: Optional["BoundSchedule"] = None
        msg = f"step {t}: no radius meets the tolerance (best K={np.round(best_k, 6).tolist()}, p={best_p:.4g})"
        super().__init__(f"{msg}; {reason}" if reason else msg)

    def to_dict(self) -> Dict:
        return {"t": self.t, "best_k": np.atleast_1d(self.best_k).tolist(), "best_p": self.best_p}


# ------------------------------------------------------------------ #
@dataclass
class KGrid:
    kind:  str = "geometric"
    start: float = 1e-3
    stop:  float = 10.0
    num:   Optional[int] = 60
    step:  Optional[float] = None

    def values(self) -> np.ndarray:
        if not 0 < self.start <= self.stop:
            raise ValueError(f"K-grid needs 0 < start <= stop, got {self.start}, {self.stop}")
        if self.kind == "geometric":
            return np.geomspace(self.start, self.stop, int(self.num or 60))
        if self.kind == "linear":
            if self.step:
                count = int(np.floor((self.stop - self.start) / self.step + 1e-9)) + 1
                return self.start + self.step * np.arange(count)
            return np.linspace(self.start, self.stop, int(self.num or 60))
        raise ValueError(f"Unsupported K-grid kind: {self.kind}. Supported: geometric, linear")

    @classmethod
    def from_dict(cls, d: Dict) -> "KGrid":
        return cls(kind  = d.get("kind", "geometric"),
                   start = float(d.get("start", 1e-3)),
                   stop  = float(d.get("stop", 10.0)),
                   num   = d.get("num"),
                   step  = d.get("step"))

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "start": self.start, "stop": self.stop,
                "num": self.num, "step": self.step}


@dataclass
class BoundSettings:
    mean_tol:       float = 1e-3
    mean_rtol:      float = 0.0
    variance_tol:   float = 1e-12
    variance_rtol:  float = 0.1
    node_budget:    int = DEFAULT_NODE_BUDGET
    dudley_n:       Optional[float] = None
    grid:           KGrid = field(default_factory=KGrid)
    initial_share:  float = 0.2
    tube:           TubeShape = TubeShape.L1
    k0:             Optional[float] = None
    predictor:      str = "mean"
    trace:          bool = False

    def __post_init__(self):
        self.tube = TubeShape(self.tube) if not isinstance(self.tube, TubeShape) else self.tube
        if not 0 < self.initial_share < 1:
            raise ValueError(f"initial_share must be in (0, 1), got {self.initial_share}")
        if self.dudley_n is not None and self.dudley_n <= 0:
            raise ValueError(f"dudley_n must be positive, got {self.dudley_n}")


# ------------------------------------------------------------------ #
@dataclass(eq=False)
class RegionStatistics:
    """Per-output quantities of one step; only the tail depends on K_{t+1}."""
    region:          Box
    input_box:       Box
    predictor_value: np.ndarray
    sup_mean:        np.ndarray      # sup |μ^i(x) − g^i|
    xi:              np.ndarray      # sup posterior variance
    lam:             np.ndarray      # half canonical-metric diameter
    lipschitz:       np.ndarray
    side:            float
    dims:            int
    dudley:          np.ndarray
    budget_exceeded: bool = False
    traces:          Optional[List[Any]] = None


@dataclass(eq=False)
class StepCertificate:
    t:           int
    k:           float              # L1 radius, or the largest half-width of a box tube
    p:           float
    center:      np.ndarray
    region:      Box
    half_widths: np.ndarray
    tube:        TubeShape = TubeShape.L1
    q:           Optional[float] = None
    eta:         Optional[np.ndarray] = None
    xi:          Optional[np.ndarray] = None
    lam:         Optional[np.ndarray] = None
    lipschitz:   Optional[np.ndarray] = None
    sup_mean:    Optional[np.ndarray] = None
    dudley:      Optional[np.ndarray] = None
    vacuous:         bool = False
    budget_exceeded: bool = False
    predictor_state: Any = field(default=None, repr=False)
    trace:           Optional[List[Any]] = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"error probability {self.p} outside [0, 1]")
        if self.k <= 0:
            raise ValueError(f"tube radius must be positive, got {self.k}")

    def deviation(self, x) -> np.ndarray:
        """L1 distance to the centre, or the worst per-dimension ratio for box tubes."""
        dev = np.abs(np.asarray(x, dtype=float) - self.center)
        if self.tube is TubeShape.L1:
            return dev.sum(axis=-1)
        return np.max(dev / self.half_widths, axis=-1)

    def contains(self, x):
        bound = self.k if self.tube is TubeShape.L1 else 1.0
        inside = self.deviation(x) <= bound
        return bool(inside) if np.ndim(inside) == 0 else inside


@dataclass(eq=False)
class BoundSchedule:
    epsilon: float
    horizon: int
    steps:   List[StepCertificate] = field(default_factory=list)
    tube:    TubeShape = TubeShape.L1
    diagnosis: Optional[str] = None

    @property
    def complete(self) -> bool:
        return len(self.steps) == self.horizon + 1

    @property
    def centers(self) -> np.ndarray:
        return np.array([s.center for s in self.steps])

    @property
    def half_widths(self) -> np.ndarray:
        return np.array([s.half_widths for s in self.steps])

    @property
    def radii(self) -> np.ndarray:
        return np.array([s.k for s in self.steps])

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([s.p for s in self.steps])

    def __len__(self) -> int:
        return len(self.steps)


# ------------------------------------------------------------------ #
def next_error_probability(p_t: float, q: float) -> float:
    return float(min(1.0, q * (1.0 - p_t) + p_t))


def _diagonal_variances(cov0, n: int) -> np.ndarray:
    cov = np.asarray(cov0, dtype=float)
    if cov.ndim <= 1:
        var = np.broadcast_to(cov, (n,)).astype(float)
    else:
        if cov.shape != (n, n):
            raise ValueError(f"initial covariance of shape {cov.shape} for {n} states")
        var = np.diag(cov).copy()
        off = cov - np.diag(var)
        if np.any(np.abs(off) > 1e-12 * max(1.0, float(np.abs(var).max()))):
            raise ValueError("initial covariance must be diagonal")
    if np.any(var < 0) or not np.all(np.isfinite(var)):
        raise ValueError(f"initial variances must be finite and non-negative, got {var}")
    return var


def initial_error_probability(mu0, cov0, center, k0, tube: Union[str, TubeShape] = TubeShape.L1) -> float:
    """
    Upper bound on P(x_0 outside the tube). For L1 tubes the mass of the
    inscribed cube (half-side K_0/n) is used.
    """
    tube = TubeShape(tube) if not isinstance(tube, TubeShape) else tube
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    n = mu0.size
    center = np.broadcast_to(np.asarray(center, dtype=float), (n,))
    var = _diagonal_variances(cov0, n)
    k0 = np.asarray(k0, dtype=float)
    if np.any(k0 <= 0):
        raise ValueError(f"K0 must be positive, got {k0}")
    half = np.full(n, float(k0) / n) if tube is TubeShape.L1 else np.broadcast_to(k0, (n,)).astype(float)

    sd = np.sqrt(var)
    mass = np.empty(n)
    for d in range(n):
        if sd[d] == 0:
            mass[d] = float(abs(center[d] - mu0[d]) <= half[d])
        else:
            a = (center[d] - half[d] - mu0[d]) / sd[d]
            b = (center[d] + half[d] - mu0[d]) / sd[d]
            mass[d] = 1.0 - norm.cdf(a) - norm.sf(b)
    if np.any(mass <= 0):
        return 1.0
    return float(min(1.0, max(0.0, -np.expm1(np.sum(np.log(mass))))))


def dudley_integral(L: float, D: float, n: int, lam: float, N: Optional[float] = None) -> float:
    """
    Upper bound on 12·∫_0^λ sqrt(ln((√N·L·D/z + 1)^n)) dz.

    The integrand is decreasing, so a left-endpoint sum bounds it from above;
    the first panel, where the integrand blows up, is bounded in closed form.
    Panels double until the relative change drops below 1e-4.
    """
    if min(L, D, n, lam) < 0:
        raise ValueError(f"arguments must be non-negative, got L={L}, D={D}, n={n}, λ={lam}")
    if lam == 0 or n == 0:
        return 0.0
    N = n if N is None else N
    c = np.sqrt(N) * L * D
    if c == 0:
        return 0.0

    def upper_sum(panels: int) -> float:
        h = lam / panels
        A = c + h
        w0 = np.log(A / h)
        first = h * np.sqrt(w0) + 0.5 * A * np.sqrt(np.pi) * erfc(np.sqrt(w0))
        z = h * np.arange(1, panels)
        return float(first + h * np.sum(np.sqrt(np.log1p(c / z))))

    panels = DUDLEY_MIN_PANELS
    value = upper_sum(panels)
    while panels < DUDLEY_MAX_PANELS:
        panels = min(2 * panels, DUDLEY_MAX_PANELS)
        refined = upper_sum(panels)
        done = abs(value - refined) <= DUDLEY_RTOL * refined
        value = refined
        if done:
            break
    return 12.0 * np.sqrt(n) * value


# ------------------------------------------------------------------ #
def region_statistics(m: GpModel,
                      region: Box,
                      predictor_value,
                      step: StepControl,
                      settings: Optional[BoundSettings] = None) -> RegionStatistics:
    settings = settings or BoundSettings()
    g = np.asarray(predictor_value, dtype=float)
    lifted = step.lift_box(region)
    dims = int(np.count_nonzero(lifted.width > 0))
    side = float(lifted.width.max()) if dims else 0.0
    N = settings.dudley_n if settings.dudley_n is not None else dims

    n = m.n_state
    sup_mean, xi, lam, lip, dud = (np.zeros(n) for _ in range(5))
    exceeded = False
    traces = [] if settings.trace else None
    for i in range(n):
        lo, hi = mean_extrema(m, region, i, tol=settings.mean_tol, control=step,
                              rtol=settings.mean_rtol, node_budget=settings.node_budget,
                              trace=settings.trace)
        var = variance_upper(m, region, i, tol=settings.variance_tol, control=step,
                             rtol=settings.variance_rtol, node_budget=settings.node_budget)
        exceeded |= lo.budget_exceeded or hi.budget_exceeded or var.budget_exceeded
        sup_mean[i] = max(hi.hi - g[i], g[i] - lo.lo, 0.0)
        xi[i] = var.hi
        lip[i] = metric_lipschitz(m, region, i, control=step)
        lam[i] = canonical_metric_diameter(m, region, i, control=step, xi=xi[i], lipschitz=lip[i])
        dud[i] = dudley_integral(lip[i], side, dims, lam[i], N)
        if traces is not None:
            traces.append({"output": i, "mean_min": lo.trace, "mean_max": hi.trace})

    logger.debug("region %s: sup|μ−g|=%s ξ=%s λ=%s L=%s Dudley=%s",
                 region, sup_mean, xi, lam, lip, dud)
    return RegionStatistics(region, lifted, g, sup_mean, xi, lam, lip, side, dims, dud,
                            budget_exceeded=exceeded, traces=traces)


def _tail_terms(stats: RegionStatistics, eta: np.ndarray) -> np.ndarray:
    terms = np.zeros_like(eta)
    pos = stats.xi > 0
    terms[pos] = 2.0 * np.exp(-eta[pos] ** 2 / (2.0 * stats.xi[pos]))
    return terms


def _eta(stats: RegionStatistics, k_next, tube: TubeShape) -> np.ndarray:
    n = stats.sup_mean.size
    if tube is TubeShape.L1:
        return (float(k_next) - stats.sup_mean.sum()) / n - stats.dudley
    return np.broadcast_to(np.asarray(k_next, dtype=float), (n,)) - stats.sup_mean - stats.dudley


def tail_probability(stats: RegionStatistics, k_next, tube: TubeShape = TubeShape.L1):
    """(q, vacuous, η̄) for the radius ``k_next`` given the step statistics."""
    eta = _eta(stats, k_next, tube)
    if np.any(eta <= 0):
        return 1.0, True, eta
    return float(min(1.0, _tail_terms(stats, eta).sum())), False, eta


@dataclass(eq=False)
class TailEstimate:
    q:       float
    vacuous: bool
    eta:     np.ndarray
    stats:   RegionStatistics


def sup_tail_probability(m: GpModel,
                         region: Box,
                         predictor_value,
                         u,
                         k_next,
                         settings: Optional[BoundSettings] = None,
                         t: int = 0) -> TailEstimate:
    """Bound on P(sup over ``region`` of |g − f(x, u)| > K_next)."""
    settings = settings or BoundSettings()
    step = u if isinstance(u, StepControl) else ControlInput.from_any(u, m.n_control).at(t)
    stats = region_statistics(m, region, predictor_value, step, settings)
    q, vacuous, eta = tail_probability(stats, k_next, settings.tube)
    if vacuous:
        logger.info("tail bound vacuous on %s: η̄=%s", region, eta)
    return TailEstimate(q, vacuous, eta, stats)


# ------------------------------------------------------------------ #
def _certificate(t, half_widths, p, center, tube, stats=None, q=None, eta=None,
                 vacuous=False, state=None) -> StepCertificate:
    half_widths = np.asarray(half_widths, dtype=float)
    k = float(half_widths[0]) if tube is TubeShape.L1 else float(half_widths.max())
    return StepCertificate(
        t               = t,
        k               = k,
        p               = float(p),
        center          = np.asarray(center, dtype=float),
        region          = Box.around(center, half_widths),
        half_widths     = half_widths,
        tube            = tube,
        q               = q,
        eta             = eta,
        xi              = None if stats is None else stats.xi,
        lam             = None if stats is None else stats.lam,
        lipschitz       = None if stats is None else stats.lipschitz,
        sup_mean        = None if stats is None else stats.sup_mean,
        dudley          = None if stats is None else stats.dudley,
        vacuous         = vacuous,
        budget_exceeded = bool(stats is not None and stats.budget_exceeded),
        predictor_state = state,
        trace           = None if stats is None else stats.traces,
    )


def _advance(prev: StepCertificate, m: GpModel, controls, predictor: Optional[Predictor]):
    ctrl = ControlInput.from_any(controls, m.n_control)
    step = ctrl.at(prev.t)
    predictor = predictor or make_predictor("mean")
    center, state = predictor.advance(m, prev.t, prev.center, step, prev.predictor_state)
    return step, center, state


def propagate_step(prev: StepCertificate,
                   m: GpModel,
                   controls,
                   predictor: Optional[Predictor],
                   k_next,
                   settings: Optional[BoundSettings] = None,
                   stats: Optional[RegionStatistics] = None) -> StepCertificate:
    """One step of the recursion p_{t+1} = q·(1 − p_t) + p_t for a given radius."""
    settings = settings or BoundSettings()
    step, center, state = _advance(prev, m, controls, predictor)
    if stats is None:
        stats = region_statistics(m, prev.region, center, step, settings)
    q, vacuous, eta = tail_probability(stats, k_next, settings.tube)
    n = m.n_state
    half = np.full(n, float(k_next)) if settings.tube is TubeShape.L1 \
        else np.broadcast_to(np.asarray(k_next, dtype=float), (n,))
    return _certificate(prev.t + 1, half, next_error_probability(prev.p, q), center,
                        settings.tube, stats, q, eta, vacuous, state)


def _smallest(grid: np.ndarray, ok) -> Optional[int]:
    """Index of the first grid value with ok(value), assuming monotonicity."""
    if not ok(grid[-1]):
        return None
    lo, hi = 0, grid.size - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if ok(grid[mid]):
            hi = mid
        else:
            lo = mid + 1
    return lo


def select_k(prev: StepCertificate,
             m: GpModel,
             controls,
             predictor: Optional[Predictor],
             epsilon: float,
             grid: Optional[Sequence[float]] = None,
             settings: Optional[BoundSettings] = None) -> Tuple[Any, StepCertificate]:
    """Smallest grid radius with p_{t+1} < ε (binary search; p is monotone in K)."""
    settings = settings or BoundSettings()
    grid = _check_grid(settings.grid.values() if grid is None else grid)
    if not 0 < epsilon <= 1:
        raise ValueError(f"epsilon must be in (0, 1], got {epsilon}")
    step, center, state = _advance(prev, m, controls, predictor)
    stats = region_statistics(m, prev.region, center, step, settings)
    n, tube = m.n_state, settings.tube

    if tube is TubeShape.L1:
        def p_of(k):
            return next_error_probability(prev.p, tail_probability(stats, k, tube)[0])

        idx = 0 if epsilon >= 1 else _smallest(grid, lambda k: p_of(k) < epsilon)
        if idx is None:
            raise InfeasibleStepError(prev.t + 1, grid[-1], p_of(grid[-1]))
        k_next = float(grid[idx])
        half = np.full(n, k_next)
    else:
        budget = 1.0 if epsilon >= 1 else (epsilon - prev.p) / (1.0 - prev.p)
        share = budget / n
        half = np.empty(n)
        for i in range(n):
            def ok(k, i=i):
                if epsilon >= 1:
                    return True
                eta = k - stats.sup_mean[i] - stats.dudley[i]
                if eta <= 0:
                    return False
                term = 0.0 if stats.xi[i] <= 0 else 2.0 * np.exp(-eta ** 2 / (2.0 * stats.xi[i]))
                return term < share
            idx = _smallest(grid, ok) if budget > 0 else None
            if idx is None:
                best = np.full(n, grid[-1])
                q = tail_probability(stats, best, tube)[0]
                raise InfeasibleStepError(prev.t + 1, best, next_error_probability(prev.p, q),
                                          f"output {i} cannot meet its share {share:.3g}")
            half[i] = grid[idx]
        k_next = half.copy()

    q, vacuous, eta = tail_probability(stats, half if tube is TubeShape.BOX else k_next, tube)
    cert = _certificate(prev.t + 1, half, next_error_probability(prev.p, q), center,
                        tube, stats, q, eta, vacuous, state)
    return k_next, cert


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("K-grid must be non-empty, positive and strictly ascending")
    return grid


def initial_certificate(mu0, cov0, center, epsilon: float, grid, settings: BoundSettings,
                        state=None) -> StepCertificate:
    """t = 0: fixed K_0, or the smallest grid radius spending ``initial_share``·ε."""
    tube = settings.tube
    n = np.atleast_1d(mu0).size

    def p0(k):
        return initial_error_probability(mu0, cov0, center, k, tube)

    if settings.k0 is not None:
        k0 = float(settings.k0)
        p = p0(k0)
        if epsilon < 1 and p >= epsilon:
            raise InfeasibleStepError(0, k0, p, "initial radius is too small for the initial covariance")
    else:
        target = settings.initial_share * epsilon
        idx = 0 if epsilon >= 1 else _smallest(grid, lambda k: p0(k) < target)
        if idx is None:
            raise InfeasibleStepError(0, grid[-1], p0(grid[-1]))
        k0 = float(grid[idx])
        p = p0(k0)
    return _certificate(0, np.full(n, k0), p, center, tube, state=state)


def bound_trajectory(m: GpModel,
                     init: Tuple[Any, Any],
                     controls,
                     predictor: Optional[Predictor] = None,
                     horizon: int = 10,
                     epsilon: float = 0.05,
                     grid: Optional[Sequence[float]] = None,
                     settings: Optional[BoundSettings] = None) -> BoundSchedule:
    """
    Full tube t = 0..H. On an infeasible step the error raised carries the
    partial schedule in ``exc.partial``.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if not 0 < epsilon <= 1:
        raise ValueError(f"epsilon must be in (0, 1], got {epsilon}")
    settings = settings or BoundSettings()
    grid = _check_grid(settings.grid.values() if grid is None else grid)
    ctrl = ControlInput.from_any(controls, m.n_control)
    if ctrl.n_control != m.n_control:
        raise ValueError(f"{ctrl.n_control} controls for a model with {m.n_control} control inputs")
    ctrl.check_horizon(horizon)
    predictor = predictor or make_predictor(settings.predictor)

    mu0, cov0 = init
    center, state = predictor.reset(m, mu0, cov0, ctrl)
    schedule = BoundSchedule(epsilon=epsilon, horizon=horizon, tube=settings.tube)
    try:
        cert = initial_certificate(mu0, cov0, center, epsilon, grid, settings, state)
        schedule.steps.append(cert)
        for _ in range(horizon):
            _, cert = select_k(cert, m, ctrl, predictor, epsilon, grid, settings)
            schedule.steps.append(cert)
            logger.info("t=%d K=%s p=%.4g", cert.t, np.round(cert.half_widths, 6).tolist(), cert.p)
    except InfeasibleStepError as exc:
        schedule.diagnosis = str(exc)
        exc.partial = schedule
        logger.warning("certification stopped: %s", exc)
        raise
    return schedule


# ------------------------------------------------------------------ #
@dataclass
class SafetyReport:
    safe:            bool
    first_violation: Optional[int]
    margins:         List[float]


def safety_check(schedule: BoundSchedule, safe_box: Box) -> SafetyReport:
    """Every tube region inside ``safe_box``; margins are the smallest clearance per step."""
    margins = []
    first = None
    for s in schedule.steps:
        margin = float(min(np.min(s.region.lower - safe_box.lower),
                           np.min(safe_box.upper - s.region.upper)))
        margins.append(margin)
        if margin < 0 and first is None:
            first = s.t
    return SafetyReport(safe=first is None, first_violation=first, margins=margins)
