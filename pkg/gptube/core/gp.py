"""
Regresión GP con kernel exponencial cuadrático (ARD): una GP independiente por
dimensión de salida, todas condicionadas sobre las mismas entradas.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import List, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize

logger = logging.getLogger(__name__)

JITTER = 1e-8           # times σ_f², added to the Gram diagonal
VARIANCE_TOL = 1e-9     # times σ_f², negative variance tolerated before failing
_FAILED_NLL = 1e25


class GpFactorizationError(RuntimeError):
    """Gram matrix is not positive definite or a posterior variance went negative."""


# ------------------------------------------------------------------ #
@dataclass(frozen=True)
class Hyperparams:
    signal_variance: float
    lengthscales:    Tuple[float, ...]
    noise_variance:  float = 0.0

    def __post_init__(self):
        ell = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ell)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "noise_variance", float(self.noise_variance))

        if not (np.isfinite(self.signal_variance) and self.signal_variance > 0):
            raise ValueError(f"signal_variance must be positive, got {self.signal_variance}")
        if not ell or not all(np.isfinite(v) and v > 0 for v in ell):
            raise ValueError(f"lengthscales must be positive, got {ell}")
        if not (np.isfinite(self.noise_variance) and self.noise_variance >= 0):
            raise ValueError(f"noise_variance must be non-negative, got {self.noise_variance}")

    @property
    def input_dim(self) -> int:
        return len(self.lengthscales)

    @property
    def ell(self) -> np.ndarray:
        return np.asarray(self.lengthscales)

    @property
    def signal_std(self) -> float:
        return float(np.sqrt(self.signal_variance))

    @property
    def diagonal_load(self) -> float:
        """Noise plus jitter actually added to the Gram diagonal."""
        return self.noise_variance + JITTER * self.signal_variance

    def with_noise(self, noise_variance: float) -> "Hyperparams":
        return replace(self, noise_variance=noise_variance)


@dataclass(eq=False)
class Dataset:
    """Transitions (x ⊕ u) → x'. Inputs are (M, n+m), targets (M, n)."""
    inputs:  np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        Y = np.asarray(self.targets, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.ndim != 2 or Y.ndim != 2:
            raise ValueError("inputs and targets must be 2-D arrays")
        if X.shape[0] < 1:
            raise ValueError("dataset needs at least one point")
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs but {Y.shape[0]} targets")
        if Y.shape[1] > X.shape[1]:
            raise ValueError(f"{Y.shape[1]} outputs cannot exceed {X.shape[1]} inputs")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("dataset contains non-finite values")
        self.inputs, self.targets = X, Y

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_state(self) -> int:
        return self.targets.shape[1]

    @property
    def n_control(self) -> int:
        return self.input_dim - self.n_state

    def append(self, inputs, targets) -> "Dataset":
        X = np.atleast_2d(np.asarray(inputs, dtype=float))
        Y = np.atleast_2d(np.asarray(targets, dtype=float))
        return Dataset(np.vstack([self.inputs, X]), np.vstack([self.targets, Y]))


# ------------------------------------------------------------------ #
def scaled_sqdist(X1, X2, lengthscales) -> np.ndarray:
    """Pairwise Σ_d (x1_d − x2_d)² / ℓ_d², shape (N1, N2)."""
    ell = np.asarray(lengthscales, dtype=float)
    A = np.atleast_2d(X1) / ell
    B = np.atleast_2d(X2) / ell
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def se_kernel(h: Hyperparams, X1, X2) -> np.ndarray:
    return h.signal_variance * np.exp(-0.5 * scaled_sqdist(X1, X2, h.ell))


def kernel_eval(h: Hyperparams, x1, x2) -> float:
    x1 = np.asarray(x1, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x1.shape != (h.input_dim,) or x2.shape != (h.input_dim,):
        raise ValueError(
            f"points of size {x1.size} and {x2.size} do not match {h.input_dim} lengthscales")
    return float(se_kernel(h, x1, x2)[0, 0])


# ------------------------------------------------------------------ #
@dataclass(frozen=True)
class OutputFactor:
    """Cached linear algebra for one output dimension."""
    chol:    np.ndarray     # lower Cholesky factor of K + load·I
    alpha:   np.ndarray     # (K + load·I)⁻¹ y
    inverse: np.ndarray     # (K + load·I)⁻¹
    log_det: float


class GpModel:
    """
    Trained multi-output GP. Immutable after construction: the factorizations
    are computed once and shared by every reader.
    """

    def __init__(self, dataset: Dataset, hyperparams: Sequence[Hyperparams]):
        hyperparams = tuple(hyperparams)
        if len(hyperparams) != dataset.n_state:
            raise ValueError(
                f"{len(hyperparams)} hyperparameter sets for {dataset.n_state} outputs")
        for i, h in enumerate(hyperparams):
            if h.input_dim != dataset.input_dim:
                raise ValueError(
                    f"output {i}: {h.input_dim} lengthscales for {dataset.input_dim} inputs")
        self._dataset = dataset
        self._hyperparams = hyperparams
        self._factors = tuple(self._factorize(i) for i in range(dataset.n_state))

    def _factorize(self, i: int) -> OutputFactor:
        h = self._hyperparams[i]
        X, y = self._dataset.inputs, self._dataset.targets[:, i]
        K = se_kernel(h, X, X)
        K[np.diag_indices_from(K)] += h.diagonal_load
        try:
            c, lower = cho_factor(K, lower=True)
        except LinAlgError as exc:
            raise GpFactorizationError(f"Gram matrix of output {i} is not positive definite") from exc
        L = np.tril(c)
        inverse = cho_solve((L, True), np.eye(K.shape[0]))
        return OutputFactor(
            chol    = L,
            alpha   = cho_solve((L, True), y),
            inverse = 0.5 * (inverse + inverse.T),
            log_det = float(2.0 * np.sum(np.log(np.diag(L)))),
        )

    # -- accessors ----------------------------------------------------
    @property
    def dataset(self) -> Dataset:
        return self._dataset

    @property
    def hyperparams(self) -> Tuple[Hyperparams, ...]:
        return self._hyperparams

    @property
    def n_state(self) -> int:
        return self._dataset.n_state

    @property
    def n_control(self) -> int:
        return self._dataset.n_control

    @property
    def input_dim(self) -> int:
        return self._dataset.input_dim

    def factor(self, i: int) -> OutputFactor:
        return self._factors[i]

    def with_hyperparams(self, hyperparams: Sequence[Hyperparams]) -> "GpModel":
        return GpModel(self._dataset, hyperparams)

    def __repr__(self) -> str:
        return f"GpModel(M={self._dataset.size}, inputs={self.input_dim}, outputs={self.n_state})"


# ------------------------------------------------------------------ #
def _as_points(m: GpModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != m.input_dim:
        raise ValueError(f"expected points of dimension {m.input_dim}, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input point")
    return X


def _checked_variance(var: np.ndarray, signal_variance: float, dim: int) -> np.ndarray:
    floor = -VARIANCE_TOL * signal_variance
    if np.any(var < floor):
        raise GpFactorizationError(
            f"posterior variance {var.min():.3e} of output {dim} below tolerance; "
            f"factorization is broken")
    return np.clip(var, 0.0, signal_variance)


def predict(m: GpModel, X, return_var: bool = True):
    """Batched posterior mean (N, n) and, optionally, latent variance (N, n)."""
    X = _as_points(m, X)
    mean = np.empty((X.shape[0], m.n_state))
    var = np.empty_like(mean) if return_var else None
    for i, h in enumerate(m.hyperparams):
        f = m.factor(i)
        Ks = se_kernel(h, X, m.dataset.inputs)
        mean[:, i] = Ks @ f.alpha
        if return_var:
            v = solve_triangular(f.chol, Ks.T, lower=True)
            var[:, i] = _checked_variance(
                h.signal_variance - np.sum(v * v, axis=0), h.signal_variance, i)
    return (mean, var) if return_var else mean


def posterior_mean(m: GpModel, x) -> np.ndarray:
    return predict(m, x, return_var=False)[0]


def posterior_variance(m: GpModel, x) -> np.ndarray:
    return predict(m, x)[1][0]


def posterior_covariance(m: GpModel, x1, x2) -> np.ndarray:
    """Per-output Σ(x1, x2). Accepts single points or paired rows."""
    single = np.asarray(x1).ndim == 1
    X1, X2 = _as_points(m, x1), _as_points(m, x2)
    if X1.shape != X2.shape:
        raise ValueError(f"paired points must have equal shapes, got {X1.shape} and {X2.shape}")
    out = np.empty((X1.shape[0], m.n_state))
    for i, h in enumerate(m.hyperparams):
        f = m.factor(i)
        v1 = solve_triangular(f.chol, se_kernel(h, X1, m.dataset.inputs).T, lower=True)
        v2 = solve_triangular(f.chol, se_kernel(h, X2, m.dataset.inputs).T, lower=True)
        prior = h.signal_variance * np.exp(-0.5 * np.sum(((X1 - X2) / h.ell) ** 2, axis=1))
        out[:, i] = prior - np.sum(v1 * v2, axis=0)
    return out[0] if single else out


def log_marginal_likelihood(m: GpModel) -> np.ndarray:
    M = m.dataset.size
    out = np.empty(m.n_state)
    for i in range(m.n_state):
        f = m.factor(i)
        y = m.dataset.targets[:, i]
        out[i] = -0.5 * y @ f.alpha - 0.5 * f.log_det - 0.5 * M * np.log(2.0 * np.pi)
    return out


# ------------------------------------------------------------------ #
@dataclass
class FitReport:
    log_likelihood:      List[float] = field(default_factory=list)
    successful_restarts: List[int] = field(default_factory=list)
    warning:             bool = False
    messages:            List[str] = field(default_factory=list)


def _neg_log_evidence(theta: np.ndarray, sq_diff: np.ndarray, y: np.ndarray) -> float:
    sf2, ell, sn2 = np.exp(theta[0]), np.exp(theta[1:-1]), np.exp(theta[-1])
    K = sf2 * np.exp(-0.5 * sq_diff @ (1.0 / ell ** 2))
    K[np.diag_indices_from(K)] += sn2 + JITTER * sf2
    try:
        c, lower = cho_factor(K, lower=True)
    except LinAlgError:
        return _FAILED_NLL
    alpha = cho_solve((c, lower), y)
    value = 0.5 * y @ alpha + np.sum(np.log(np.diag(c))) + 0.5 * y.size * np.log(2.0 * np.pi)
    return float(value) if np.isfinite(value) else _FAILED_NLL


def _search_space(X: np.ndarray, y: np.ndarray):
    """Log-space bounds and the data-driven starting point of the search."""
    span = np.ptp(X, axis=0)
    span = np.where(span > 0, span, 1.0)
    scale = max(float(np.mean(y ** 2)), 1e-8)
    lower = np.r_[np.log(1e-8), np.log(1e-3 * span), np.log(1e-10)]
    upper = np.r_[np.log(1e3 * scale), np.log(1e3 * span), np.log(scale)]
    start = np.r_[np.log(scale), np.log(0.5 * span), np.log(1e-2 * scale)]
    return lower, upper, np.clip(start, lower, upper)


def fit_hyperparameters(d: Dataset,
                        restarts: int = 3,
                        seed: int = 0) -> Tuple[List[Hyperparams], FitReport]:
    """
    Maximum marginal likelihood per output, Nelder–Mead in log space.

    Restart 0 starts from data heuristics, the others from seeded Gaussian
    perturbations of it. If no restart converges the best point found is
    still returned and ``FitReport.warning`` is set.
    """
    if d.size < 2:
        raise ValueError(f"fitting needs at least 2 points, got {d.size}")
    if restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {restarts}")

    rng = np.random.default_rng(seed)
    X = d.inputs
    sq_diff = (X[:, None, :] - X[None, :, :]) ** 2
    report = FitReport()
    fitted: List[Hyperparams] = []

    for i in range(d.n_state):
        y = d.targets[:, i]
        lower, upper, start = _search_space(X, y)
        starts = [start] + [np.clip(start + rng.normal(0.0, 1.0, size=start.size), lower, upper)
                            for _ in range(restarts - 1)]
        best, converged = None, 0
        for r, x0 in enumerate(starts):
            res = minimize(_neg_log_evidence, x0, args=(sq_diff, y),
                           method  = "Nelder-Mead",
                           bounds  = list(zip(lower, upper)),
                           options = {"maxiter": 300 * x0.size, "xatol": 1e-4, "fatol": 1e-7})
            if not np.isfinite(res.fun) or res.fun >= _FAILED_NLL:
                logger.debug("output %d restart %d failed: %s", i, r, res.message)
                continue
            converged += int(bool(res.success))
            if best is None or res.fun < best.fun:
                best = res

        theta = start if best is None else np.clip(best.x, lower, upper)
        fitted.append(Hyperparams(
            signal_variance = float(np.exp(theta[0])),
            lengthscales    = tuple(np.exp(theta[1:-1])),
            noise_variance  = float(np.exp(theta[-1])),
        ))
        report.successful_restarts.append(converged)
        report.log_likelihood.append(
            -(best.fun if best is not None else _neg_log_evidence(theta, sq_diff, y)))
        if converged == 0:
            report.warning = True
            msg = f"output {i}: no restart converged, returning best point found"
            report.messages.append(msg)
            logger.warning(msg)
        logger.info("output %d fitted: %s (log evidence %.4g)", i, fitted[-1], report.log_likelihood[-1])

    return fitted, report
