"""Loss models and the risk minimizer ``G(d) = argmin_theta E_d loss(Z; theta)``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .distribution import (
    DimensionError,
    Distribution,
    MixtureDistribution,
    Population,
    ScalarPointMass,
    vector_norm,
)

SCALAR_SQUARED = "scalar_squared"
REGULARIZED_LOGISTIC = "regularized_logistic"


class NonConvergenceError(RuntimeError):
    """An iterative procedure ran out of steps.

    ``last`` holds the final iterate and ``residual`` the quantity that failed
    to drop below tolerance (a gradient norm or a distance).
    """

    def __init__(self, message, last=None, residual=None):
        super().__init__(message)
        self.last = last
        self.residual = residual


@dataclass(frozen=True)
class Box:
    """Closed box ``[lower, upper]`` (bounds may be infinite or per-coordinate)."""

    lower: float | tuple = -math.inf
    upper: float | tuple = math.inf

    def __post_init__(self):
        if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise ValueError(f"empty box: lower={self.lower!r} upper={self.upper!r}")

    def project(self, x):
        x = np.asarray(x)
        lo = np.asarray(self.lower, dtype=x.dtype)
        hi = np.asarray(self.upper, dtype=x.dtype)
        return np.minimum(np.maximum(x, lo), hi)

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= np.asarray(self.lower)) and np.all(x <= np.asarray(self.upper)))

    @property
    def is_unconstrained(self) -> bool:
        return bool(np.all(np.isneginf(self.lower)) and np.all(np.isposinf(self.upper)))


UNCONSTRAINED = Box()
HALF_LINE = Box(1.0, math.inf)


@dataclass(frozen=True, eq=False)
class Classifier:
    """Parameter vector in a closed convex domain; projected into it on construction."""

    params: np.ndarray
    domain: Box = UNCONSTRAINED

    def __post_init__(self):
        theta = np.asarray(self.params)
        if theta.dtype.kind != "f":
            theta = theta.astype(float)
        theta = self.domain.project(theta.reshape(-1))
        if not np.all(np.isfinite(theta)):
            raise ValueError("classifier parameters must be finite")
        theta = theta.copy()
        theta.setflags(write=False)
        object.__setattr__(self, "params", theta)

    @property
    def dim(self) -> int:
        return self.params.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.params, dtype=dtype)

    def __repr__(self):
        return f"Classifier({np.asarray(self.params, dtype=float).tolist()!r})"


def as_params(theta) -> np.ndarray:
    """Raw parameter vector from a Classifier or array-like."""
    if isinstance(theta, Classifier):
        return theta.params
    theta = np.asarray(theta)
    if theta.dtype.kind != "f":
        theta = theta.astype(float)
    return theta.reshape(-1)


@dataclass(frozen=True)
class LossModel:
    """A loss with its curvature constants.

    ``beta=None`` means the smoothness constant depends on the data and is
    bounded per distribution by :func:`smoothness_bound`.  ``l_z=None`` means
    the loss is not globally Lipschitz in ``z``.  With
    ``unpenalized_intercept=True`` the last coordinate is left out of the L2
    penalty; strong convexity with ``gamma = lam`` then only holds along the
    other coordinates.
    """

    kind: str
    gamma: float
    beta: float | None
    lam: float = 0.0
    l_z: float | None = None
    domain: Box = UNCONSTRAINED
    unpenalized_intercept: bool = False

    def __post_init__(self):
        if self.kind == SCALAR_SQUARED:
            if self.gamma != 2.0 or self.beta != 2.0:
                raise ValueError("squared loss has gamma = beta = 2")
        elif self.kind == REGULARIZED_LOGISTIC:
            if self.lam < 0:
                raise ValueError("lam must be nonnegative")
            if self.gamma != self.lam:
                raise ValueError("logistic loss has gamma = lam")
        else:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.beta is not None and self.gamma > self.beta:
            raise ValueError("gamma must not exceed beta")


def scalar_squared(domain: Box = HALF_LINE) -> LossModel:
    """``(y - theta)^2`` over a one-dimensional domain (default ``[1, inf)``)."""
    return LossModel(SCALAR_SQUARED, gamma=2.0, beta=2.0, domain=domain)


def regularized_logistic(lam: float = 1.0, unpenalized_intercept: bool = False,
                         domain: Box = UNCONSTRAINED) -> LossModel:
    """``log(1 + exp(-y <theta, x>)) + lam/2 ||theta||^2``."""
    return LossModel(REGULARIZED_LOGISTIC, gamma=float(lam), beta=None, lam=float(lam), domain=domain,
                     unpenalized_intercept=unpenalized_intercept)


@dataclass(frozen=True)
class MinimizerConfig:
    tolerance: float = 1e-8
    max_steps: int = 100_000
    step_rule: str = "fixed"

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.step_rule not in ("fixed", "backtracking"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")


def _penalty_mask(m: LossModel, dim: int) -> np.ndarray:
    mask = np.ones(dim)
    if m.unpenalized_intercept and dim > 0:
        mask[-1] = 0.0
    return mask


def _check_dims(m: LossModel, x, theta):
    if m.kind == SCALAR_SQUARED:
        if theta.size != 1:
            raise DimensionError("squared loss takes a one-dimensional classifier")
    elif np.asarray(x).reshape(-1).size != theta.size:
        raise DimensionError(f"x has {np.asarray(x).size} entries, theta has {theta.size}")


def loss_value(m: LossModel, z, theta) -> float:
    """Loss of a single feature-label pair ``z = (x, y)``."""
    x, y = z
    theta = as_params(theta)
    _check_dims(m, x, theta)
    if m.kind == SCALAR_SQUARED:
        return (y - theta[0]) ** 2
    x = np.asarray(x, dtype=float).reshape(-1)
    margin = y * (x @ theta)
    pen = theta * _penalty_mask(m, theta.size)
    return float(np.logaddexp(0.0, -margin) + 0.5 * m.lam * (pen @ pen))


def loss_grad(m: LossModel, z, theta) -> np.ndarray:
    """Gradient of :func:`loss_value` with respect to ``theta``."""
    x, y = z
    theta = as_params(theta)
    _check_dims(m, x, theta)
    if m.kind == SCALAR_SQUARED:
        return np.array([-2.0 * (y - theta[0])], dtype=theta.dtype)
    x = np.asarray(x, dtype=float).reshape(-1)
    s = expit(-y * (x @ theta))
    return -y * s * x + m.lam * _penalty_mask(m, theta.size) * theta


def _weighted_sample(d) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(d, Population):
        return d.features, d.labels, d.weights
    if isinstance(d, MixtureDistribution):
        return d.flatten()
    raise TypeError(f"logistic loss needs a population or mixture, got {type(d).__name__}")


def _logistic_risk(m, X, y, w, theta, mask) -> float:
    pen = theta * mask
    return float(w @ np.logaddexp(0.0, -y * (X @ theta)) + 0.5 * m.lam * (pen @ pen))


def _logistic_risk_grad(m, X, y, w, theta, mask) -> np.ndarray:
    s = expit(-y * (X @ theta))
    return -(X.T @ (w * y * s)) + m.lam * mask * theta


def expected_loss(m: LossModel, d: Distribution, theta) -> float:
    """``E_{Z~d} loss(Z; theta)``."""
    theta = as_params(theta)
    if m.kind == SCALAR_SQUARED:
        if not isinstance(d, ScalarPointMass):
            raise TypeError("squared loss is paired with point-mass distributions")
        if theta.size != 1:
            raise DimensionError("squared loss takes a one-dimensional classifier")
        return (d.value - theta[0]) ** 2
    X, y, w = _weighted_sample(d)
    if X.shape[1] != theta.size:
        raise DimensionError(f"distribution has {X.shape[1]} features, theta has {theta.size}")
    return _logistic_risk(m, X, y, w, theta, _penalty_mask(m, theta.size))


def smoothness_bound(m: LossModel, d) -> float:
    """Analytic smoothness constant, using the data when ``m.beta`` is None."""
    if m.beta is not None:
        return m.beta
    X, _, _ = _weighted_sample(d)
    return m.lam + float(np.max(np.einsum("ij,ij->i", X, X))) / 4.0


@dataclass
class MinimizeInfo:
    steps: int
    grad_norm: float
    step_size: float


def projected_gradient_descent(
    value: Callable, grad: Callable, x0: np.ndarray, domain: Box, beta: float, cfg: MinimizerConfig
) -> tuple[np.ndarray, MinimizeInfo]:
    """Projected gradient descent stopping on the gradient-mapping norm.

    With ``step_rule="fixed"`` the step is ``1/beta``.  With ``"backtracking"``
    the step starts at ``1/beta``, is doubled after each accepted step and
    halved until the quadratic upper model holds.
    """
    x = domain.project(np.asarray(x0))
    step = 1.0 / beta
    fx = value(x) if cfg.step_rule == "backtracking" else None
    for k in range(cfg.max_steps + 1):
        g = grad(x)
        x_new = domain.project(x - step * g)
        gnorm = float(vector_norm(x - x_new)) / step
        if gnorm <= cfg.tolerance:
            return x, MinimizeInfo(k, gnorm, step)
        if k == cfg.max_steps:
            break
        if cfg.step_rule == "backtracking":
            step *= 2.0
            while True:
                x_new = domain.project(x - step * g)
                diff = x_new - x
                f_new = value(x_new)
                if f_new <= fx + g @ diff + (diff @ diff) / (2 * step) + 1e-15 * abs(fx):
                    break
                step *= 0.5
            fx = f_new
        x = x_new
    raise NonConvergenceError(
        f"minimizer did not reach tolerance {cfg.tolerance} in {cfg.max_steps} steps "
        f"(gradient-mapping norm {gnorm:.3e})",
        last=x,
        residual=gnorm,
    )


def minimize(m: LossModel, d: Distribution, cfg: MinimizerConfig | None = None, warm_start=None,
             full_output: bool = False):
    """Risk minimizer ``G(d)``.

    The squared loss is solved in closed form (projection of the mean outcome
    onto the domain).  The logistic loss uses projected gradient descent with
    step ``1/beta`` started from ``warm_start`` (zeros if absent).
    """
    cfg = cfg or MinimizerConfig()
    if m.kind == SCALAR_SQUARED:
        if not isinstance(d, ScalarPointMass):
            raise TypeError("squared loss is paired with point-mass distributions")
        theta = m.domain.project(np.array([d.value], dtype=np.longdouble))
        clf = Classifier(theta, m.domain)
        return (clf, MinimizeInfo(0, 0.0, 0.5)) if full_output else clf

    X, y, w = _weighted_sample(d)
    dim = X.shape[1]
    mask = _penalty_mask(m, dim)
    x0 = np.zeros(dim) if warm_start is None else np.asarray(as_params(warm_start), dtype=float)
    if x0.size != dim:
        raise DimensionError(f"warm start has {x0.size} entries, data has {dim} features")
    beta = smoothness_bound(m, d)
    theta, info = projected_gradient_descent(
        lambda t: _logistic_risk(m, X, y, w, t, mask),
        lambda t: _logistic_risk_grad(m, X, y, w, t, mask),
        x0,
        m.domain,
        beta,
        cfg,
    )
    clf = Classifier(theta, m.domain)
    return (clf, info) if full_output else clf


@dataclass
class ConstantsReport:
    gamma: float
    beta: float
    beta_probe_max: float
    l_z: float
    l_z_bound: float | None
    z_box: tuple[np.ndarray, np.ndarray]
    theta_box: tuple[np.ndarray, np.ndarray]
    extra: dict = field(default_factory=dict)


def estimate_constants(m: LossModel, d: Distribution, n_probes: int = 1000, seed: int = 0,
                       z_box=None, theta_box=None) -> ConstantsReport:
    """Curvature constants with a random-probe cross-check.

    ``beta`` is the analytic bound; ``beta_probe_max`` is the largest observed
    gradient-difference ratio, which must not exceed it.  ``l_z`` is the largest
    observed ``|loss(z) - loss(z')| / ||z - z'||`` for pairs inside ``z_box``
    (default: the data's bounding box) with classifiers drawn from ``theta_box``.
    """
    rng = np.random.default_rng(seed)
    if m.kind == SCALAR_SQUARED:
        if z_box is None:
            v = float(d.value) if isinstance(d, ScalarPointMass) else 1.0
            z_box = (np.array([1.0]), np.array([max(v, 1.0) + 1.0]))
        lo, hi = float(np.min(z_box[0])), float(np.max(z_box[1]))
        theta_box = theta_box or (np.array([lo]), np.array([hi]))
        t_lo, t_hi = float(theta_box[0][0]), float(theta_box[1][0])
        th = rng.uniform(t_lo, t_hi, n_probes)
        th2 = rng.uniform(t_lo, t_hi, n_probes)
        y = rng.uniform(lo, hi, n_probes)
        y2 = rng.uniform(lo, hi, n_probes)
        beta_probe = np.max(np.abs(-2 * (y - th) + 2 * (y - th2)) / np.abs(th - th2))
        l_probe = np.max(np.abs((y - th) ** 2 - (y2 - th) ** 2) / np.abs(y - y2))
        span = max(hi, t_hi) - min(lo, t_lo)
        return ConstantsReport(2.0, 2.0, float(beta_probe), float(l_probe), 2.0 * span,
                               (np.array([lo]), np.array([hi])), (np.array([t_lo]), np.array([t_hi])))

    X, y, w = _weighted_sample(d)
    dim = X.shape[1]
    beta = smoothness_bound(m, d)
    if theta_box is None:
        theta_box = (-np.ones(dim), np.ones(dim))
    t_lo, t_hi = (np.broadcast_to(np.asarray(b, dtype=float), (dim,)) for b in theta_box)
    if z_box is None:
        z_box = (X.min(axis=0), X.max(axis=0))
    z_lo, z_hi = (np.asarray(b, dtype=float) for b in z_box)

    rows = rng.integers(0, X.shape[0], n_probes)
    th = rng.uniform(t_lo, t_hi, (n_probes, dim))
    th2 = rng.uniform(t_lo, t_hi, (n_probes, dim))
    beta_probe = 0.0
    for i in range(n_probes):
        z = (X[rows[i]], y[rows[i]])
        num = np.linalg.norm(loss_grad(m, z, th[i]) - loss_grad(m, z, th2[i]))
        beta_probe = max(beta_probe, num / np.linalg.norm(th[i] - th2[i]))

    xs = rng.uniform(z_lo, z_hi, (n_probes, dim))
    xs2 = rng.uniform(z_lo, z_hi, (n_probes, dim))
    labels = rng.choice([-1.0, 1.0], n_probes)
    l_probe = 0.0
    for i in range(n_probes):
        gap = np.linalg.norm(xs[i] - xs2[i])
        if gap == 0:
            continue
        diff = abs(loss_value(m, (xs[i], labels[i]), th[i]) - loss_value(m, (xs2[i], labels[i]), th[i]))
        l_probe = max(l_probe, diff / gap)
    l_bound = float(np.linalg.norm(np.maximum(np.abs(t_lo), np.abs(t_hi))))
    return ConstantsReport(m.gamma, beta, float(beta_probe), float(l_probe), l_bound,
                           (z_lo, z_hi), (t_lo, t_hi))
