"""The repeated game between the institution and the environment.

At round ``t`` the institution plays ``theta_t = G(d_{t-1})`` (repeated risk
minimization) and the environment answers with ``d_t = Tr(d_{t-1}, theta_t)``.
"""

from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .distribution import Distribution, w1
from .losses import Classifier, LossModel, MinimizerConfig, NonConvergenceError, as_params, expected_loss, minimize
from .transitions import TransitionMap, theta_distance

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERS = "max_iters"
OSCILLATING = "oscillating"
DIVERGING = "diverging"


@dataclass(frozen=True)
class EngineConfig:
    max_iters: int = 1000
    conv_tol: float = 1e-7
    divergence_ceiling: float = 1e9
    oscillation_window: int = 10
    oscillation_rel_tol: float = 1e-3
    minimizer: MinimizerConfig = field(default_factory=MinimizerConfig)

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.conv_tol > 0:
            raise ValueError("conv_tol must be positive")
        if self.oscillation_window < 2:
            raise ValueError("oscillation_window must be at least 2")


@dataclass
class IterationRecord:
    t: int
    theta: np.ndarray
    dist: Distribution
    theta_delta: float
    w1_delta: float
    product_delta: float
    loss: float


@dataclass
class Trajectory:
    iterations: list[IterationRecord] = field(default_factory=list)
    terminal_status: str | None = None
    period: int | None = None

    def __len__(self):
        return len(self.iterations)

    @property
    def thetas(self) -> list[np.ndarray]:
        return [r.theta for r in self.iterations]

    @property
    def theta_deltas(self) -> np.ndarray:
        return np.array([r.theta_delta for r in self.iterations], dtype=float)

    @property
    def final(self) -> IterationRecord:
        return self.iterations[-1]


class EngineError(RuntimeError):
    """A game aborted; ``trajectory`` holds the rounds completed so far."""

    def __init__(self, message, trajectory: Trajectory, cause: Exception | None = None):
        super().__init__(message)
        self.trajectory = trajectory
        self.cause = cause


def _own(tr: TransitionMap) -> TransitionMap:
    # stateful maps carry history; every game gets its own copy
    return copy.deepcopy(tr) if getattr(tr, "stateful", False) else tr


def rrm_run(d0: Distribution, tr: TransitionMap, loss: LossModel, cfg: EngineConfig | None = None) -> Trajectory:
    """Play repeated risk minimization from the public initial distribution ``d0``.

    Stops on ``theta_delta <= conv_tol`` (converged), a non-finite or
    too-large step (diverging), a detected cycle (oscillating) or after
    ``max_iters`` rounds.  Minimizer failures raise :class:`EngineError`
    carrying the partial trajectory.
    """
    cfg = cfg or EngineConfig()
    tr = _own(tr)
    traj = Trajectory()
    d_prev = d0
    theta_prev = None
    try:
        theta = minimize(loss, d0, cfg.minimizer)
    except NonConvergenceError as exc:
        raise EngineError(f"initial risk minimization failed: {exc}", traj, exc) from exc

    for t in range(1, cfg.max_iters + 1):
        d = tr(d_prev, theta)
        if theta_prev is None:
            theta_delta = math.inf
        else:
            theta_delta = float(theta_distance(theta, theta_prev))
        w1_delta = float(w1(d, d_prev))
        value = float(expected_loss(loss, d, theta))
        traj.iterations.append(
            IterationRecord(t, as_params(theta), d, theta_delta, w1_delta, theta_delta + w1_delta, value)
        )

        if t > 1 and (not math.isfinite(theta_delta) or theta_delta > cfg.divergence_ceiling
                      or not math.isfinite(value)):
            traj.terminal_status = DIVERGING
            break
        if theta_delta <= cfg.conv_tol:
            traj.terminal_status = CONVERGED
            break
        if t >= 2 * cfg.oscillation_window:
            osc = detect_oscillation(traj, cfg.oscillation_window, cfg.oscillation_rel_tol, cfg.conv_tol)
            if osc.period is not None:
                traj.terminal_status = OSCILLATING
                traj.period = osc.period
                break
        if t == cfg.max_iters:
            traj.terminal_status = MAX_ITERS
            break

        theta_prev = theta
        try:
            theta = minimize(loss, d, cfg.minimizer, warm_start=theta)
        except NonConvergenceError as exc:
            raise EngineError(f"risk minimization failed at round {t + 1}: {exc}", traj, exc) from exc
        d_prev = d
    log.debug("rrm_run finished after %d rounds: %s", len(traj), traj.terminal_status)
    return traj


def rrm_map_step(d: Distribution, theta, tr: TransitionMap, loss: LossModel,
                 minimizer: MinimizerConfig | None = None) -> tuple[Distribution, Classifier]:
    """One application of the RRM map ``f(d, theta) = (Tr(d, theta), G(Tr(d, theta)))``."""
    d_next = tr(d, theta)
    return d_next, minimize(loss, d_next, minimizer, warm_start=theta)


class FixedPointRun(NamedTuple):
    dist: Distribution
    iters: int
    path: list | None


def fixed_classifier_run(theta, d0: Distribution, tr: TransitionMap, tol: float = 1e-10,
                         max_iters: int = 10_000, keep_path: bool = False,
                         raise_on_max: bool = True) -> FixedPointRun:
    """Iterate ``d <- Tr(d, theta)`` with ``theta`` held fixed until the W1 step is ``<= tol``.

    ``path`` (when requested) lists ``d_0, d_1, ...`` including the result.
    With ``raise_on_max=False`` exhausting ``max_iters`` returns the last
    iterate instead of raising.
    """
    eps = getattr(tr, "declared_sensitivity", None)
    if eps is not None and eps >= 1:
        warnings.warn(f"transition map sensitivity {eps} >= 1; no fixed point is guaranteed",
                      RuntimeWarning, stacklevel=2)
    tr = _own(tr)
    d = d0
    path = [d0] if keep_path else None
    step = math.inf
    for it in range(1, max_iters + 1):
        d_next = tr(d, theta)
        step = w1(d_next, d)
        d = d_next
        if keep_path:
            path.append(d)
        if step <= tol:
            return FixedPointRun(d, it, path)
    if not raise_on_max:
        return FixedPointRun(d, max_iters, path)
    raise NonConvergenceError(
        f"fixed-classifier iteration did not settle within {max_iters} rounds (last step {float(step):.3e})",
        last=d,
        residual=float(step),
    )


def long_run_loss(theta, tr: TransitionMap, loss: LossModel, d0: Distribution, tol: float = 1e-10,
                  max_iters: int = 10_000) -> float:
    """Loss of ``theta`` on its own fixed-point distribution."""
    d_theta = fixed_classifier_run(theta, d0, tr, tol, max_iters).dist
    return float(expected_loss(loss, d_theta, theta))


def find_performative_optimum_grid(tr: TransitionMap, loss: LossModel, theta_grid: Sequence, d0: Distribution,
                                   tol: float = 1e-10, max_iters: int = 10_000) -> tuple[Classifier, float]:
    """Grid point with the smallest long-run loss (first occurrence wins ties).

    This is a search over the supplied grid only.  Points whose fixed-point
    iteration fails are skipped.
    """
    best, best_val, failures = None, math.inf, 0
    for th in theta_grid:
        clf = th if isinstance(th, Classifier) else Classifier(np.atleast_1d(th), loss.domain)
        try:
            val = long_run_loss(clf, tr, loss, d0, tol, max_iters)
        except NonConvergenceError:
            failures += 1
            continue
        if val < best_val:
            best, best_val = clf, val
    if best is None:
        raise NonConvergenceError(f"long-run loss failed at all {failures} grid points")
    return best, best_val


@dataclass
class StablePointReport:
    fixed_point_residual: float
    optimality_residual: float
    is_stable: bool


def check_stable_point(d: Distribution, theta, tr: TransitionMap, loss: LossModel,
                       minimizer: MinimizerConfig | None = None, fixed_point_tol: float = 1e-6,
                       optimality_tol: float = 1e-6) -> StablePointReport:
    """Residuals of the two stability conditions ``Tr(d, theta) = d`` and ``theta = G(d)``."""
    tr = _own(tr)
    fp = float(w1(tr(d, theta), d))
    opt = float(theta_distance(minimize(loss, d, minimizer, warm_start=theta), theta))
    return StablePointReport(fp, opt, fp <= fixed_point_tol and opt <= optimality_tol)


class OscillationCheck(NamedTuple):
    period: int | None
    too_short: bool = False


def detect_oscillation(traj: Trajectory | Sequence, window: int = 10, rel_tol: float = 1e-3,
                       conv_tol: float = 0.0) -> OscillationCheck:
    """Smallest period ``p`` in ``[2, window]`` with ``theta_t ~ theta_{t-p}`` over the last window.

    "~" means within ``rel_tol`` times the mean step size of the window.
    Sequences whose last step is already ``<= conv_tol`` are not reported, nor
    are sequences shorter than ``2 * window``.  ``traj`` may be a trajectory or
    a plain sequence of parameter vectors.
    """
    if isinstance(traj, Trajectory):
        thetas = [r.theta for r in traj.iterations[-2 * window:]]
    else:
        thetas = list(traj)[-2 * window:]
    if len(thetas) < 2 * window:
        return OscillationCheck(None, too_short=True)
    thetas = [np.asarray(as_params(th), dtype=float) for th in thetas]
    steps = np.array([np.linalg.norm(b - a) for a, b in zip(thetas[-window - 1:-1], thetas[-window:])])
    if steps[-1] <= conv_tol or not np.all(np.isfinite(steps)):
        return OscillationCheck(None)
    scale = float(np.mean(steps))
    if scale == 0.0:
        return OscillationCheck(None)
    n = len(thetas)
    for period in range(2, window + 1):
        if all(np.linalg.norm(thetas[t] - thetas[t - period]) <= rel_tol * scale for t in range(n - window, n)):
            return OscillationCheck(period)
    return OscillationCheck(None)


def contraction_coefficient(eps: float, beta: float, gamma: float) -> float:
    """One-step coefficient of the RRM map obtained by adding the two halves of its bound."""
    return eps * (1.0 + beta / gamma)


def stated_coefficient(eps: float, beta: float, gamma: float) -> float:
    """``eps / (1 - eps) * beta / gamma``; informational only."""
    return eps / (1.0 - eps) * beta / gamma if eps < 1 else math.inf


def optimality_gap_bound(l_z: float, eps: float, gamma: float) -> float:
    """Upper bound on ``||theta_PO - theta_PS||``: ``2 L_z eps / (gamma (1 - eps))``."""
    return 2.0 * l_z * eps / (gamma * (1.0 - eps)) if eps < 1 else math.inf
