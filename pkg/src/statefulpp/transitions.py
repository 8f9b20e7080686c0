"""Transition maps ``Tr(d, theta) -> d'`` played by the environment."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .distribution import (
    DimensionError,
    MixtureDistribution,
    Population,
    ScalarPointMass,
    to_fraction,
    StatePoint,
    product_dist,
    vector_norm,
    w1,
)
from .losses import as_params


class TransitionMap:
    """Base class: a deterministic map ``(d, theta) -> d'``.

    ``declared_sensitivity`` is the analytic joint-sensitivity constant when it
    is known.  Maps with ``stateful = True`` keep history between calls and
    must not be shared between games.
    """

    declared_sensitivity: float | None = None
    stateful = False

    def __call__(self, d, theta):
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class StrategicResponse(TransitionMap):
    """Best response of every baseline individual to the published classifier.

    Individuals maximize ``-<theta, x'> - ||x' - x||^2 / (2 epsilon)`` over the
    strategic coordinates ``S``, which gives ``x'_S = x_S - epsilon * theta_S``.
    The result depends on ``theta`` only; the incoming distribution is ignored.
    When ``intercept`` is set the last baseline column is the constant
    intercept feature and may not be strategic.
    """

    baseline: Population
    strategic_features: tuple
    epsilon: float
    intercept: bool = True

    def __post_init__(self):
        S = tuple(sorted({int(i) for i in self.strategic_features}))
        p = self.baseline.p
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be finite and nonnegative, got {self.epsilon!r}")
        if self.epsilon > 0 and not S:
            raise ValueError("strategic feature set is empty")
        if any(i < 0 or i >= p for i in S):
            raise DimensionError(f"strategic feature index out of range for p={p}: {S}")
        if self.intercept and (p - 1) in S:
            raise ValueError("the intercept column cannot be strategic")
        object.__setattr__(self, "strategic_features", S)
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @property
    def declared_sensitivity(self) -> float:
        return self.epsilon

    def response(self, theta) -> Population:
        theta = as_params(theta)
        if theta.size != self.baseline.p:
            raise DimensionError(
                f"classifier has {theta.size} entries, baseline has {self.baseline.p} features"
            )
        S = list(self.strategic_features)
        X = np.array(self.baseline.features)
        X[:, S] = X[:, S] - self.epsilon * np.asarray(theta[S], dtype=float)
        return self.baseline.with_features(X)

    def __call__(self, d, theta) -> Population:
        return self.response(theta)


def strategic_response(spec: StrategicResponse, theta) -> Population:
    return spec.response(theta)


def _respond(inner, theta) -> Population:
    return inner.response(theta) if hasattr(inner, "response") else inner(theta)


class GeometricDecay(TransitionMap):
    """``Tr(d, theta) = (1 - delta) d + delta D(theta)`` on mixtures of snapshots."""

    def __init__(self, inner: StrategicResponse | Callable, delta: float):
        if not 0.0 <= delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {delta!r}")
        self.inner = inner
        self.delta = float(delta)

    @property
    def declared_sensitivity(self):
        eps = getattr(self.inner, "declared_sensitivity", None)
        if eps is None:
            return None
        return max(1.0 - self.delta, self.delta * eps)

    def __call__(self, d, theta) -> MixtureDistribution:
        fresh = _respond(self.inner, theta)
        if self.delta == 1.0:
            return MixtureDistribution(((1.0, fresh),))
        m = MixtureDistribution.promote(d)
        if m.p != fresh.p:
            raise DimensionError(f"state has {m.p} features, response has {fresh.p}")
        keep = 1.0 - self.delta
        pairs = [(keep * w, pop) for w, pop in m.components]
        pairs.append((self.delta, fresh))
        return MixtureDistribution.from_weighted(pairs)


def geometric_decay(inner, delta: float) -> GeometricDecay:
    return GeometricDecay(inner, delta)


class KGroups(TransitionMap):
    """k groups, group ``j`` responding to the classifier published ``j - 1`` rounds earlier.

    Group 1 responds to the current classifier.  Until ``k`` classifiers have
    been published the missing history is filled with the earliest one.
    Groups are an equal-size partition of the baseline drawn from ``seed``
    unless ``group_of`` (values in ``1..k``) is given.
    """

    stateful = True

    def __init__(self, inner: StrategicResponse, k: int, seed: int = 0, group_of=None):
        if k < 1:
            raise ValueError("k must be a positive integer")
        self.inner = inner
        self.k = int(k)
        n = inner.baseline.n
        if group_of is None:
            perm = np.random.default_rng(seed).permutation(n)
            group_of = np.empty(n, dtype=np.int64)
            for j, part in enumerate(np.array_split(perm, self.k), start=1):
                group_of[part] = j
        group_of = np.asarray(group_of, dtype=np.int64)
        if group_of.shape != (n,) or group_of.min() < 1 or group_of.max() > self.k:
            raise ValueError("group_of must assign every individual to a group in 1..k")
        self.groups = [np.flatnonzero(group_of == j) for j in range(1, self.k + 1)]
        if any(g.size == 0 for g in self.groups):
            raise ValueError("every group must be nonempty")
        self.group_of = group_of
        w = inner.baseline.weights
        self.shares = np.array([w[g].sum() for g in self.groups])
        self.buffer: deque = deque(maxlen=self.k)

    @property
    def declared_sensitivity(self):
        return getattr(self.inner, "declared_sensitivity", None)

    def reset(self):
        self.buffer.clear()

    def history(self) -> list:
        """Classifier each group responds to, group 1 first (padded with the earliest)."""
        hist = list(self.buffer)
        return [hist[min(j, len(hist) - 1)] for j in range(self.k)]

    def __call__(self, d, theta) -> MixtureDistribution:
        self.buffer.appendleft(np.array(as_params(theta), copy=True))
        if self.k == 1:
            return MixtureDistribution(((1.0, _respond(self.inner, self.buffer[0])),))
        cache: dict[bytes, Population] = {}
        comps = []
        for share, rows, th in zip(self.shares, self.groups, self.history()):
            key = th.tobytes()
            if key not in cache:
                cache[key] = _respond(self.inner, th)
            comps.append((share, cache[key].subset(rows)))
        return MixtureDistribution(tuple(comps))


def k_groups(inner: StrategicResponse, k: int, seed: int = 0, group_of=None) -> KGroups:
    return KGroups(inner, k, seed, group_of)


class ScalarLinear(TransitionMap):
    """``Tr(d, theta) = 1 + epsilon d + epsilon theta`` on point masses in [1, inf)."""

    def __init__(self, epsilon: float):
        if not np.isfinite(epsilon) or epsilon < 0:
            raise ValueError(f"epsilon must be finite and nonnegative, got {epsilon!r}")
        self.epsilon = float(epsilon)
        self._eps = np.longdouble(self.epsilon)

    @property
    def declared_sensitivity(self) -> float:
        return self.epsilon

    def __call__(self, d: ScalarPointMass, theta) -> ScalarPointMass:
        theta = as_params(theta)
        if theta.size != 1:
            raise DimensionError("scalar map takes a one-dimensional classifier")
        if d.exact:
            eps = to_fraction(self.epsilon)
            return ScalarPointMass(1 + eps * d.value + eps * to_fraction(theta[0]))
        th = np.longdouble(theta[0])
        return ScalarPointMass(1 + self._eps * d.value + self._eps * th)


def scalar_linear(epsilon: float) -> ScalarLinear:
    return ScalarLinear(epsilon)


@dataclass
class SensitivityEstimate:
    epsilon_hat: float
    argmax: tuple | None
    used: int
    skipped: int


def _as_state(s) -> StatePoint:
    return s if isinstance(s, StatePoint) else StatePoint(*s)


def estimate_joint_sensitivity(tr: TransitionMap, probes: Sequence) -> SensitivityEstimate:
    """Largest observed ``W1(Tr(s), Tr(s')) / dist(s, s')`` over probe pairs.

    A lower bound on the true joint sensitivity.  Pairs at distance zero are
    skipped; if every pair is degenerate a ValueError is raised.
    """
    if getattr(tr, "stateful", False):
        raise ValueError("sensitivity probing needs a stateless transition map")
    best, arg, used, skipped = None, None, 0, 0
    for pair in probes:
        s, s2 = (_as_state(x) for x in pair)
        denom = product_dist(s, s2)
        if not denom > 0:
            skipped += 1
            continue
        ratio = w1(tr(s.dist, s.theta), tr(s2.dist, s2.theta)) / denom
        used += 1
        if best is None or ratio > best:
            best, arg = ratio, (s, s2)
    if best is None:
        raise ValueError("all probes were degenerate (zero distance between the pair)")
    return SensitivityEstimate(float(best), arg, used, skipped)


def _point_like(d: ScalarPointMass, value: float) -> ScalarPointMass:
    # probes around an exact state stay exact
    return ScalarPointMass(to_fraction(value) if d.exact else value)


def _perturb_dist(d, rng, scale, intercept):
    if isinstance(d, ScalarPointMass):
        return _point_like(d, max(1.0, float(d.value) + rng.normal(0, scale)))
    if isinstance(d, Population):
        noise = rng.normal(0, scale, d.features.shape)
        if intercept:
            noise[:, -1] = 0.0
        return d.with_features(d.features + noise)
    return MixtureDistribution(tuple((w, _perturb_dist(p, rng, scale, intercept)) for w, p in d.components))


def generate_probes(states: Sequence[StatePoint], n: int, scale: float = 0.1, seed: int = 0,
                    intercept: bool = True, aligned: int = 0) -> list[tuple[StatePoint, StatePoint]]:
    """Probe pairs made by Gaussian perturbation of the given states.

    For point-mass states ``aligned`` extra pairs are added in which the
    distribution and the classifier move in the same direction, the case in
    which the scalar map attains its sensitivity.
    """
    rng = np.random.default_rng(seed)
    states = list(states)
    out = []
    for i in range(n):
        s = states[i % len(states)]
        d2 = _perturb_dist(s.dist, rng, scale, intercept)
        th2 = np.asarray(s.theta, dtype=float) + rng.normal(0, scale, s.theta.size)
        if isinstance(s.dist, ScalarPointMass):
            th2 = np.maximum(th2, 1.0)
        out.append((s, StatePoint(d2, th2)))
    for i in range(aligned):
        s = states[i % len(states)]
        if not isinstance(s.dist, ScalarPointMass):
            continue
        # moving both coordinates upward keeps the pair inside [1, inf)
        d2 = _point_like(s.dist, float(s.dist.value) + abs(rng.normal(0, scale)) + 1e-3)
        th2 = np.asarray(s.theta, dtype=float) + abs(rng.normal(0, scale)) + 1e-3
        out.append((s, StatePoint(d2, th2)))
    return out


def theta_distance(a, b):
    return vector_norm(as_params(a) - as_params(b))
