"""Distributions over feature-label pairs and the distances used by the game.

Three kinds of state are supported:

* :class:`ScalarPointMass` -- a point mass on the outcome, used by the scalar
  squared-loss scenario.  Values are kept in extended precision so that the
  geometric sequences of that scenario survive down to ~1e-7 step sizes.
* :class:`Population` -- a finite weighted population of rows ``(x, y)``.
  Every row carries the index of the baseline individual it came from.
* :class:`MixtureDistribution` -- a weighted list of populations drawn from the
  same baseline.

Wasserstein-1 distances between populations are computed with the identity
coupling (row ``i`` of one side is transported to row ``i`` of the other),
which is an upper bound on the true W1 and is exact whenever one side is a
per-individual deterministic transform of the other.  Mixtures are compared by
solving the small transport problem over their components with the aligned
cost as ground metric.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Union

from fractions import Fraction

import numpy as np
from scipy.optimize import linprog

PRUNE_FLOOR = 1e-9
WEIGHT_TOL = 1e-12


class DimensionError(ValueError):
    """Raised when two objects cannot be compared or combined dimensionally."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def to_fraction(x) -> Fraction:
    """Exact rational value of a float, longdouble or Fraction."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, np.floating):
        return Fraction(*x.as_integer_ratio())
    return Fraction(x)


def vector_norm(v) -> np.floating:
    """Euclidean norm that keeps the input dtype (longdouble stays longdouble)."""
    v = np.asarray(v)
    if v.size == 1:
        return np.abs(v.reshape(-1)[0])
    return np.sqrt(np.sum(v * v))


@dataclass(frozen=True, eq=False)
class ScalarPointMass:
    """Point mass at ``value`` on the half-line [1, inf).

    Values are held as ``np.longdouble``; a ``Fraction`` is kept as is so the
    scalar model can also be run in exact rational arithmetic.
    """

    value: np.longdouble | Fraction

    @property
    def exact(self) -> bool:
        return isinstance(self.value, Fraction)

    def __post_init__(self):
        v = self.value if isinstance(self.value, Fraction) else np.longdouble(self.value)
        if not (isinstance(v, Fraction) or np.isfinite(v)) or v < 1:
            raise ValueError(f"point mass must lie in [1, inf), got {self.value!r}")
        object.__setattr__(self, "value", v)

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return f"ScalarPointMass({float(self.value)!r})"


@dataclass(frozen=True, eq=False)
class Population:
    """Finite weighted population.

    ``features`` is ``n x p``, ``labels`` holds +-1, ``weights`` sums to one and
    ``index`` maps each row to its baseline individual (defaults to ``0..n-1``).
    Arrays are copied and made read-only on construction.
    """

    features: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    index: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {X.shape}")
        n = X.shape[0]
        if n < 1:
            raise ValueError("population needs at least one row")
        y = np.asarray(self.labels, dtype=float).reshape(-1)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if y.shape[0] != n or w.shape[0] != n:
            raise DimensionError(
                f"features have {n} rows but labels/weights have {y.shape[0]}/{w.shape[0]}"
            )
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights must be nonnegative and sum to 1 (sum={w.sum()!r})")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        idx = np.arange(n) if self.index is None else np.asarray(self.index, dtype=np.int64)
        if idx.shape != (n,):
            raise DimensionError("index must have one entry per row")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "labels", _frozen(y))
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "index", _frozen(idx))

    @classmethod
    def uniform(cls, features, labels, index=None) -> "Population":
        n = np.asarray(labels).reshape(-1).shape[0]
        return cls(features, labels, np.full(n, 1.0 / n), index)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def with_features(self, features) -> "Population":
        """Same individuals, labels and weights with new feature values."""
        return Population(features, self.labels, self.weights, self.index)

    def subset(self, rows) -> "Population":
        """Rows ``rows`` as a population of their own (weights renormalized)."""
        rows = np.asarray(rows, dtype=np.int64)
        w = self.weights[rows]
        return Population(self.features[rows], self.labels[rows], w / w.sum(), self.index[rows])

    def __repr__(self):
        return f"Population(n={self.n}, p={self.p})"


@dataclass(frozen=True, eq=False)
class MixtureDistribution:
    """Weighted mixture of populations over a shared baseline.

    Component populations may cover the whole baseline (geometric decay) or
    disjoint groups of it (k groups).  Use :meth:`from_weighted` to build one
    from raw weights; it prunes tiny components and renormalizes.
    """

    components: tuple[tuple[float, Population], ...]

    def __post_init__(self):
        comps = tuple((float(w), pop) for w, pop in self.components)
        if not comps:
            raise ValueError("mixture needs at least one component")
        ws = np.array([w for w, _ in comps])
        if np.any(ws < PRUNE_FLOOR) or np.any(ws > 1.0 + WEIGHT_TOL):
            raise ValueError(f"component weights must lie in [{PRUNE_FLOOR}, 1]")
        if abs(ws.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"component weights must sum to 1 (sum={ws.sum()!r})")
        ps = {pop.p for _, pop in comps}
        if len(ps) != 1:
            raise DimensionError(f"components disagree on feature dimension: {sorted(ps)}")
        object.__setattr__(self, "components", comps)

    @classmethod
    def from_weighted(cls, pairs: Iterable[tuple[float, Population]], floor: float = PRUNE_FLOOR):
        pairs = [(float(w), pop) for w, pop in pairs if w >= floor]
        if not pairs:
            raise ValueError("every component fell below the prune floor")
        total = sum(w for w, _ in pairs)
        return cls(tuple((w / total, pop) for w, pop in pairs))

    @classmethod
    def promote(cls, d: "Population | MixtureDistribution") -> "MixtureDistribution":
        if isinstance(d, MixtureDistribution):
            return d
        if isinstance(d, Population):
            return cls(((1.0, d),))
        raise TypeError(f"cannot promote {type(d).__name__} to a mixture")

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.components])

    @property
    def populations(self) -> list[Population]:
        return [pop for _, pop in self.components]

    @property
    def p(self) -> int:
        return self.components[0][1].p

    def flatten(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stack all components into one weighted sample ``(X, y, w)``."""
        if len(self.components) == 1:
            w, pop = self.components[0]
            return pop.features, pop.labels, pop.weights * w
        X = np.concatenate([pop.features for _, pop in self.components])
        y = np.concatenate([pop.labels for _, pop in self.components])
        w = np.concatenate([pop.weights * w for w, pop in self.components])
        return X, y, w

    def __repr__(self):
        parts = ", ".join(f"{w:.3g}:{pop!r}" for w, pop in self.components)
        return f"MixtureDistribution([{parts}])"


Distribution = Union[ScalarPointMass, Population, MixtureDistribution]


@dataclass(frozen=True, eq=False)
class StatePoint:
    """A (distribution, classifier parameters) pair."""

    dist: Distribution
    theta: np.ndarray

    def __post_init__(self):
        theta = getattr(self.theta, "params", self.theta)
        theta = np.asarray(theta)
        if theta.dtype.kind != "f":
            theta = theta.astype(float)
        object.__setattr__(self, "theta", _frozen(theta.reshape(-1)))
        if isinstance(self.dist, ScalarPointMass):
            if self.theta.size != 1:
                raise DimensionError("scalar states need a one-dimensional classifier")
        elif self.dist.p != self.theta.size:
            raise DimensionError(
                f"classifier has {self.theta.size} entries, distribution has {self.dist.p} features"
            )


def w1_scalar(a: ScalarPointMass, b: ScalarPointMass) -> np.longdouble:
    """Exact W1 between two point masses, ``|a - b|``."""
    return np.abs(a.value - b.value)


def _compatible(a: Population, b: Population) -> bool:
    if a is b:
        return True
    return (
        a.n == b.n
        and a.p == b.p
        and np.array_equal(a.index, b.index)
        and np.allclose(a.weights, b.weights, rtol=1e-12, atol=1e-15)
    )


def _aligned_cost(a: Population, b: Population) -> float:
    if a is b:
        return 0.0
    if not _compatible(a, b):
        raise DimensionError(
            f"populations are not aligned on the same individuals ({a!r} vs {b!r})"
        )
    dx = a.features - b.features
    dy = a.labels - b.labels
    norms = np.sqrt(np.einsum("ij,ij->i", dx, dx) + dy * dy)
    w = 0.5 * (a.weights + b.weights)
    return float(w @ norms)


def _collapse_partition(m: MixtureDistribution) -> Population | None:
    """Merge a mixture whose components cover disjoint individuals into one population."""
    if len(m.components) == 1:
        return m.components[0][1]
    idx = np.concatenate([pop.index for _, pop in m.components])
    if np.unique(idx).size != idx.size:
        return None
    X, y, w = m.flatten()
    order = np.argsort(idx, kind="stable")
    w = w[order]
    return Population(X[order], y[order], w / w.sum(), idx[order])


def _canonical(d) -> MixtureDistribution:
    m = MixtureDistribution.promote(d)
    collapsed = _collapse_partition(m)
    return m if collapsed is None else MixtureDistribution(((1.0, collapsed),))


def w1_aligned(a: Population | MixtureDistribution, b: Population | MixtureDistribution) -> float:
    """Transport cost between two baseline-derived distributions.

    Populations are coupled row by row.  Mixtures are coupled component by
    component, choosing the cheapest component coupling (retained mass is
    matched to itself at zero cost).  The result upper-bounds the true W1.
    """
    if a is b:
        return 0.0
    ma, mb = _canonical(a), _canonical(b)
    if ma.p != mb.p:
        raise DimensionError(f"feature dimensions differ: {ma.p} vs {mb.p}")
    ca, cb = ma.components, mb.components
    if len(cb) == 1:
        pop = cb[0][1]
        return float(sum(w * _aligned_cost(p, pop) for w, p in ca))
    if len(ca) == 1:
        pop = ca[0][1]
        return float(sum(w * _aligned_cost(pop, p) for w, p in cb))
    return _component_transport(ca, cb)


def _component_transport(ca, cb) -> float:
    pairs, costs = [], []
    for i, (_, pa) in enumerate(ca):
        for j, (_, pb) in enumerate(cb):
            if _compatible(pa, pb):
                pairs.append((i, j))
                costs.append(_aligned_cost(pa, pb))
    if not pairs:
        raise DimensionError("mixtures share no comparable components")
    na, nb = len(ca), len(cb)
    A = np.zeros((na + nb, len(pairs)))
    for k, (i, j) in enumerate(pairs):
        A[i, k] = 1.0
        A[na + j, k] = 1.0
    wa = np.array([w for w, _ in ca])
    wb = np.array([w for w, _ in cb])
    rhs = np.concatenate([wa / wa.sum(), wb / wb.sum()])
    res = linprog(np.array(costs), A_eq=A, b_eq=rhs, bounds=(0, None), method="highs")
    if res.status != 0:
        raise DimensionError(f"no feasible coupling between mixtures ({res.message})")
    plan = np.clip(res.x, 0.0, None)
    return float(np.dot(plan, costs))


def w1(a: Distribution, b: Distribution):
    """W1 dispatched on distribution kind."""
    if isinstance(a, ScalarPointMass) and isinstance(b, ScalarPointMass):
        return w1_scalar(a, b)
    if isinstance(a, ScalarPointMass) or isinstance(b, ScalarPointMass):
        raise DimensionError("cannot compare a point mass with a population")
    return w1_aligned(a, b)


def product_dist(s: StatePoint, s2: StatePoint):
    """``W1(d, d') + ||theta - theta'||``."""
    if s.theta.size != s2.theta.size:
        raise DimensionError(f"classifier sizes differ: {s.theta.size} vs {s2.theta.size}")
    if getattr(s.dist, "exact", False) or getattr(s2.dist, "exact", False):
        return w1(s.dist, s2.dist) + abs(to_fraction(s.theta[0]) - to_fraction(s2.theta[0]))
    return w1(s.dist, s2.dist) + vector_norm(s.theta - s2.theta)
