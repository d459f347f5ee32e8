"""Probability measures on [0, inf).

Discrete atom lists (empirical age measures, quadrature discretizations of
named analytic families), the Levy metric, moments, translation and
reweighting.  These are the currency passed between the spectral, branching,
ODE and simulation layers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

# atoms closer than this merge; weights add
MERGE_TOL = 1e-12
# |total mass - 1| allowed for "probability measure" checks
MASS_TOL = 1e-9
# omitted tail mass allowed when truncating an unbounded support
TAIL_TOL = 1e-10


class NonNormalizableDensityError(ValueError):
    """Raised when a Density spec does not integrate to 1 over its support."""

    def __init__(self, integral: float):
        self.integral = integral
        super().__init__(
            "density integrates to %.6g over its support, expected 1" % integral
        )


class NotProbabilityError(ValueError):
    pass


# ---------------------------------------------------------------------------
# measure specifications (named analytic families)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiracAt:
    """Unit atom at x >= 0."""

    x: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and self.x >= 0):
            raise ValueError("DiracAt position must be finite and >= 0")


@dataclass(frozen=True)
class Uniform:
    """Uniform distribution on [0, c], c > 0."""

    c: float

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c > 0):
            raise ValueError("Uniform endpoint must be finite and > 0")


@dataclass(frozen=True)
class SechSquaredStationary:
    """The stationary age profile with density (1/2) sech^2(x/2) on [0, inf).

    CDF tanh(x/2); mean 2 ln 2.
    """


@dataclass(frozen=True)
class Atoms:
    """Explicit finite atom list."""

    positions: Sequence[float]
    weights: Sequence[float]


@dataclass(frozen=True)
class Density:
    """A general density on [0, support_bound], supplied as a callable."""

    pdf: Callable[[np.ndarray], np.ndarray]
    support_bound: float


MeasureSpec = Union[DiracAt, Uniform, SechSquaredStationary, Atoms, Density]


# ---------------------------------------------------------------------------
# discrete measures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscreteMeasure:
    """Finite nonnegative atom list on [0, inf).

    Positions are sorted strictly increasing after merging; weights are
    nonnegative.  Immutable: every operation returns a new measure.
    """

    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pos = np.atleast_1d(np.asarray(self.positions, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if pos.shape != w.shape or pos.ndim != 1:
            raise ValueError("positions and weights must be 1-d of equal length")
        if pos.size == 0:
            raise ValueError("a measure needs at least one atom")
        if np.any(~np.isfinite(pos)) or np.any(pos < 0):
            raise ValueError("positions must be finite and >= 0")
        if np.any(~np.isfinite(w)) or np.any(w < -MERGE_TOL):
            raise ValueError("weights must be finite and >= 0")
        w = np.maximum(w, 0.0)
        order = np.argsort(pos, kind="stable")
        pos, w = pos[order], w[order]
        if pos.size > 1:
            # merge runs of positions within MERGE_TOL of their predecessor
            new_group = np.empty(pos.size, dtype=bool)
            new_group[0] = True
            new_group[1:] = np.diff(pos) > MERGE_TOL
            idx = np.cumsum(new_group) - 1
            mpos = pos[new_group]
            mw = np.bincount(idx, weights=w)
            pos, w = mpos, mw
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)
        self.positions.setflags(write=False)
        self.weights.setflags(write=False)

    # -- basic queries ------------------------------------------------------

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def natoms(self) -> int:
        return self.positions.size

    def is_probability(self, tol: float = MASS_TOL) -> bool:
        return abs(self.total_mass - 1.0) <= tol

    def cdf(self, x) -> np.ndarray:
        """Right-continuous CDF evaluated at x (scalar or array)."""
        cum = np.cumsum(self.weights)
        i = np.searchsorted(self.positions, x, side="right")
        out = np.where(i > 0, cum[np.maximum(i - 1, 0)], 0.0)
        return out

    def moment(self, p: int = 1) -> float:
        """Sum of w_i x_i^p."""
        if p == 1:
            return float(self.weights @ self.positions)
        return float(self.weights @ self.positions**p)

    # -- transformations ----------------------------------------------------

    def translate(self, t: float) -> "DiscreteMeasure":
        """Shift every atom right by t >= 0."""
        if t < 0:
            raise ValueError("translation must be >= 0")
        return DiscreteMeasure(self.positions + t, self.weights)

    def tilt(self, g) -> "DiscreteMeasure":
        """Reweight atoms by g: w_i <- w_i * g(x_i).

        g may be a callable or an array aligned with the atom grid.  The
        caller inspects total_mass and renormalizes if wanted.
        """
        gv = np.asarray(g(self.positions) if callable(g) else g, dtype=float)
        if gv.shape != self.positions.shape:
            raise ValueError("grid function shape mismatch")
        if np.any(gv < 0):
            raise ValueError("tilt requires g >= 0 at every atom")
        return DiscreteMeasure(self.positions, self.weights * gv)

    def normalized(self) -> "DiscreteMeasure":
        m = self.total_mass
        if m <= 0:
            raise ValueError("cannot normalize a zero measure")
        return DiscreteMeasure(self.positions, self.weights / m)

    # -- serialization ------------------------------------------------------

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("position,weight\n")
            for x, w in zip(self.positions, self.weights):
                fh.write("%.17g,%.17g\n" % (x, w))

    @staticmethod
    def from_csv(path) -> "DiscreteMeasure":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return DiscreteMeasure(data[:, 0], data[:, 1])

    def to_json_obj(self) -> dict:
        return {
            "positions": self.positions.tolist(),
            "weights": self.weights.tolist(),
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_obj(), fh)

    @staticmethod
    def from_json_obj(obj: dict) -> "DiscreteMeasure":
        return DiscreteMeasure(np.asarray(obj["positions"]), np.asarray(obj["weights"]))

    @staticmethod
    def from_json(path) -> "DiscreteMeasure":
        with open(path) as fh:
            return DiscreteMeasure.from_json_obj(json.load(fh))


def dirac(x: float) -> DiscreteMeasure:
    return DiscreteMeasure(np.array([x], dtype=float), np.array([1.0]))


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------

_GL_OFFSET = 0.5 / math.sqrt(3.0)  # 2-point Gauss-Legendre nodes at 1/2 +- this


def _composite_gauss_nodes(upper: float, n_nodes: int):
    """Composite 2-point Gauss-Legendre rule on [0, upper] with n_nodes nodes.

    Cells are uniform; nodes stay in the open interior of each cell (no node
    at 0).  Odd n_nodes gets one midpoint cell at the right end.
    """
    npairs, odd = divmod(n_nodes, 2)
    ncells = npairs + odd
    h = upper / ncells
    left = h * np.arange(ncells)
    xs = np.empty(n_nodes)
    ws = np.empty(n_nodes)
    xs[: 2 * npairs : 2] = left[:npairs] + h * (0.5 - _GL_OFFSET)
    xs[1 : 2 * npairs : 2] = left[:npairs] + h * (0.5 + _GL_OFFSET)
    ws[: 2 * npairs] = h / 2.0
    if odd:
        xs[-1] = left[-1] + h / 2.0
        ws[-1] = h
    return xs, ws


def discretize(spec: MeasureSpec, n_nodes: int = 2000) -> DiscreteMeasure:
    """Build a probability DiscreteMeasure from a spec.

    DiracAt and Atoms are exact; density families are put on composite
    Gauss-Legendre nodes over a truncated support with omitted tail mass
    below TAIL_TOL, then renormalized by the quadrature mass.
    """
    if isinstance(spec, DiracAt):
        return dirac(spec.x)
    if isinstance(spec, Atoms):
        mu = DiscreteMeasure(np.asarray(spec.positions, float),
                             np.asarray(spec.weights, float))
        if not mu.is_probability(1e-6):
            raise NotProbabilityError("Atoms weights sum to %.6g" % mu.total_mass)
        return mu.normalized()
    if n_nodes < 2:
        raise ValueError("density variants need n_nodes >= 2")
    if isinstance(spec, Uniform):
        xs, ws = _composite_gauss_nodes(spec.c, n_nodes)
        return DiscreteMeasure(xs, ws / spec.c)
    if isinstance(spec, SechSquaredStationary):
        # CDF tanh(x/2); truncate where the tail drops below TAIL_TOL
        upper = 2.0 * math.atanh(1.0 - TAIL_TOL)
        xs, ws = _composite_gauss_nodes(upper, n_nodes)
        w = ws * 0.5 / np.cosh(xs / 2.0) ** 2
        return DiscreteMeasure(xs, w / w.sum())
    if isinstance(spec, Density):
        xs, ws = _composite_gauss_nodes(spec.support_bound, n_nodes)
        w = ws * np.asarray(spec.pdf(xs), dtype=float)
        if np.any(w < 0):
            raise ValueError("density must be >= 0")
        total = float(w.sum())
        if abs(total - 1.0) > 1e-6:
            raise NonNormalizableDensityError(total)
        return DiscreteMeasure(xs, w / total)
    raise TypeError("unknown measure spec %r" % (spec,))


def sample(spec: MeasureSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw i.i.d. samples from a measure spec (used for initial ages)."""
    if isinstance(spec, DiracAt):
        return np.full(size, spec.x)
    if isinstance(spec, Uniform):
        return rng.uniform(0.0, spec.c, size)
    if isinstance(spec, SechSquaredStationary):
        return 2.0 * np.arctanh(rng.random(size))
    mu = spec if isinstance(spec, DiscreteMeasure) else discretize(spec)
    idx = rng.choice(mu.natoms, size=size, p=mu.weights / mu.total_mass)
    return mu.positions[idx]


# ---------------------------------------------------------------------------
# Levy distance
# ---------------------------------------------------------------------------

def _sandwich_ok(mu: DiscreteMeasure, nu: DiscreteMeasure, eps: float) -> bool:
    # L <= eps iff F_mu(x) <= F_nu(x+eps)+eps and F_nu(x) <= F_mu(x+eps)+eps
    # for all x; for step CDFs the binding points are the jump locations.
    if np.any(mu.cdf(mu.positions) > nu.cdf(mu.positions + eps) + eps + 1e-15):
        return False
    if np.any(nu.cdf(nu.positions) > mu.cdf(nu.positions + eps) + eps + 1e-15):
        return False
    return True


def levy_distance(mu: DiscreteMeasure, nu: DiscreteMeasure,
                  tol: float = 1e-10) -> float:
    """Levy metric between two probability measures.

    Bisection on epsilon with an exact feasibility check of the two-sided
    CDF sandwich at the atom positions (the extremal points for step CDFs).
    """
    for m in (mu, nu):
        if not m.is_probability():
            raise NotProbabilityError("levy_distance needs probability measures")
    lo, hi = 0.0, 1.0
    if _sandwich_ok(mu, nu, lo):
        return 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _sandwich_ok(mu, nu, mid):
            hi = mid
        else:
            lo = mid
    return hi


def empirical_measure(values: np.ndarray) -> DiscreteMeasure:
    """Empirical probability measure of a sample (equal weights, merged)."""
    values = np.asarray(values, dtype=float)
    pos, counts = np.unique(values, return_counts=True)
    return DiscreteMeasure(pos, counts / values.size)
