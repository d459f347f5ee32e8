"""Aged multitype Galton-Watson trees.

A vertex of age s begets a Poisson cloud of children with intensity
min(s, u) dpi(u).  This module samples such trees, estimates or computes
the total-progeny law, evaluates the generating function f(s, z) =
E z^{|T_s|} through its exponential fixed-point equation, and fits the
sqrt(1-z) expansion that appears at criticality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .measure import DiscreteMeasure
from .spectral import (
    Criticality,
    OperatorIsZeroError,
    classify,
    intensity_mass,
    kernel_matrix,
    leading_eigenpair,
)

SIZE_CAP_DEFAULT = 1_000_000
GENFN_TOL = 1e-13
GENFN_CAP = 1_000_000
CONTINUATION_STEP = 0.05


class RootFromPi:
    """Sentinel: draw the root age from pi itself."""


INFINITY = math.inf


class GenFnConvergenceError(RuntimeError):
    def __init__(self, residual: float):
        self.residual = residual
        super().__init__("generating-function iteration stalled, residual %.3g"
                         % residual)


# ---------------------------------------------------------------------------
# tree sampling
# ---------------------------------------------------------------------------

@dataclass
class AgedTree:
    """Rooted tree with per-vertex ages; parent[root] == -1."""

    parents: np.ndarray
    ages: np.ndarray
    root: int = 0
    truncated: bool = False

    @property
    def size(self) -> int:
        return self.parents.size

    def children_lists(self):
        kids = [[] for _ in range(self.size)]
        for v, p in enumerate(self.parents):
            if p >= 0:
                kids[p].append(v)
        return kids

    def to_newick(self) -> str:
        """Newick-like text: (child,child)age, subtrees in vertex order."""
        kids = self.children_lists()

        def render(v):
            tag = "%d:%.17g" % (v, self.ages[v])
            if not kids[v]:
                return tag
            return "(" + ",".join(render(c) for c in kids[v]) + ")" + tag

        return render(self.root) + ";"

    def rooted_shape(self):
        """Canonical label of the rooted shape (ages ignored)."""
        kids = self.children_lists()

        def canon(v):
            return tuple(sorted(canon(c) for c in kids[v]))

        return canon(self.root)

    def re_root(self, new_root: int) -> "AgedTree":
        """Same tree re-rooted: edges re-oriented away from new_root."""
        adj = [[] for _ in range(self.size)]
        for v, p in enumerate(self.parents):
            if p >= 0:
                adj[p].append(v)
                adj[v].append(p)
        parents = np.full(self.size, -1, dtype=np.int64)
        stack = [new_root]
        seen = np.zeros(self.size, dtype=bool)
        seen[new_root] = True
        while stack:
            v = stack.pop()
            for u in adj[v]:
                if not seen[u]:
                    seen[u] = True
                    parents[u] = v
                    stack.append(u)
        return AgedTree(parents=parents, ages=self.ages.copy(),
                        root=new_root, truncated=self.truncated)


class _ChildSampler:
    """Per-parent-age child generator against a fixed discrete measure."""

    def __init__(self, pi: DiscreteMeasure):
        self.pi = pi
        self._cache: dict[float, tuple[float, np.ndarray]] = {}

    def table(self, age: float):
        hit = self._cache.get(age)
        if hit is None:
            rates = np.minimum(age, self.pi.positions) * self.pi.weights
            mass = float(rates.sum())
            cum = np.cumsum(rates) / mass if mass > 0 else rates
            hit = (mass, cum)
            self._cache[age] = hit
        return hit

    def sample_children_ages(self, age: float, rng: np.random.Generator):
        mass, cum = self.table(age)
        if mass == 0.0:
            return np.empty(0)
        n = rng.poisson(mass)
        if n == 0:
            return np.empty(0)
        idx = np.searchsorted(cum, rng.random(n))
        return self.pi.positions[idx]


def sample_tree(pi: DiscreteMeasure, root_age, rng: np.random.Generator,
                size_cap: int = SIZE_CAP_DEFAULT) -> AgedTree:
    """Breadth-first generation of the aged tree.

    root_age may be a number, RootFromPi, or math.inf (needs a finite first
    moment of pi).  Generation stops with the truncation flag once size_cap
    vertices exist.
    """
    if root_age is RootFromPi or isinstance(root_age, RootFromPi):
        root_age = float(
            pi.positions[np.searchsorted(np.cumsum(pi.weights) / pi.total_mass,
                                         rng.random())])
    root_age = float(root_age)
    sampler = _ChildSampler(pi)
    ages = [root_age]
    parents = [-1]
    queue = [0]
    truncated = False
    while queue:
        nxt = []
        for v in queue:
            child_ages = sampler.sample_children_ages(ages[v], rng)
            for a in child_ages:
                if len(ages) >= size_cap:
                    truncated = True
                    break
                parents.append(v)
                ages.append(float(a))
                nxt.append(len(ages) - 1)
            if truncated:
                break
        if truncated:
            break
        queue = nxt
    return AgedTree(parents=np.asarray(parents, dtype=np.int64),
                    ages=np.asarray(ages, dtype=float), truncated=truncated)


def sample_progeny_sizes(pi: DiscreteMeasure, root_age, replicas: int,
                         rng: np.random.Generator,
                         size_cap: int = SIZE_CAP_DEFAULT):
    """Vectorized total-progeny sampler.

    Returns (sizes, truncated) arrays of length replicas; sizes of truncated
    replicas are the partial counts at the cap.  Only type counts per
    generation are tracked, which is enough for |T|: the children of n_i
    pending vertices of age x_i form independent Poisson counts per atom.
    """
    x, w = pi.positions, pi.weights
    n = x.size
    mmin = np.minimum.outer(x, x)  # mmin[i, j] = min(x_i, x_j)
    sizes = np.ones(replicas, dtype=np.int64)
    truncated = np.zeros(replicas, dtype=bool)
    # root intensities per atom type
    if root_age is RootFromPi or isinstance(root_age, RootFromPi):
        root_idx = rng.choice(n, size=replicas, p=w / w.sum())
        lam0 = np.minimum(x[root_idx][:, None], x[None, :]) * w[None, :]
    else:
        lam0 = np.broadcast_to(np.minimum(float(root_age), x) * w,
                               (replicas, n)).copy()
    pending = rng.poisson(lam0)
    active = np.arange(replicas)
    while active.size:
        counts = pending.sum(axis=1)
        sizes[active] += counts
        over = sizes[active] >= size_cap
        truncated[active[over]] = True
        alive = (counts > 0) & ~over
        active = active[alive]
        if not active.size:
            break
        pending = pending[alive]
        lam = (pending @ mmin) * w[None, :]
        pending = rng.poisson(lam)
    return sizes, truncated


# ---------------------------------------------------------------------------
# progeny law
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProgenyLaw:
    """P(|T| = k) for k = 1..K plus residual mass beyond K."""

    v: np.ndarray                 # index k-1 -> v_k
    residual: float
    method: str
    stderr: Optional[np.ndarray] = None
    nsamples: int = 0

    @property
    def K(self) -> int:
        return self.v.size

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("k,v_k,stderr\n")
            se = self.stderr if self.stderr is not None else np.zeros_like(self.v)
            for k, (vk, sk) in enumerate(zip(self.v, se), start=1):
                fh.write("%d,%.17g,%.17g\n" % (k, vk, sk))


@dataclass(frozen=True)
class MonteCarlo:
    replicas: int
    rng: np.random.Generator
    size_cap: int = SIZE_CAP_DEFAULT
    root_age: object = RootFromPi


@dataclass(frozen=True)
class SmallK_ClosedForm:
    root_age: object = RootFromPi


def progeny_law(pi: DiscreteMeasure, K: int, method) -> ProgenyLaw:
    if isinstance(method, MonteCarlo):
        sizes, trunc = sample_progeny_sizes(pi, method.root_age,
                                            method.replicas, method.rng,
                                            method.size_cap)
        R = method.replicas
        counts = np.bincount(np.where(trunc, 0, np.minimum(sizes, K + 1)),
                             minlength=K + 2)
        v = counts[1:K + 1] / R
        residual = 1.0 - v.sum()
        stderr = np.sqrt(np.maximum(v * (1.0 - v), 0.0) / R)
        return ProgenyLaw(v=v, residual=float(residual), method="MonteCarlo",
                          stderr=stderr, nsamples=R)
    if isinstance(method, SmallK_ClosedForm):
        if K > 4:
            raise ValueError("closed form exposed for K <= 4 only")
        return _progeny_closed_form(pi, K, method.root_age)
    raise TypeError("unknown progeny_law method %r" % (method,))


def _progeny_closed_form(pi: DiscreteMeasure, K: int, root_age) -> ProgenyLaw:
    """Exact t_k(s) = P(|T_s| = k) on the atom grid.

    Recursion: with u_j(s) = (L t_j)(s), the Poisson cloud factorizes so
    t_k(s) = e^{-m_s} [z^{k-1}] exp(sum_j u_j(s) z^j).  The coefficient
    extraction uses the standard power-series exponential recurrence.
    """
    Kmat = kernel_matrix(pi)
    m = intensity_mass(pi, pi.positions)
    E = np.exp(-m)
    n = pi.natoms
    t = np.zeros((K + 1, n))
    t[1] = E
    # a[r] = [z^r] exp(B(s, z)) with B = sum_{j>=1} u_j z^j, per grid point
    u = np.zeros((K + 1, n))
    a = np.zeros((K + 1, n))
    a[0] = 1.0
    for k in range(2, K + 1):
        u[k - 1] = Kmat @ t[k - 1]
        # a[r] = (1/r) sum_{j=1}^{r} j * u_j * a[r-j]
        r = k - 1
        acc = np.zeros(n)
        for j in range(1, r + 1):
            acc += j * u[j] * a[r - j]
        a[r] = acc / r
        t[k] = E * a[r]
    if root_age is RootFromPi or isinstance(root_age, RootFromPi):
        v = t[1:K + 1] @ pi.weights
    else:
        s = float(root_age)
        ms = float(intensity_mass(pi, s))
        Es = math.exp(-ms)
        x, w = pi.positions, pi.weights
        krow = np.minimum(s, x) * w
        us = np.zeros(K + 1)
        a_s = np.zeros(K + 1)
        a_s[0] = 1.0
        v = np.zeros(K)
        v[0] = Es
        for k in range(2, K + 1):
            us[k - 1] = float(krow @ t[k - 1])
            r = k - 1
            a_s[r] = sum(j * us[j] * a_s[r - j] for j in range(1, r + 1)) / r
            v[k - 1] = Es * a_s[r]
    return ProgenyLaw(v=np.asarray(v, dtype=float), residual=float(1.0 - np.sum(v)),
                      method="SmallK_ClosedForm")


# ---------------------------------------------------------------------------
# generating function
# ---------------------------------------------------------------------------

class GenFn:
    """f(s, z) = E z^{|T_s|} via its exponential fixed-point equation.

    f solves f(s, z) = z exp(integral (f(u, z) - 1) min(u, s) dpi(u)).
    Inside |z| < 1/m1 the map is a strict sup-norm contraction; outside,
    the solution is continued radially with warm starts.
    """

    def __init__(self, pi: DiscreteMeasure):
        self.pi = pi
        self.K = kernel_matrix(pi)
        self.m1 = pi.moment(1)
        self._cache: dict[complex, np.ndarray] = {}

    def _iterate(self, z, f0: np.ndarray) -> np.ndarray:
        if complex(z).imag == 0.0 and not np.iscomplexobj(f0) \
                or (np.iscomplexobj(f0) and np.max(np.abs(f0.imag)) == 0.0
                    and complex(z).imag == 0.0):
            z = float(np.real(z))
            f = np.real(f0).astype(float)
        else:
            f = f0.astype(complex)
        for _ in range(GENFN_CAP):
            fn = z * np.exp(self.K @ (f - 1.0))
            res = float(np.max(np.abs(fn - f)))
            f = fn
            if res < GENFN_TOL:
                return f
        raise GenFnConvergenceError(res)

    def grid_values(self, z) -> np.ndarray:
        """f(x_i, z) on the atom grid (real array for real z)."""
        zc = complex(z)
        hit = self._cache.get(zc)
        if hit is not None:
            return hit
        r = abs(zc)
        if r > 1.0 + 1e-12:
            raise ValueError("|z| must be <= 1")
        if zc == 1.0:
            # z = 1: f is the extinction probability; 1 identically unless
            # supercritical, where iteration from 0 finds the minimal fixed
            # point geometrically (plain iteration is sublinear at z = 1)
            try:
                supercrit = classify(self.pi).tag == Criticality.SUPERCRITICAL
            except OperatorIsZeroError:
                supercrit = False     # all mass at age 0: trees are singletons
            if not supercrit:
                f = np.ones(self.pi.natoms)
            else:
                f = np.real(self._iterate(1.0 + 0j, np.zeros(self.pi.natoms)))
            self._cache[zc] = f
            return f
        safe = 0.9 / self.m1 if self.m1 > 0 else 1.0
        zval = zc.real if zc.imag == 0.0 else zc
        if r <= safe:
            f = self._iterate(zval, np.full(self.pi.natoms, zval))
        else:
            direction = zval / r
            radius = safe
            f = self._iterate(direction * radius,
                              np.full(self.pi.natoms, direction * radius))
            while radius < r - 1e-15:
                radius = min(radius + CONTINUATION_STEP, r)
                f = self._iterate(direction * radius, f)
        if abs(zc.imag) == 0.0:
            f = f.real
        self._cache[zc] = f
        return f

    def __call__(self, s, z):
        """f(s, z) at any age s >= 0 (or math.inf)."""
        fg = self.grid_values(z)
        x, w = self.pi.positions, self.pi.weights
        if s == INFINITY:
            kern = x * w
        else:
            kern = np.minimum(float(s), x) * w
        return z * np.exp(kern @ (fg - 1.0))

    def root_from_pi(self, z):
        """E z^{|T|} with the root age drawn from pi."""
        fg = self.grid_values(z)
        return np.sum(fg * self.pi.weights)


def genfn(pi: DiscreteMeasure, s, z):
    return GenFn(pi)(s, z)


# ---------------------------------------------------------------------------
# expected size and the critical expansion
# ---------------------------------------------------------------------------

def expected_size(pi: DiscreteMeasure, s: float):
    """E|T_s| = Neumann series sum; finite only in the subcritical phase.

    Solves (I - L) g = 1 on the grid and extends to off-grid s; returns
    math.inf otherwise.
    """
    cls = classify(pi)
    if cls.tag != Criticality.SUBCRITICAL:
        return INFINITY
    Kmat = kernel_matrix(pi)
    try:
        g = np.linalg.solve(np.eye(pi.natoms) - Kmat, np.ones(pi.natoms))
    except np.linalg.LinAlgError:
        return INFINITY
    kern = np.minimum(float(s), pi.positions) * pi.weights
    return 1.0 + float(kern @ g)


@dataclass(frozen=True)
class SqrtExpansionFit:
    sqrt_two_phi: float
    per_age_slope: np.ndarray     # fitted slope of 1 - f(x_i, 1-eps) vs sqrt(eps)
    theta_estimate: np.ndarray    # per_age_slope / sqrt_two_phi
    epsilons: tuple
    fit_tolerance: float = 0.02   # calibration choice, surfaced in metadata


def sqrt_expansion_fit(pi: DiscreteMeasure,
                       epsilons=(1e-2, 1e-3, 1e-4)) -> SqrtExpansionFit:
    """Fit 1 - f at z = 1-eps against sqrt(eps) to extract sqrt(2 phi).

    Least squares on the model D(eps) = a sqrt(eps) + b eps removes the
    first-order correction; per-age slopes divided by the global slope
    estimate theta(s).
    """
    gf = GenFn(pi)
    eps = np.asarray(epsilons, dtype=float)
    D = np.empty((eps.size, pi.natoms))
    for i, e in enumerate(eps):
        D[i] = 1.0 - np.real(gf.grid_values(1.0 - e))
    design = np.column_stack([np.sqrt(eps), eps])
    coef, *_ = np.linalg.lstsq(design, D, rcond=None)
    per_age = coef[0]
    global_D = D @ pi.weights
    gcoef, *_ = np.linalg.lstsq(design, global_D, rcond=None)
    a = float(gcoef[0])
    return SqrtExpansionFit(sqrt_two_phi=a, per_age_slope=per_age,
                            theta_estimate=per_age / a, epsilons=tuple(eps))
