"""Finite-n Monte Carlo for the mean-field forest fire with ages.

Event-driven simulation of the n-vertex process (edge arrivals at rate
1/n per pair, lightning at rate lambda per vertex, struck components
burn to singletons with ages reset), the age-driven inhomogeneous
random graph sampler, the tagged cluster growth process driven by a
cluster density trajectory, and the statistical tests that tie the
finite system to its limit objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.stats import chi2 as chi2_dist

from .measure import DiscreteMeasure, MeasureSpec, empirical_measure, sample
from .spectral import intensity_mass
from .branching import RootFromPi, sample_progeny_sizes, sample_tree

DEFAULT_KMAX = 100
EXPLOSION_CAP = 10 ** 6


def default_lightning_rate(n: int) -> float:
    """Self-organized critical scaling 1/n << lambda << 1."""
    return n ** -0.5


# ---------------------------------------------------------------------------
# age-driven inhomogeneous random graph
# ---------------------------------------------------------------------------

def _labels_from_edges(n: int, edges: np.ndarray) -> np.ndarray:
    if edges.size == 0:
        return np.arange(n)
    data = np.ones(edges.shape[0], dtype=np.int8)
    adj = sparse.coo_matrix((data, (edges[:, 0], edges[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return labels


def sample_irg(n: int, ages, rng: np.random.Generator,
               mode: str = "PartitionOnly"):
    """Graph with pair {i,j} present w.p. 1 - exp(-min(a_i,a_j)/n).

    Vertices are sorted by age so that every pair's probability is set
    by the earlier vertex in the order; candidates are then skip-sampled
    with geometric gaps (O(n + edges) work).  FullGraph returns the edge
    array; PartitionOnly returns component labels.
    """
    if n < 1:
        raise ValueError("n >= 1 required")
    if mode not in ("FullGraph", "PartitionOnly"):
        raise ValueError("unknown mode %r" % mode)
    ages = np.asarray(ages, dtype=float)
    if ages.shape != (n,) or np.any(ages < 0):
        raise ValueError("ages must be n nonnegative reals")
    order = np.argsort(ages, kind="stable")
    a_sorted = ages[order]
    edges: List[Tuple[int, int]] = []
    for i in range(n - 1):
        p = -math.expm1(-a_sorted[i] / n)
        if p <= 0.0:
            continue
        log1mp = math.log1p(-p)
        j = i
        m = n - 1 - i  # candidates j+1 .. n-1 share probability p
        while True:
            gap = int(math.log(rng.random()) / log1mp)
            j += 1 + gap
            if j >= i + 1 + m:
                break
            edges.append((order[i], order[j]))
    earr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if mode == "FullGraph":
        return earr
    return _labels_from_edges(n, earr)


# ---------------------------------------------------------------------------
# forest fire process
# ---------------------------------------------------------------------------

@dataclass
class BurnLog:
    n: int
    times: List[float] = field(default_factory=list)
    sizes: List[int] = field(default_factory=list)
    struck: List[int] = field(default_factory=list)

    def record(self, t: float, size: int, vertex: int) -> None:
        self.times.append(t)
        self.sizes.append(size)
        self.struck.append(vertex)

    def burn_flux(self, t1: float, t2: float) -> float:
        """Fraction of vertices burned during (t1, t2]."""
        ts = np.asarray(self.times)
        ss = np.asarray(self.sizes)
        sel = (ts > t1) & (ts <= t2)
        return float(ss[sel].sum()) / self.n

    def cumulative(self, t: float) -> float:
        return self.burn_flux(-math.inf, t)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("t,size,vertex\n")
            for t, s, v in zip(self.times, self.sizes, self.struck):
                fh.write("%.17g,%d,%d\n" % (t, s, v))


class ForestFireState:
    """Partition-with-ages state; optional exact edge set for small n."""

    def __init__(self, n: int, alpha: np.ndarray, labels: np.ndarray,
                 track_edges: bool, rng: np.random.Generator):
        self.n = n
        self.t = 0.0
        self.alpha = alpha          # last-burn time; age = t - alpha
        self.rng = rng
        self.comp_id = np.empty(n, dtype=np.int64)
        self.members: Dict[int, List[int]] = {}
        self._next_comp = 0
        for lab in np.unique(labels):
            cid = self._next_comp
            self._next_comp += 1
            mem = np.flatnonzero(labels == lab)
            self.comp_id[mem] = cid
            self.members[cid] = mem.tolist()
        self.adj: Optional[List[set]] = \
            [set() for _ in range(n)] if track_edges else None

    @property
    def ages(self) -> np.ndarray:
        return self.t - self.alpha

    def component_sizes(self) -> np.ndarray:
        return np.fromiter((len(m) for m in self.members.values()),
                           dtype=np.int64, count=len(self.members))

    def check_partition(self) -> bool:
        return int(self.component_sizes().sum()) == self.n

    def add_edge(self, i: int, j: int) -> Tuple[int, int]:
        """Merge the components of i and j; returns the two old sizes.

        In edge-tracking mode an arrival on a present edge is ignored;
        without edges only inter-component arrivals matter.
        """
        if self.adj is not None:
            if j in self.adj[i]:
                return (0, 0)
            self.adj[i].add(j)
            self.adj[j].add(i)
        ci, cj = self.comp_id[i], self.comp_id[j]
        if ci == cj:
            return (0, 0)
        mi, mj = self.members[ci], self.members[cj]
        if len(mi) < len(mj):
            ci, cj, mi, mj = cj, ci, mj, mi
        self.comp_id[mj] = ci
        mi.extend(mj)
        del self.members[cj]
        return (len(mi) - len(mj), len(mj))

    def burn(self, vertex: int, reset_ages: bool = True) -> int:
        cid = self.comp_id[vertex]
        mem = self.members.pop(cid)
        if reset_ages:
            self.alpha[mem] = self.t
        for u in mem:
            nid = self._next_comp
            self._next_comp += 1
            self.comp_id[u] = nid
            self.members[nid] = [u]
            if self.adj is not None:
                for w in self.adj[u]:
                    self.adj[w].discard(u)
                self.adj[u].clear()
        return len(mem)

    def edge_array(self) -> np.ndarray:
        if self.adj is None:
            raise ValueError("edges are tracked only in FullGraph mode")
        out = [(u, w) for u in range(self.n) for w in self.adj[u] if u < w]
        return np.asarray(out, dtype=np.int64).reshape(-1, 2)


@dataclass(frozen=True)
class Snapshot:
    t: float
    ages: np.ndarray
    v: np.ndarray          # v_k = k * (#components of size k) / n

    @property
    def pi(self) -> DiscreteMeasure:
        return empirical_measure(self.ages)


@dataclass
class MfffRun:
    n: int
    lam: float
    snapshots: List[Snapshot]
    burn_log: BurnLog
    state: ForestFireState
    pair_cohabit_proxy: float   # sum over merges of |A||B| / C(n,2)

    def snapshot_at(self, t: float) -> Snapshot:
        i = int(np.argmin([abs(s.t - t) for s in self.snapshots]))
        return self.snapshots[i]


def _snapshot(state: ForestFireState, t: float, k_max: int) -> Snapshot:
    sizes = state.component_sizes()
    counts = np.bincount(sizes, weights=sizes.astype(float),
                         minlength=k_max + 1)
    v = counts[1:k_max + 1] / state.n
    return Snapshot(t=t, ages=t - state.alpha.copy(), v=v)


def run_mfff(n: int, lam: Optional[float], init: MeasureSpec, T: float,
             rng: np.random.Generator,
             snapshot_times: Sequence[float] = (),
             mode: str = "PartitionOnly",
             k_max: int = DEFAULT_KMAX,
             _reset_ages_on_burn: bool = True) -> MfffRun:
    """Event-driven forest fire on n vertices over [0, T].

    The initial graph is the age-driven IRG of the initial ages.  Edge
    events arrive at total rate C(n,2)/n with a uniform pair; lightning
    strikes at total rate n lambda with a uniform vertex, resetting the
    struck component's ages and splitting it into singletons.
    _reset_ages_on_burn=False deliberately corrupts the dynamics; it
    exists as the negative control of the conditional IRG test.
    """
    if lam is None:
        lam = default_lightning_rate(n)
    ages0 = sample(init, n, rng)
    alpha = -np.asarray(ages0, dtype=float)
    g0 = sample_irg(n, ages0, rng, mode=mode)
    if mode == "FullGraph":
        labels = _labels_from_edges(n, g0)
        state = ForestFireState(n, alpha, labels, True, rng)
        for i, j in g0:
            state.adj[i].add(int(j))
            state.adj[j].add(int(i))
    else:
        state = ForestFireState(n, alpha, g0, False, rng)
    burn_log = BurnLog(n=n)
    rate_edge = (n - 1) / 2.0
    rate_light = n * lam
    total_rate = rate_edge + rate_light
    p_edge = rate_edge / total_rate
    pending = sorted(float(s) for s in snapshot_times)
    snaps: List[Snapshot] = []
    proxy = 0.0
    pairs = n * (n - 1) / 2.0
    t = 0.0
    while True:
        t_next = t + rng.exponential(1.0 / total_rate)
        while pending and pending[0] <= min(t_next, T):
            ts = pending.pop(0)
            state.t = ts
            snaps.append(_snapshot(state, ts, k_max))
        if t_next >= T:
            break
        t = t_next
        state.t = t
        if rng.random() < p_edge:
            i = int(rng.integers(n))
            j = int(rng.integers(n - 1))
            if j >= i:
                j += 1
            sa, sb = state.add_edge(i, j)
            if sb:
                proxy += sa * sb / pairs
        else:
            v = int(rng.integers(n))
            size = len(state.members[state.comp_id[v]])
            burn_log.record(t, size, v)
            state.burn(v, reset_ages=_reset_ages_on_burn)
    state.t = T
    return MfffRun(n=n, lam=lam, snapshots=snaps, burn_log=burn_log,
                   state=state, pair_cohabit_proxy=proxy)


# ---------------------------------------------------------------------------
# conditional IRG test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IrgTestReport:
    n: int
    replicas: int
    bin_edges: np.ndarray
    observed: np.ndarray
    expected: np.ndarray
    z_scores: np.ndarray
    chi2: float
    dof: int
    p_value: float
    zero_expectation_violations: int


def conditional_irg_test(n: int, lam: float, T: float, replicas: int,
                         rng: np.random.Generator,
                         bin_width: float = 0.25,
                         _reset_ages_on_burn: bool = True) -> IrgTestReport:
    """Given the age history, edges must form the age-driven IRG.

    Pairs are binned by the quantized minimum of their two ages at time
    T; per-bin edge counts are compared to the summed conditional
    probabilities 1 - exp(-min/n).  Conditionally on the ages the pair
    indicators are independent, so the bin sums are asymptotically
    normal and the z-scores combine into a chi-squared statistic.
    """
    if n > 500:
        raise ValueError("exact edge tracking is reserved for n <= 500")
    from .measure import DiracAt
    iu, ju = np.triu_indices(n, k=1)
    nbins = int(math.ceil((T + bin_width) / bin_width)) + 1
    obs = np.zeros(nbins)
    exp_ = np.zeros(nbins)
    var = np.zeros(nbins)
    zero_viol = 0
    for _ in range(replicas):
        run = run_mfff(n, lam, DiracAt(0.0), T, rng, mode="FullGraph",
                       _reset_ages_on_burn=_reset_ages_on_burn)
        ages = run.state.ages
        edges = run.state.edge_array()
        amin = np.minimum(ages[iu], ages[ju])
        p = -np.expm1(-amin / n)
        adj = np.zeros((n, n), dtype=bool)
        if edges.size:
            adj[edges[:, 0], edges[:, 1]] = True
            adj[edges[:, 1], edges[:, 0]] = True
        hit = adj[iu, ju].astype(float)
        idx = np.minimum((amin / bin_width).astype(np.int64), nbins - 1)
        zero = p <= 0.0
        zero_viol += int(hit[zero].sum())
        obs += np.bincount(idx, weights=hit, minlength=nbins)
        exp_ += np.bincount(idx, weights=p, minlength=nbins)
        var += np.bincount(idx, weights=p * (1.0 - p), minlength=nbins)
    # fold bins with expected count < 5 into the previous live bin
    keep_obs, keep_exp, keep_var = [], [], []
    for b in range(nbins):
        if exp_[b] <= 0.0:
            continue
        if keep_exp and (exp_[b] < 5.0 or keep_exp[-1] < 5.0):
            keep_obs[-1] += obs[b]
            keep_exp[-1] += exp_[b]
            keep_var[-1] += var[b]
        else:
            keep_obs.append(obs[b])
            keep_exp.append(exp_[b])
            keep_var.append(var[b])
    o = np.asarray(keep_obs)
    e = np.asarray(keep_exp)
    s2 = np.asarray(keep_var)
    z = (o - e) / np.sqrt(np.maximum(s2, 1e-300))
    stat = float(np.sum(z ** 2))
    dof = z.size
    p_value = float(chi2_dist.sf(stat, dof)) if dof else 1.0
    return IrgTestReport(n=n, replicas=replicas,
                         bin_edges=np.arange(nbins + 1) * bin_width,
                         observed=o, expected=e, z_scores=z, chi2=stat,
                         dof=dof, p_value=p_value,
                         zero_expectation_violations=zero_viol)


# ---------------------------------------------------------------------------
# cluster growth process with ages
# ---------------------------------------------------------------------------

@dataclass
class ClusterGrowthPath:
    times: List[float]            # jump/reset times, starting at 0
    sizes: List[int]              # size right after each time
    explosion_times: List[float]
    initial_age: float
    cap: int
    bias_flag: bool               # True when an explosion was cap-detected

    def size_at(self, t: float) -> int:
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.sizes[max(i, 0)]

    def age_at(self, t: float) -> float:
        last = -self.initial_age
        for tau in self.explosion_times:
            if tau <= t:
                last = tau
        return t - last


class _JumpTable:
    """Per-state cdf over increments, with the sqrt-tail surrogate."""

    def __init__(self, v_traj):
        self.traj = v_traj
        self._cache: Dict[int, Tuple[np.ndarray, float]] = {}

    def sample(self, t: float, rng: np.random.Generator) -> int:
        st = self.traj.state_at(t)
        key = id(st)
        hit = self._cache.get(key)
        if hit is None:
            cdf = np.cumsum(st.export_v())
            hit = (cdf, float(st.tail_mass))
            self._cache[key] = hit
        cdf, tail = hit
        u = rng.random() * (cdf[-1] + tail)
        if u <= cdf[-1]:
            return int(np.searchsorted(cdf, u)) + 1
        # beyond the truncation: ccdf of the k^{-3/2} profile is ~ k^{-1/2}
        K = cdf.size
        return int(math.ceil(K * rng.random() ** -2.0))


def _initial_size(pi0_measure: DiscreteMeasure, a0: float, cap: int,
                  rng: np.random.Generator) -> Tuple[int, bool]:
    sizes, trunc = sample_progeny_sizes(pi0_measure, a0, 1, rng,
                                        size_cap=cap)
    return int(sizes[0]), bool(trunc[0])


class SurvivalSampler:
    """Explosion-time sampler from the characteristic-curve survival law.

    Precomputes psi_t(s) on a terminal-time grid once; each path then
    only inverts the (nonincreasing) survival function by table lookup.
    """

    def __init__(self, phi_of_t, pi_meas: DiscreteMeasure, T: float,
                 ds: float = 1e-3, t_step: float = 0.01):
        from .charcurves import solve_backward
        from .branching import GenFn
        step = max(ds, t_step)
        self.nt = int(round(T / step))
        self.tgrid = np.arange(self.nt + 1) * step
        self.T = float(T)
        self._sols = [solve_backward(phi_of_t, float(tj), ds)
                      if tj > 0 else None for tj in self.tgrid]
        self.gf = GenFn(pi_meas)

    def _survival_from(self, s: float, a0: Optional[float]) -> np.ndarray:
        out = np.ones(self.nt + 1)
        for j, sol in enumerate(self._sols):
            if sol is None or self.tgrid[j] <= s:
                continue
            z = float(sol.psi_at(s))
            if a0 is None:
                out[j] = z
            else:
                # the whole initial tree must survive: f(a0, psi)
                out[j] = float(np.real(self.gf(a0, z)))
        return out

    def sample_explosions(self, a0: float,
                          rng: np.random.Generator) -> List[float]:
        explosions: List[float] = []
        s = 0.0
        surv = self._survival_from(0.0, a0)
        while True:
            u = rng.random()
            if u <= surv[-1]:
                return explosions
            j = int(np.searchsorted(-surv, -u))  # surv is nonincreasing
            lo, hi = self.tgrid[j - 1], self.tgrid[j]
            flo, fhi = surv[j - 1], surv[j]
            tau = lo + (flo - u) / max(flo - fhi, 1e-300) * (hi - lo)
            tau = float(min(max(tau, s + 1e-12), self.T))
            explosions.append(tau)
            s = tau
            surv = self._survival_from(s, None)


def cluster_growth_sim(v_traj, phi, pi0: MeasureSpec, T: float,
                       rng: np.random.Generator,
                       cap: int = EXPLOSION_CAP,
                       explosion_mode: str = "Cap",
                       ds: float = 1e-3,
                       survival_sampler: Optional[SurvivalSampler] = None,
                       ) -> ClusterGrowthPath:
    """Tagged cluster path: hold at rate = size, jump by k ~ v_k(t).

    The initial age is drawn from pi0 and the initial size from the
    progeny law of the aged tree rooted there.  Cap mode declares an
    explosion when the size exceeds cap (bias flag set); size and age
    reset to 1 and 0.  SurvivalSampling draws the explosion times from
    the survival probabilities psi of the characteristic curves and
    does not simulate sizes at all; pass a prebuilt SurvivalSampler to
    amortize its setup over many paths.
    """
    from .measure import discretize, dirac, DiracAt
    if isinstance(pi0, DiracAt):
        pi_meas = dirac(pi0.x)
    else:
        pi_meas = discretize(pi0, 500)
    a0 = float(sample(pi0, 1, rng)[0])
    if explosion_mode == "SurvivalSampling":
        if survival_sampler is None:
            survival_sampler = SurvivalSampler(
                phi if phi is not None else v_traj.phi_at, pi_meas, T, ds)
        explosions = survival_sampler.sample_explosions(a0, rng)
        return ClusterGrowthPath(times=[0.0], sizes=[1],
                                 explosion_times=explosions,
                                 initial_age=a0, cap=cap, bias_flag=False)
    if explosion_mode != "Cap":
        raise ValueError("unknown explosion_mode %r" % explosion_mode)
    size, trunc = _initial_size(pi_meas, a0, cap, rng)
    table = _JumpTable(v_traj)
    times, sizes = [0.0], [size]
    explosions: List[float] = []
    bias = False
    t = 0.0
    if trunc:
        explosions.append(0.0)
        sizes[-1] = 1
        size = 1
        bias = True
    while True:
        t += rng.exponential(1.0 / size)
        if t >= T:
            break
        size += table.sample(t, rng)
        if size > cap:
            explosions.append(t)
            size = 1
            bias = True
        times.append(t)
        sizes.append(size)
    return ClusterGrowthPath(times=times, sizes=sizes,
                             explosion_times=explosions, initial_age=a0,
                             cap=cap, bias_flag=bias)


# ---------------------------------------------------------------------------
# local census
# ---------------------------------------------------------------------------

def _graph_ball_classes(n: int, edges: np.ndarray, r: int):
    deg = np.zeros(n, dtype=np.int64)
    if edges.size:
        deg += np.bincount(edges[:, 0], minlength=n)
        deg += np.bincount(edges[:, 1], minlength=n)
    if r == 1:
        return [(int(d),) for d in deg]
    nbrs: List[List[int]] = [[] for _ in range(n)]
    for i, j in edges:
        nbrs[i].append(int(j))
        nbrs[j].append(int(i))
    return [(int(deg[v]), tuple(sorted(int(deg[w]) for w in nbrs[v])))
            for v in range(n)]


def _tree_ball_class(tree, r: int):
    parents = tree.parents
    nchild = np.zeros(parents.size, dtype=np.int64)
    for p in parents[1:]:
        nchild[p] += 1
    root_deg = int(nchild[0])
    if r == 1:
        return (root_deg,)
    kids = np.flatnonzero(parents == 0)
    return (root_deg, tuple(sorted(int(1 + nchild[c]) for c in kids)))


@dataclass(frozen=True)
class CensusReport:
    tv_gap: float
    graph_freq: dict
    reference_freq: dict
    classes_compared: int


def local_census(n: int, edges: np.ndarray, r: int,
                 pi_reference: DiscreteMeasure, rng: np.random.Generator,
                 reference_samples: int = 20000,
                 min_frequency: float = 1e-3) -> CensusReport:
    """Rooted r-ball frequencies of the graph vs the limit tree.

    The r-ball class is the root degree (r = 1) or the root degree plus
    the sorted neighbor degrees (r = 2); the reference frequencies come
    from Monte Carlo sampling of the aged branching tree with the root
    age drawn from pi_reference.
    """
    if r not in (1, 2):
        raise ValueError("radius must be 1 or 2")
    gclasses = _graph_ball_classes(n, edges, r)
    gfreq: Dict = {}
    for c in gclasses:
        gfreq[c] = gfreq.get(c, 0) + 1
    gfreq = {c: v / n for c, v in gfreq.items()}
    rfreq: Dict = {}
    for _ in range(reference_samples):
        tree = sample_tree(pi_reference, RootFromPi, rng, size_cap=2000)
        c = _tree_ball_class(tree, r)
        rfreq[c] = rfreq.get(c, 0) + 1
    rfreq = {c: v / reference_samples for c, v in rfreq.items()}
    keys = [c for c in set(gfreq) | set(rfreq)
            if max(gfreq.get(c, 0.0), rfreq.get(c, 0.0)) >= min_frequency]
    gap = 0.5 * sum(abs(gfreq.get(c, 0.0) - rfreq.get(c, 0.0))
                    for c in keys)
    return CensusReport(tv_gap=gap, graph_freq=gfreq, reference_freq=rfreq,
                        classes_compared=len(keys))


def isolated_vertex_probability(pi: DiscreteMeasure) -> float:
    """P(the aged tree's root has no children) = int e^{-m_s} dpi(s)."""
    m = intensity_mass(pi, pi.positions)
    return float(np.exp(-m) @ pi.weights)
