import math

import numpy as np
import pytest
from scipy import stats

from mfff.branching import (
    GenFn,
    MonteCarlo,
    RootFromPi,
    SmallK_ClosedForm,
    expected_size,
    genfn,
    progeny_law,
    sample_progeny_sizes,
    sample_tree,
    sqrt_expansion_fit,
)
from mfff.measure import SechSquaredStationary, dirac, discretize
from mfff.spectral import leading_eigenpair

BOREL = np.array([k ** (k - 1) * math.exp(-k) / math.factorial(k)
                  for k in range(1, 9)])
CAMPBELL_SCALAR = 0.2319609529865345  # root of f = 0.5 exp(f - 1)


# -- sampling ---------------------------------------------------------------

def test_sample_tree_root_age_zero_singleton():
    rng = np.random.default_rng(0)
    for _ in range(20):
        t = sample_tree(dirac(1.0), 0.0, rng)
        assert t.size == 1 and not t.truncated


def test_sample_tree_offspring_mean():
    rng = np.random.default_rng(1)
    pi = dirac(1.0)
    kids = [np.sum(sample_tree(pi, 0.5, rng, size_cap=10_000).parents == 0)
            for _ in range(4000)]
    mean = np.mean(kids)
    assert abs(mean - 0.5) < 3 * np.std(kids) / math.sqrt(len(kids))


def test_sample_tree_is_tree():
    rng = np.random.default_rng(2)
    t = sample_tree(discretize(SechSquaredStationary(), 100), RootFromPi, rng)
    assert t.parents[t.root] == -1
    assert np.sum(t.parents == -1) == 1
    # every non-root parent index valid and smaller (BFS order)
    v = np.arange(t.size)
    assert np.all(t.parents[v[1:]] < v[1:])


def test_newick_export():
    rng = np.random.default_rng(3)
    t = sample_tree(dirac(1.0), 1.0, rng, size_cap=50)
    s = t.to_newick()
    assert s.endswith(";")
    assert s.count("(") == s.count(")")


# -- progeny law ------------------------------------------------------------

def test_progeny_closed_form_borel():
    pl = progeny_law(dirac(1.0), 4, SmallK_ClosedForm())
    assert np.allclose(pl.v, BOREL[:4], atol=1e-12)
    assert pl.residual == pytest.approx(1.0 - BOREL[:4].sum(), abs=1e-12)


def test_progeny_dirac_zero():
    pl = progeny_law(dirac(0.0), 2, SmallK_ClosedForm())
    assert pl.v[0] == pytest.approx(1.0)
    assert pl.v[1] == pytest.approx(0.0)


def test_progeny_law_montecarlo_vs_closed_form_stationary():
    pi = discretize(SechSquaredStationary(), 300)
    closed = progeny_law(pi, 4, SmallK_ClosedForm())
    rng = np.random.default_rng(7)
    mc = progeny_law(pi, 4, MonteCarlo(replicas=4000, rng=rng, size_cap=20_000))
    for k in range(4):
        assert abs(mc.v[k] - closed.v[k]) <= 3 * mc.stderr[k] + 1e-9


def test_progeny_law_mass_bookkeeping():
    rng = np.random.default_rng(8)
    pl = progeny_law(dirac(0.9), 10, MonteCarlo(replicas=2000, rng=rng))
    assert abs(pl.v.sum() + pl.residual - 1.0) <= 1e-12


def test_progeny_csv(tmp_path):
    pl = progeny_law(dirac(1.0), 3, SmallK_ClosedForm())
    path = tmp_path / "pl.csv"
    pl.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "k,v_k,stderr"
    assert len(lines) == 4


# -- generating function ----------------------------------------------------

def test_genfn_at_zero_age():
    gf = GenFn(discretize(SechSquaredStationary(), 200))
    for z in (0.3, 0.9, 0.2 + 0.1j):
        assert gf(0.0, z) == pytest.approx(z, abs=1e-12)


def test_genfn_at_one_subcritical_critical():
    assert genfn(dirac(0.7), 2.0, 1.0) == pytest.approx(1.0, abs=1e-12)
    assert genfn(dirac(1.0), 5.0, 1.0) == pytest.approx(1.0, abs=1e-12)


def test_genfn_scalar_oracle():
    assert genfn(dirac(1.0), 1.0, 0.5) == pytest.approx(CAMPBELL_SCALAR, abs=1e-9)


def test_genfn_extinction_supercritical():
    # minimal fixed point of f = exp(1.5 (f - 1))
    from scipy.optimize import brentq
    q = brentq(lambda f: f - math.exp(1.5 * (f - 1.0)), 0.0, 0.99)
    assert genfn(dirac(1.5), 1.5, 1.0) == pytest.approx(q, abs=1e-9)


def test_genfn_agrees_with_montecarlo_v1():
    pi = discretize(SechSquaredStationary(), 300)
    gf = GenFn(pi)
    v1_gen = gf.root_from_pi(1e-6) / 1e-6
    rng = np.random.default_rng(9)
    mc = progeny_law(pi, 1, MonteCarlo(replicas=5000, rng=rng, size_cap=20_000))
    assert abs(mc.v[0] - v1_gen) <= 3 * mc.stderr[0]


# -- expected size ----------------------------------------------------------

def test_expected_size_zero_age():
    assert expected_size(dirac(0.5), 0.0) == pytest.approx(1.0)


def test_expected_size_single_type():
    assert expected_size(dirac(0.5), 0.5) == pytest.approx(2.0, abs=1e-10)


def test_expected_size_critical_infinite():
    assert expected_size(dirac(1.0), 1.0) == math.inf


def test_mean_size_monotone_in_root_age():
    pi = dirac(0.8)
    rng = np.random.default_rng(10)
    means, errs = [], []
    for s in (0.2, 0.5, 0.8, 2.0):
        sizes, tr = sample_progeny_sizes(pi, s, 20_000, rng, 100_000)
        kept = sizes[~tr]
        means.append(kept.mean())
        errs.append(kept.std() / math.sqrt(kept.size))
    for (a, ea), (b, eb) in zip(zip(means, errs), zip(means[1:], errs[1:])):
        assert b >= a - 3.0 * math.hypot(ea, eb)


# -- sqrt(1-z) expansion ----------------------------------------------------

def test_sqrt_expansion_delta_one():
    fit = sqrt_expansion_fit(dirac(1.0))
    assert abs(fit.sqrt_two_phi - math.sqrt(2.0)) <= 0.02 * math.sqrt(2.0)


def test_sqrt_expansion_stationary_with_theta():
    pi = discretize(SechSquaredStationary(), 2000)
    fit = sqrt_expansion_fit(pi)
    assert abs(fit.sqrt_two_phi - 1.0) <= 0.02
    ep = leading_eigenpair(pi)
    assert np.max(np.abs(fit.theta_estimate - ep.theta)) <= 0.03


# -- re-rooting invariance --------------------------------------------------

def test_reroot_preserves_shape_distribution():
    rng = np.random.default_rng(11)
    shapes_orig, shapes_re = [], []
    for _ in range(4000):
        t = sample_tree(dirac(1.0), 1.0, rng, size_cap=10_000)
        if t.truncated or t.size > 4:
            continue
        u = int(rng.integers(t.size))
        shapes_orig.append(t.rooted_shape())
        shapes_re.append(t.re_root(u).rooted_shape())
    labels = sorted(set(shapes_orig) | set(shapes_re))
    co = [shapes_orig.count(l) for l in labels]
    cr = [shapes_re.count(l) for l in labels]
    _, p, *_ = stats.chi2_contingency([co, cr])
    assert p > 0.01


def test_reroot_same_edge_set():
    rng = np.random.default_rng(12)
    t = sample_tree(dirac(1.0), 1.0, rng, size_cap=200)
    u = int(rng.integers(t.size))
    t2 = t.re_root(u)
    edges = {frozenset((v, p)) for v, p in enumerate(t.parents) if p >= 0}
    edges2 = {frozenset((v, p)) for v, p in enumerate(t2.parents) if p >= 0}
    assert edges == edges2


# -- criticality vs truncation frequency ------------------------------------

def test_truncation_frequency_matches_phase():
    rng = np.random.default_rng(13)
    sizes, tr = sample_progeny_sizes(dirac(1.1), 1.1, 3000, rng, 100_000)
    assert tr.mean() > 0.05
    sizes, tr = sample_progeny_sizes(dirac(0.9), 0.9, 3000, rng, 100_000)
    assert tr.mean() == 0.0
