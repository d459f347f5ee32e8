import math

import numpy as np
import pytest

from mfff.ffode import (
    FLORY,
    FOREST_FIRE,
    SMOLUCHOWSKI,
    GelationWarning,
    SolverConfig,
    Trajectory,
    flory_monodisperse_exact,
    gelation_time,
    monodisperse,
    solve,
    tail_check,
)


@pytest.fixture(scope="module")
def ff_run():
    return solve(FOREST_FIRE, monodisperse(4000), 2.0)


@pytest.fixture(scope="module")
def flory_run():
    return solve(FLORY, monodisperse(4000), 1.0)


# -- gelation time -----------------------------------------------------------

def test_gelation_monodisperse():
    assert gelation_time(monodisperse(100)) == pytest.approx(1.0, abs=1e-12)


def test_gelation_first_moment_two():
    v = np.zeros(50)
    v[0], v[2] = 0.5, 0.5   # masses at k=1 and k=3, first moment 2
    assert gelation_time(v) == pytest.approx(0.5, abs=1e-12)


def test_gelation_steep_tail_no_warning():
    k = np.arange(1, 4001, dtype=float)
    v = k ** -2.5
    v /= v.sum()
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("error", GelationWarning)
        t = gelation_time(v)
    assert 0.0 < t < 1.0


def test_gelation_shallow_tail_flagged():
    k = np.arange(1, 4001, dtype=float)
    v = k ** -2.2
    v /= v.sum()
    with pytest.warns(GelationWarning):
        t = gelation_time(v)
    assert 0.0 < t < 0.5


def test_gelation_divergent_moment():
    k = np.arange(1, 4001, dtype=float)
    v = k ** -1.5
    v /= v.sum()
    with pytest.warns(GelationWarning):
        assert gelation_time(v) == 0.0


# -- Flory vs closed form ----------------------------------------------------

def test_flory_closed_form(flory_run):
    k = np.arange(1, 21)
    for t in (0.25, 0.5, 0.75, 1.0):
        v = flory_run.state_at(t).v[:20]
        assert np.max(np.abs(v - flory_monodisperse_exact(k, t))) <= 1e-6


def test_flory_closed_form_tail_profile(flory_run):
    # at t = 1 the profile approaches k^{-3/2} / sqrt(2 pi)
    v = flory_run.state_at(1.0).v
    k = 500
    assert v[k - 1] * k ** 1.5 == pytest.approx(1.0 / math.sqrt(2 * math.pi),
                                                rel=0.01)


# -- forest fire -------------------------------------------------------------

def test_ff_singleton_decay(ff_run):
    assert ff_run.state_at(0.5).v[0] == pytest.approx(math.exp(-0.5), abs=1e-10)


def test_ff_equals_flory_pre_gel(ff_run, flory_run):
    for t in (0.3, 0.6, 0.9):
        d = np.abs(ff_run.state_at(t).v - flory_run.state_at(t).v)
        assert d.max() <= 1e-8


def test_ff_gel_time(ff_run):
    assert ff_run.t_gel == pytest.approx(1.0, abs=1e-6)


def test_ff_phi_phases(ff_run):
    pre = ff_run.phi_values[ff_run.phi_times < 1.0]
    post = ff_run.phi_values[ff_run.phi_times > 1.0]
    assert np.all(pre == 0.0)
    assert np.all(post > 0.0)
    assert np.all(post <= 1.0 + 1e-6)


def test_ff_phi_at_interpolation(ff_run):
    assert ff_run.phi_at(0.5) == 0.0
    assert 0.4 < float(ff_run.phi_at(2.0)) < 0.6


def test_ff_mass_bookkeeping(ff_run):
    for st in ff_run.states:
        assert abs(st.v.sum() + st.tail_mass - 1.0) <= 1e-6


def test_ff_tail_check(ff_run):
    ratio = tail_check(ff_run.state_at(2.0))
    assert 0.95 <= ratio <= 1.05


def test_ff_tail_profile(ff_run):
    # k^{-3/2} prefactor sqrt(phi / 2 pi) in the bulk
    st = ff_run.state_at(2.0)
    c = math.sqrt(st.phi / (2 * math.pi))
    for k in (100, 500, 1000):
        assert st.v[k - 1] * k ** 1.5 == pytest.approx(c, rel=0.03)


def test_ff_phi_lipschitz(ff_run):
    dt = ff_run.config.dt
    sel = ff_run.phi_times >= 1.1
    dphi = np.abs(np.diff(ff_run.phi_values[sel]))
    C = dphi.max() / dt
    assert C < 10.0


def test_tail_check_pre_gel_raises(ff_run):
    with pytest.raises(ValueError):
        tail_check(ff_run.state_at(0.5))


# -- Smoluchowski ------------------------------------------------------------

def test_smoluchowski_mass_decreasing():
    tr = solve(SMOLUCHOWSKI, monodisperse(800), 2.0, SolverConfig(K=800))
    masses = [s.v.sum() for s in tr.states]
    assert all(b <= a + 1e-12 for a, b in zip(masses, masses[1:]))
    # Smoluchowski total mass tends to 1/t for monodisperse data
    assert masses[-1] == pytest.approx(0.5, abs=1e-3)


def test_smoluchowski_equals_flory_pre_gel():
    cfg = SolverConfig(K=400)
    sm = solve(SMOLUCHOWSKI, monodisperse(400), 0.9, cfg)
    fl = solve(FLORY, monodisperse(400), 0.9, cfg)
    assert np.abs(sm.state_at(0.8).v - fl.state_at(0.8).v).max() <= 1e-8


# -- plumbing ----------------------------------------------------------------

def test_bad_model():
    with pytest.raises(ValueError):
        solve("Exotic", monodisperse(10), 1.0, SolverConfig(K=10))


def test_unnormalized_rejected():
    with pytest.raises(ValueError):
        solve(FLORY, 2.0 * monodisperse(10), 1.0, SolverConfig(K=10))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(K=1)
    with pytest.raises(ValueError):
        SolverConfig(dt=0.0)
    with pytest.raises(ValueError):
        SolverConfig(scheme="Euler")
    with pytest.raises(ValueError):
        SolverConfig(tail_policy="Chop")


def test_csv_export(tmp_path, ff_run):
    path = tmp_path / "traj.csv"
    ff_run.to_csv(path, k_max=5)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,v_1,v_2,v_3,v_4,v_5,tail_mass,phi"
    assert len(lines) == len(ff_run.states) + 1


def test_summary(ff_run):
    s = ff_run.summary()
    assert s["model"] == FOREST_FIRE
    assert s["t_gel"] == pytest.approx(1.0)
    assert len(s["phi_samples"]["t"]) >= 10


def test_truncation_refinement():
    # tail_check moves toward 1 as K doubles
    ratios = []
    for K in (1000, 2000):
        tr = solve(FOREST_FIRE, monodisperse(K), 2.0, SolverConfig(K=K))
        ratios.append(tail_check(tr.state_at(2.0)))
    assert abs(ratios[1] - 1.0) <= abs(ratios[0] - 1.0) + 0.02
    assert all(0.9 <= r <= 1.1 for r in ratios)
