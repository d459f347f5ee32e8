import numpy as np
import pytest

from mfff import agepde
from mfff.measure import (
    DiscreteMeasure,
    SechSquaredStationary,
    dirac,
    discretize,
    levy_distance,
)
from mfff.spectral import Criticality


@pytest.fixture(scope="module")
def mono_traj():
    return agepde.evolve(dirac(0.0), 2.0, dt=0.002)


@pytest.fixture(scope="module")
def stat_small():
    return discretize(SechSquaredStationary(), 1000)


def test_dt_bound():
    with pytest.raises(ValueError):
        agepde.step(dirac(0.0), 0.02)
    with pytest.raises(ValueError):
        agepde.step(dirac(0.0), 0.0)


def test_monodisperse_transport_phase(mono_traj):
    ts = np.asarray(mono_traj.times)
    pre = ts < 0.99
    lams = np.asarray(mono_traj.lambdas)
    # delta_0 translates to delta_t with lambda = t before the switch
    assert np.max(np.abs(lams[pre] - ts[pre])) < 1e-12
    for i in np.flatnonzero(pre)[::100]:
        m = mono_traj.measures[i]
        assert m.natoms == 1
        assert abs(m.positions[0] - ts[i]) < 1e-12


def test_monodisperse_switch_time(mono_traj):
    assert abs(mono_traj.switch_time - 1.0) <= 0.02


def test_lambda_pinned_after_switch(mono_traj):
    ts = np.asarray(mono_traj.times)
    lams = np.asarray(mono_traj.lambdas)
    sel = ts >= 1.1
    assert np.max(np.abs(lams[sel] - 1.0)) <= 5e-3


def test_phi_zero_then_bounded(mono_traj):
    ts = np.asarray(mono_traj.times)
    phis = np.asarray(mono_traj.phis)
    assert np.all(phis[ts < 0.99] == 0.0)
    post = phis[ts >= 1.0]
    assert np.all(post > 0.0)
    assert np.all(post <= 1.0)


def test_mean_age_bound(mono_traj):
    for t, m in zip(mono_traj.times, mono_traj.measures):
        assert m.moment(1) <= 0.0 + t + 1e-6


def test_probability_preserved(mono_traj):
    assert max(mono_traj.defects) <= 1e-9
    for m in mono_traj.measures[::100]:
        assert abs(m.total_mass - 1.0) <= 1e-6


def test_levy_lipschitz(mono_traj):
    for i in range(0, len(mono_traj.times) - 150, 171):
        j = i + 150
        ti, tj = mono_traj.times[i], mono_traj.times[j]
        bound = (tj - ti) + mono_traj.phi_integral(ti, tj) + 0.01
        assert levy_distance(mono_traj.measures[i],
                             mono_traj.measures[j]) <= bound


def test_injected_mass_matches_phi(stat_small):
    res = agepde.step(stat_small, 0.002)
    assert res.tag == Criticality.CRITICAL
    assert res.injected == pytest.approx(res.phi * 0.002, rel=1e-2)


def test_stationary_measure_is_fixed(stat_small):
    traj = agepde.evolve(stat_small, 0.4, dt=0.002)
    drift = max(levy_distance(m, stat_small)
                for m in traj.measures[::50])
    assert drift <= 0.01


def test_stationarity_residual_small_at_fixed_point():
    pistat = discretize(SechSquaredStationary(), 2000)
    assert agepde.stationarity_residual(pistat) <= 1e-3


def test_stationarity_residual_large_off_fixed_point():
    assert agepde.stationarity_residual(dirac(1.0)) > 0.1


def test_critical_start_stays_critical():
    traj = agepde.evolve(dirac(1.0), 0.3, dt=0.002)
    lams = np.asarray(traj.lambdas)
    assert np.max(np.abs(lams - 1.0)) <= 5e-3
    assert all(tag == Criticality.CRITICAL for tag in traj.tags)


def test_supercritical_start_aborts():
    with pytest.raises(agepde.AgeSupercriticalError):
        agepde.evolve(dirac(2.0), 0.1, dt=0.002)


def test_measure_at_and_phi_at(mono_traj):
    m = mono_traj.measure_at(0.5)
    assert m.natoms == 1 and abs(m.positions[0] - 0.5) < 1e-12
    assert mono_traj.phi_at(0.5) == 0.0
    assert 0.4 < float(mono_traj.phi_at(2.0)) <= 1.0


def test_prune_keeps_probability(mono_traj):
    # weights decay exponentially with age; pruning must not distort mass
    m = mono_traj.measures[-1]
    assert np.all(m.weights >= 0.0)
    assert abs(m.total_mass - 1.0) <= 1e-9


def test_summary_csv(tmp_path, mono_traj):
    path = tmp_path / "age.csv"
    mono_traj.to_csv(path, stride=100)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,lambda,phi,mean_age,levy_to_previous"
    rows = [list(map(float, ln.split(","))) for ln in lines[1:]]
    assert rows[0][0] == 0.0
    assert abs(rows[-1][0] - 2.0) < 0.21
    # levy between consecutive saved measures stays small
    assert all(r[4] <= 0.25 for r in rows)


def test_bump_derivative_consistency():
    xs = np.linspace(0.3, 1.6, 7)
    f, fp = agepde._bump(xs, 1.0, 0.7)
    h = 1e-6
    fph, _ = agepde._bump(xs + h, 1.0, 0.7)
    fmh, _ = agepde._bump(xs - h, 1.0, 0.7)
    assert np.allclose(fp, (fph - fmh) / (2 * h), atol=1e-5)


def test_nonfinite_mean_rejected():
    with pytest.raises(Exception):
        agepde.evolve(DiscreteMeasure(np.array([np.nan]),
                                      np.array([1.0])), 0.1)
