import math

import numpy as np
import pytest

from mfff import ffode
from mfff.branching import GenFn
from mfff.charcurves import (
    CharCurveSolution,
    MassDefectError,
    ReconstructedMeasure,
    consistency_error,
    generating_function_value,
    reconstruct_pi,
    reconstruct_theta_at,
    solve_backward,
    _li_three_halves,
    _ZETA_32_LADDER,
)
from mfff.measure import dirac, levy_distance
from mfff.spectral import leading_eigenpair


@pytest.fixture(scope="module")
def ff_run():
    return ffode.solve(ffode.FOREST_FIRE, ffode.monodisperse(4000), 3.0)


@pytest.fixture(scope="module")
def sol2(ff_run):
    return solve_backward(ff_run.phi_at, 2.0)


# -- backward solve ----------------------------------------------------------

def test_pre_gel_identity(ff_run):
    sol = solve_backward(ff_run.phi_at, 0.8)
    assert np.allclose(sol.psi, 1.0, atol=1e-12)
    assert np.allclose(sol.x, 1.0, atol=1e-12)


def test_terminal_conditions(sol2):
    assert sol2.psi[-1] == 1.0
    assert sol2.x[-1] == 1.0


def test_psi_x_ranges(sol2):
    assert np.all(sol2.psi > 0.0)
    assert np.all(sol2.psi <= 1.0 + 1e-9)
    assert np.all(sol2.x >= 0.0)
    assert np.all(sol2.x <= 1.0 + 1e-9)


def test_psi_monotone_in_s(sol2):
    # d psi / ds = psi (1 - x) >= 0
    assert np.all(np.diff(sol2.psi) >= -1e-12)


def test_psi_decreasing_in_t(ff_run):
    a = solve_backward(ff_run.phi_at, 1.5)
    b = solve_backward(ff_run.phi_at, 2.0)
    s = np.linspace(0.0, 1.5, 40)
    assert np.all(b.psi_at(s) <= a.psi_at(s) + 1e-12)


def test_psi_continuous_across_gel(sol2):
    ds = sol2.s_grid[1] - sol2.s_grid[0]
    near = (sol2.s_grid > 0.9) & (sol2.s_grid < 1.1)
    jumps = np.abs(np.diff(sol2.psi[near]))
    assert jumps.max() <= 5.0 * ds


def test_internal_consistency(ff_run, sol2):
    assert consistency_error(sol2, ff_run) <= 1e-4


def test_t_off_grid_rejected(ff_run):
    with pytest.raises(ValueError):
        solve_backward(ff_run.phi_at, 2.00037)


def test_csv_export(tmp_path, sol2):
    path = tmp_path / "sol.csv"
    sol2.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "s,psi,x"
    assert len(lines) == sol2.s_grid.size + 1


# -- polylog helper ----------------------------------------------------------

def test_li_three_halves():
    k = np.arange(1, 500001, dtype=float)
    for z in (0.2, 0.85, 0.97, 0.9995):
        brute = float(np.sum(np.power(z, k) * k ** -1.5))
        assert _li_three_halves(z) == pytest.approx(brute, abs=1e-10)
    assert _ZETA_32_LADDER[0] == pytest.approx(2.612375348685488, abs=1e-12)


def test_generating_function_endpoints(ff_run):
    st = ff_run.state_at(2.0)
    assert generating_function_value(st, 0.0) == 0.0
    assert generating_function_value(st, 1.0) == pytest.approx(1.0, abs=1e-12)


# -- reconstruction of pi ----------------------------------------------------

def test_reconstruct_pre_gel_is_translation(ff_run):
    pi0 = dirac(0.0)
    sol = solve_backward(ff_run.phi_at, 0.5)
    rec = reconstruct_pi(pi0, sol, GenFn(pi0))
    assert levy_distance(rec.measure, pi0.translate(0.5)) <= 1e-9
    assert rec.burnt_mass == 0.0


def test_reconstruct_mass_defect(ff_run, sol2):
    rec = reconstruct_pi(dirac(0.0), sol2, GenFn(dirac(0.0)))
    assert rec.mass_defect <= 1e-3


def test_reconstruct_surviving_atom(ff_run, sol2):
    # from delta_0 the never-burnt mass sits at age t with weight f(0, psi)
    rec = reconstruct_pi(dirac(0.0), sol2, GenFn(dirac(0.0)))
    m = rec.measure
    i = np.argmin(np.abs(m.positions - 2.0))
    assert m.positions[i] == pytest.approx(2.0, abs=1e-12)
    assert m.weights[i] == pytest.approx(sol2.psi_at_zero, abs=1e-3)
    assert rec.burnt_mass == pytest.approx(1.0 - sol2.psi_at_zero, abs=1e-3)


# -- reconstruction of theta -------------------------------------------------

@pytest.fixture(scope="module")
def theta2(ff_run):
    phi2 = float(ff_run.phi_at(2.0))
    return reconstruct_theta_at(2.0, ff_run.phi_at, phi2, GenFn(dirac(0.0)))


def test_theta_zero_at_age_zero(theta2):
    assert abs(theta2.theta_at(0.0)) <= 1e-2


def test_theta_nondecreasing(theta2):
    assert np.all(np.diff(theta2.values) >= -1e-3)


def test_theta_normalization(ff_run, sol2, theta2):
    rec = reconstruct_pi(dirac(0.0), sol2, GenFn(dirac(0.0)))
    assert theta2.normalization(rec.measure) == pytest.approx(1.0, abs=2e-2)


def test_theta_matches_spectral(ff_run, sol2, theta2):
    rec = reconstruct_pi(dirac(0.0), sol2, GenFn(dirac(0.0)))
    ep = leading_eigenpair(rec.measure)
    sup = np.max(np.abs(theta2.theta_at(rec.measure.positions) - ep.theta))
    assert sup <= 0.05


def test_theta_pre_gel_rejected(ff_run):
    with pytest.raises(ValueError):
        reconstruct_theta_at(0.5, ff_run.phi_at, 0.0, GenFn(dirac(0.0)))


def test_theta_delta_refinement(ff_run):
    # smoothness proxy: halving delta moves the estimate by < 1%
    phi2 = float(ff_run.phi_at(2.0))
    gf = GenFn(dirac(0.0))
    a = reconstruct_theta_at(2.0, ff_run.phi_at, phi2, gf,
                             delta=2e-3, richardson=False)
    b = reconstruct_theta_at(2.0, ff_run.phi_at, phi2, gf,
                             delta=1e-3, richardson=False)
    ages = np.linspace(0.2, 1.8, 30)
    ra, rb = a.theta_at(ages), b.theta_at(ages)
    assert np.max(np.abs(ra - rb) / np.abs(rb)) <= 0.01
