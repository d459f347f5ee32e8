"""Characteristic curves of the cluster growth process.

Backward integration of the survival system

    d psi / ds = psi (1 - x),      d x / ds = psi phi(s),

with final conditions psi(t) = x(t) = 1.  psi_t(s) is the probability
that the growth process started from a singleton at time s does not
explode before t; x_t(s) is the generating function X_s(z) = sum v_k z^k
of the cluster size densities evaluated along the curve.  From psi the
age distribution pi_t and the burning profile theta_t are reconstructed
without touching the age differential equation, which makes the two
pipelines independent cross-checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .measure import DiscreteMeasure
from .branching import GenFn

PSI_TOL = 1e-9
MASS_DEFECT_MAX = 1e-3
PHI_MIN = 1e-6
DEFAULT_DS = 1e-3
DEFAULT_DELTA = 1e-3


class PsiRangeError(RuntimeError):
    pass


class MassDefectError(RuntimeError):
    pass


@dataclass(frozen=True)
class CharCurveSolution:
    """psi and x on the s-grid of [0, t], integrated backward from s = t."""

    t: float
    s_grid: np.ndarray
    psi: np.ndarray
    x: np.ndarray

    @property
    def psi_at_zero(self) -> float:
        return float(self.psi[0])

    def psi_at(self, s) -> np.ndarray:
        return np.interp(np.asarray(s, dtype=float), self.s_grid, self.psi)

    def x_at(self, s) -> np.ndarray:
        return np.interp(np.asarray(s, dtype=float), self.s_grid, self.x)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("s,psi,x\n")
            for s, p, xx in zip(self.s_grid, self.psi, self.x):
                fh.write("%.17g,%.17g,%.17g\n" % (s, p, xx))


def solve_backward(phi_of_t, t: float, ds: float = DEFAULT_DS,
                   v_traj=None) -> CharCurveSolution:
    """Integrate (psi, x) backward from s = t to s = 0 with RK4.

    phi_of_t may be None when a forest-fire trajectory is given; its
    interpolated phi (zero before gelation) is used then.
    """
    if phi_of_t is None:
        if v_traj is None:
            raise ValueError("need phi_of_t or v_traj")
        phi_of_t = v_traj.phi_at
    n = int(round(t / ds))
    if abs(n * ds - t) > 1e-12 * max(t, 1.0):
        raise ValueError("t must be a multiple of ds")
    s = np.linspace(0.0, t, n + 1)
    psi = np.empty(n + 1)
    x = np.empty(n + 1)
    psi[n] = 1.0
    x[n] = 1.0

    def deriv(si, p, xi):
        return p * (1.0 - xi), p * float(phi_of_t(si))

    h = ds
    # endpoint stages are nudged into the interior of the step so that a
    # discontinuity of phi sitting exactly on a grid point (the gelation
    # time) is sampled one-sidedly and consistently for every terminal t
    eps = 1e-9 * h
    for i in range(n, 0, -1):
        si = s[i]
        p, xi = psi[i], x[i]
        k1p, k1x = deriv(si - eps, p, xi)
        k2p, k2x = deriv(si - 0.5 * h, p - 0.5 * h * k1p, xi - 0.5 * h * k1x)
        k3p, k3x = deriv(si - 0.5 * h, p - 0.5 * h * k2p, xi - 0.5 * h * k2x)
        k4p, k4x = deriv(si - h + eps, p - h * k3p, xi - h * k3x)
        psi[i - 1] = p - (h / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
        x[i - 1] = xi - (h / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
        if not (PSI_TOL < psi[i - 1] <= 1.0 + PSI_TOL):
            raise PsiRangeError("psi=%.6g left (0,1] at s=%.4f"
                                % (psi[i - 1], s[i - 1]))
    return CharCurveSolution(t=t, s_grid=s, psi=psi, x=np.clip(x, 0.0, 1.0))


def _zeta(s: float, terms: int = 48) -> float:
    """Riemann zeta by the globally convergent Hasse series (s != 1)."""
    total = 0.0
    for n in range(terms):
        inner = 0.0
        sign = 1.0
        binom = 1.0
        for k in range(n + 1):
            inner += sign * binom * (k + 1.0) ** (-s)
            sign = -sign
            binom = binom * (n - k) / (k + 1.0)
        total += inner / 2.0 ** (n + 1)
    return total / (1.0 - 2.0 ** (1.0 - s))


_ZETA_32_LADDER = [_zeta(1.5 - n) for n in range(9)]


def _li_three_halves(z: float) -> float:
    """Polylogarithm Li_{3/2}(z) for z in [0, 1]."""
    if z <= 0.0:
        return 0.0
    if z >= 1.0:
        return _ZETA_32_LADDER[0]
    if z <= 0.9:
        k = np.arange(1, 600, dtype=float)
        return float(np.sum(np.power(z, k) * k ** -1.5))
    # expansion around z = 1: Li_{3/2}(e^mu) = Gamma(-1/2) (-mu)^{1/2}
    #   + sum_n zeta(3/2 - n) mu^n / n!
    mu = math.log(z)
    total = -2.0 * math.sqrt(math.pi) * math.sqrt(-mu)
    term = 1.0
    for n, zc in enumerate(_ZETA_32_LADDER):
        total += zc * term
        term *= mu / (n + 1.0)
    return total


def generating_function_value(state, z: float) -> float:
    """X_s(z) = sum_k v_k(s) z^k from a truncated cluster density state.

    The mass beyond the truncation is spread over k > K with the
    k^{-3/2} critical tail shape (summed exactly through Li_{3/2}) and
    scaled to the bookkept tail mass, so X_s(1) = 1 exactly.
    """
    v = state.export_v()
    K = v.size
    z = float(z)
    kk = np.arange(1, K + 1, dtype=float)
    zk = np.power(z, kk)
    total = float(v @ zk)
    if state.tail_mass > 0.0 and z > 0.0:
        shape_head = kk ** -1.5
        num = _li_three_halves(z) - float(shape_head @ zk)
        den = _ZETA_32_LADDER[0] - float(shape_head.sum())
        if den > 0:
            total += state.tail_mass * num / den
    return total


def consistency_error(sol: CharCurveSolution, v_traj) -> float:
    """max_s |x(s) - X_s(psi(s))| over the saved trajectory states."""
    err = 0.0
    for st in v_traj.states:
        if st.t > sol.t + 1e-12:
            continue
        xs = generating_function_value(st, float(sol.psi_at(st.t)))
        err = max(err, abs(xs - float(sol.x_at(st.t))))
    return err


@dataclass(frozen=True)
class ReconstructedMeasure:
    measure: DiscreteMeasure
    mass_defect: float
    burnt_mass: float


def reconstruct_pi(pi0: DiscreteMeasure, sol: CharCurveSolution,
                   gf: GenFn) -> ReconstructedMeasure:
    """Age distribution at time t from the characteristic curves.

    Vertices burnt at time s in (0, t] survive to t with probability
    psi_t(s) and carry age t - s; vertices never burnt carry their
    initial age tilted by the no-explosion probability f(a, psi_t(0))
    and shifted by t.
    """
    t = sol.t
    s, psi = sol.s_grid, sol.psi
    phi_vals = np.empty_like(s)
    # recover phi on the grid from the x equation: x' = psi phi
    phi_vals[1:-1] = (sol.x[2:] - sol.x[:-2]) / (s[2] - s[0]) / psi[1:-1]
    phi_vals[0] = phi_vals[1] if s.size > 2 else 0.0
    phi_vals[-1] = phi_vals[-2] if s.size > 2 else 0.0
    phi_vals = np.maximum(phi_vals, 0.0)
    integrand = phi_vals * psi
    # trapezoid weights on the s grid -> atoms at age t - s
    w = np.empty_like(s)
    w[0] = w[-1] = 0.5 * (s[1] - s[0])
    w[1:-1] = s[1] - s[0]
    burnt_w = integrand * w
    burnt_pos = t - s
    f0 = gf.grid_values(sol.psi_at_zero).real
    surv_pos = gf.pi.positions + t
    surv_w = gf.pi.weights * f0
    pos = np.concatenate([burnt_pos, surv_pos])
    wts = np.concatenate([burnt_w, surv_w])
    keep = wts > 0.0
    pos, wts = pos[keep], wts[keep]
    total = float(wts.sum())
    defect = abs(total - 1.0)
    if defect > MASS_DEFECT_MAX:
        raise MassDefectError("reconstructed mass %.6f off by %.2e"
                              % (total, defect))
    return ReconstructedMeasure(
        measure=DiscreteMeasure(pos, wts / total),
        mass_defect=defect,
        burnt_mass=float(burnt_w.sum()) / total,
    )


@dataclass(frozen=True)
class ThetaReconstruction:
    """theta_t sampled at the ages carried by the reconstructed measure."""

    t: float
    delta: float
    ages: np.ndarray
    values: np.ndarray

    def theta_at(self, a) -> np.ndarray:
        return np.interp(np.asarray(a, dtype=float), self.ages, self.values)

    def normalization(self, pi_t: DiscreteMeasure) -> float:
        return float(self.theta_at(pi_t.positions) @ pi_t.weights)


def reconstruct_theta(sol_minus: CharCurveSolution,
                      sol_plus: CharCurveSolution,
                      phi_t: float, gf: GenFn) -> ThetaReconstruction:
    """theta_t from a central difference of two backward solves.

    sol_minus and sol_plus are the curves at terminal times t - delta
    and t + delta.  For ages a < t, theta_t(a) =
    -(1/phi) d/dt log psi_t(t - a); for the surviving initial ages,
    theta_t(t + a0) = -(1/phi) d/dt log f(a0, psi_t(0)).
    """
    if phi_t < PHI_MIN:
        raise ValueError("phi below %g: theta reconstruction needs t past "
                         "gelation" % PHI_MIN)
    t = 0.5 * (sol_minus.t + sol_plus.t)
    delta = 0.5 * (sol_plus.t - sol_minus.t)
    if delta <= 0:
        raise ValueError("solutions must bracket t")
    s = sol_minus.s_grid
    dlog = np.log(sol_plus.psi_at(s)) - np.log(sol_minus.psi_at(s))
    theta_burnt = -dlog / (2.0 * delta * phi_t)
    ages_burnt = t - s
    fm = np.maximum(gf.grid_values(sol_minus.psi_at_zero).real, 1e-300)
    fp = np.maximum(gf.grid_values(sol_plus.psi_at_zero).real, 1e-300)
    theta_surv = -(np.log(fp) - np.log(fm)) / (2.0 * delta * phi_t)
    ages_surv = gf.pi.positions + t
    ages = np.concatenate([ages_burnt[::-1], ages_surv])
    vals = np.concatenate([theta_burnt[::-1], theta_surv])
    order = np.argsort(ages, kind="stable")
    return ThetaReconstruction(t=t, delta=delta, ages=ages[order],
                               values=vals[order])


def reconstruct_theta_at(t: float, phi_of_t, phi_t: float, gf: GenFn,
                         delta: float = DEFAULT_DELTA,
                         ds: float = DEFAULT_DS,
                         richardson: bool = True) -> ThetaReconstruction:
    """Convenience wrapper: run the bracketing solves and difference them.

    With richardson=True the delta and delta/2 estimates are combined as
    (4 T_{d/2} - T_d) / 3, removing the leading O(delta^2) error.
    """
    def pair(d):
        # keep the terminal times on the step grid
        ds_eff = min(ds, d)
        lo = solve_backward(phi_of_t, t - d, ds_eff)
        hi = solve_backward(phi_of_t, t + d, ds_eff)
        return reconstruct_theta(lo, hi, phi_t, gf)

    coarse = pair(delta)
    if not richardson:
        return coarse
    fine = pair(delta / 2.0)
    vals = (4.0 * fine.theta_at(coarse.ages) - coarse.values) / 3.0
    return ThetaReconstruction(t=t, delta=delta / 2.0, ages=coarse.ages,
                               values=vals)
