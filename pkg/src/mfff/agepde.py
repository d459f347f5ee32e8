"""Forward particle solver for the age differential equation.

The age distribution pi_t is transported at unit speed, thinned by the
age-dependent burning rate phi(t) theta_t(s), and the removed mass is
reinjected as a new atom at age 0.  While pi_t is subcritical the
dynamics is pure transport (phi = 0); once the leading eigenvalue of the
min-kernel operator reaches 1 the burn term switches on and holds the
measure on the critical manifold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .measure import DiscreteMeasure, levy_distance
from .spectral import (
    Criticality,
    EigenPair,
    OperatorIsZeroError,
    classify,
    leading_eigenpair,
    phi_from_theta,
)

DT_MAX = 0.01
DEFAULT_DT = 0.002
RENORM_TOL = 1e-9
PRUNE_EVERY = 100
PRUNE_WEIGHT = 1e-12


class AgeSupercriticalError(RuntimeError):
    """The evolved measure left the (sub)critical region."""


@dataclass(frozen=True)
class StepResult:
    measure: DiscreteMeasure
    eigenpair: Optional[EigenPair]
    phi: float
    tag: Criticality
    defect: float
    injected: float


def _classify_or_zero(pi: DiscreteMeasure,
                      warm_start: np.ndarray | None = None):
    """(eigenpair or None, tag); the zero operator counts as subcritical."""
    try:
        ep = leading_eigenpair(pi, warm_start=warm_start)
    except OperatorIsZeroError:
        return None, Criticality.SUBCRITICAL
    return ep, classify(pi, eigenpair=ep).tag


def step(pi: DiscreteMeasure, dt: float,
         _warm: np.ndarray | None = None) -> StepResult:
    """One transport/burn/reinject step of size dt."""
    if dt <= 0 or dt > DT_MAX:
        raise ValueError("need 0 < dt <= %g" % DT_MAX)
    ep, tag = _classify_or_zero(pi, _warm)
    if tag == Criticality.SUBCRITICAL:
        return StepResult(measure=pi.translate(dt), eigenpair=ep, phi=0.0,
                          tag=tag, defect=0.0, injected=0.0)
    phi = phi_from_theta(pi, ep.theta)
    surv = pi.weights * np.exp(-phi * ep.theta * dt)
    removed = float(pi.weights.sum() - surv.sum())
    pos = np.concatenate([[0.0], pi.positions + dt])
    wts = np.concatenate([[removed], surv])
    total = float(wts.sum())
    defect = abs(total - 1.0)
    if defect > RENORM_TOL:
        raise RuntimeError("renormalization defect %.2e exceeds %g"
                           % (defect, RENORM_TOL))
    return StepResult(measure=DiscreteMeasure(pos, wts / total),
                      eigenpair=ep, phi=phi, tag=tag, defect=defect,
                      injected=removed / total)


def _prune(pi: DiscreteMeasure) -> DiscreteMeasure:
    keep = pi.weights >= PRUNE_WEIGHT
    if np.all(keep):
        return pi
    w = pi.weights[keep]
    return DiscreteMeasure(pi.positions[keep], w / w.sum())


@dataclass
class AgeTrajectory:
    dt: float
    times: List[float] = field(default_factory=list)
    measures: List[DiscreteMeasure] = field(default_factory=list)
    eigenpairs: List[Optional[EigenPair]] = field(default_factory=list)
    phis: List[float] = field(default_factory=list)
    lambdas: List[float] = field(default_factory=list)
    tags: List[Criticality] = field(default_factory=list)
    defects: List[float] = field(default_factory=list)

    def measure_at(self, t: float) -> DiscreteMeasure:
        i = int(np.argmin(np.abs(np.asarray(self.times) - t)))
        return self.measures[i]

    def phi_at(self, t) -> np.ndarray:
        return np.interp(np.asarray(t, dtype=float), self.times, self.phis)

    def phi_integral(self, a: float, b: float) -> float:
        """Trapezoid integral of phi over [a, b] on the step grid."""
        ts = np.asarray(self.times)
        grid = np.linspace(a, b, max(int(round((b - a) / self.dt)), 1) + 1)
        return float(np.trapezoid(np.interp(grid, ts, self.phis), grid))

    @property
    def switch_time(self) -> Optional[float]:
        for t, tag in zip(self.times, self.tags):
            if tag != Criticality.SUBCRITICAL:
                return t
        return None

    def to_csv(self, path, stride: int = 1) -> None:
        """Summary rows (t, lambda, phi, mean_age, levy_to_previous)."""
        with open(path, "w", newline="") as fh:
            fh.write("t,lambda,phi,mean_age,levy_to_previous\n")
            prev = None
            for i in range(0, len(self.times), stride):
                m = self.measures[i]
                lev = levy_distance(m, prev) if prev is not None else 0.0
                prev = m
                fh.write(",".join("%.17g" % x for x in (
                    self.times[i], self.lambdas[i], self.phis[i],
                    m.moment(1), lev)) + "\n")


def evolve(pi0: DiscreteMeasure, T: float,
           dt: float = DEFAULT_DT) -> AgeTrajectory:
    """Evolve pi0 over [0, T] recording every step.

    Aborts with AgeSupercriticalError if the classification ever turns
    supercritical (the limit dynamics keeps critical measures critical).
    The previous eigenvector warm-starts each power iteration.
    """
    if not math.isfinite(pi0.moment(1)):
        raise ValueError("initial measure needs a finite mean age")
    traj = AgeTrajectory(dt=dt)
    pi = pi0
    t = 0.0
    warm = None
    nsteps = int(round(T / dt))
    for i in range(nsteps + 1):
        res = step(pi, dt, _warm=warm) if i < nsteps else None
        ep, tag = ((res.eigenpair, res.tag) if res is not None
                   else _classify_or_zero(pi, warm))
        if tag == Criticality.SUPERCRITICAL:
            raise AgeSupercriticalError("lambda=%.6f at t=%.4f"
                                        % (ep.lam, t))
        traj.times.append(t)
        traj.measures.append(pi)
        traj.eigenpairs.append(ep)
        traj.lambdas.append(ep.lam if ep is not None else 0.0)
        traj.tags.append(tag)
        if res is None:
            traj.phis.append(phi_from_theta(pi, ep.theta)
                             if tag == Criticality.CRITICAL else 0.0)
            traj.defects.append(0.0)
            break
        traj.phis.append(res.phi)
        traj.defects.append(res.defect)
        pi = res.measure
        if (i + 1) % PRUNE_EVERY == 0:
            pi = _prune(pi)
        # warm start aligned with the new sorted atom grid (new atom at 0)
        if res.eigenpair is not None and pi.natoms == res.measure.natoms:
            theta_ext = np.concatenate([[0.0], res.eigenpair.theta])
            warm = np.sqrt(pi.weights) * theta_ext[: pi.natoms] \
                if theta_ext.size == pi.natoms else None
        else:
            warm = None
        t = (i + 1) * dt
    return traj


def _bump(x: np.ndarray, c: float, h: float) -> Tuple[np.ndarray, np.ndarray]:
    """Mollifier bump f (peak 1 at c, support (c-h, c+h)) and f'."""
    u = (np.asarray(x, dtype=float) - c) / h
    inside = np.abs(u) < 1.0
    us = np.where(inside, u, 0.0)
    f = np.where(inside, np.exp(1.0 - 1.0 / (1.0 - us ** 2)), 0.0)
    fp = np.where(inside, f * (-2.0 * us / (1.0 - us ** 2) ** 2) / h, 0.0)
    return f, fp


def dyadic_test_family(x_max: float, levels: Sequence[int] = (0, 1, 2)):
    """Bumps centered on dyadic grids j 2^{-l} covering [0, x_max]."""
    fams = []
    for lev in levels:
        h = 2.0 ** (-lev)
        n = int(math.ceil(x_max / h)) + 1
        for j in range(n + 1):
            fams.append((j * h, h))
    return fams


def stationarity_residual(pi: DiscreteMeasure,
                          test_fns=None) -> float:
    """max_f |int f' dpi - phi int f theta dpi + phi f(0)|.

    The expression is the time derivative of int f dpi under the age
    dynamics; it vanishes for every test function exactly at the
    stationary solution.
    """
    ep = leading_eigenpair(pi)
    phi = phi_from_theta(pi, ep.theta)
    x, w = pi.positions, pi.weights
    if test_fns is None:
        test_fns = dyadic_test_family(float(x.max()) if x.size else 1.0)
    worst = 0.0
    for c, h in test_fns:
        f, fp = _bump(x, c, h)
        f0, _ = _bump(np.array([0.0]), c, h)
        resid = float(fp @ w) - phi * float((f * ep.theta) @ w) \
            + phi * float(f0[0])
        worst = max(worst, abs(resid))
    return worst
