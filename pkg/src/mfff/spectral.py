"""The min-kernel integral operator on L^2(pi).

For a discrete measure pi with atoms (s_i, w_i) the operator acts as
(L f)(s) = sum_j f(s_j) min(s, s_j) w_j.  Its leading eigenpair (lambda,
theta) decides whether the associated aged branching tree is subcritical,
critical or supercritical, and theta feeds the burning-rate functional
phi = 1 / integral(theta^3 dpi).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .measure import DiscreteMeasure

DEFAULT_BAND = 5e-3
POWER_TOL = 1e-12
POWER_CAP = 100_000


class OperatorIsZeroError(ValueError):
    pass


class CertificateMismatchError(RuntimeError):
    """A cheap criticality certificate disagrees with the eigenvalue verdict."""


def kernel_matrix(pi: DiscreteMeasure) -> np.ndarray:
    """Dense matrix K[i,j] = min(s_i, s_j) w_j acting on grid functions."""
    s = pi.positions
    return np.minimum.outer(s, s) * pi.weights[None, :]


@dataclass(frozen=True)
class KernelOperator:
    measure: DiscreteMeasure
    matrix: np.ndarray

    @staticmethod
    def build(pi: DiscreteMeasure) -> "KernelOperator":
        return KernelOperator(pi, kernel_matrix(pi))

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(f, dtype=float)

    def apply_at(self, s, f: np.ndarray) -> np.ndarray:
        """Evaluate (L f)(s) at off-grid points s."""
        x, w = self.measure.positions, self.measure.weights
        return np.minimum(np.atleast_1d(np.asarray(s, float))[:, None], x[None, :]) @ (w * f)


def intensity_mass(pi: DiscreteMeasure, s) -> np.ndarray:
    """m_s = integral of min(s, u) dpi(u), the offspring mean of an age-s vertex."""
    x, w = pi.positions, pi.weights
    s = np.asarray(s, dtype=float)
    return np.minimum(s[..., None], x) @ w


def hs_norm(pi: DiscreteMeasure) -> float:
    """Hilbert-Schmidt norm sqrt(sum_ij min(x_i,x_j)^2 w_i w_j)."""
    s, w = pi.positions, pi.weights
    m = np.minimum.outer(s, s)
    return math.sqrt(float(w @ (m * m) @ w))


@dataclass(frozen=True)
class EigenPair:
    """Leading eigenpair of the min-kernel operator.

    theta is tabulated on the atom grid of the base measure and normalized
    to integrate to 1 against it.
    """

    lam: float
    theta: np.ndarray
    theta_at_infinity: float
    second_eigenvalue: float
    residual: float

    def theta_at(self, pi: DiscreteMeasure, s) -> np.ndarray:
        """Evaluate theta off-grid via theta(s) = (L theta)(s) / lambda."""
        op = KernelOperator.build(pi)
        return op.apply_at(s, self.theta) / self.lam

    def to_csv(self, pi: DiscreteMeasure, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("position,theta\n")
            for x, th in zip(pi.positions, self.theta):
                fh.write("%.17g,%.17g\n" % (x, th))

    def summary(self) -> dict:
        return {
            "lambda": self.lam,
            "theta_infinity": self.theta_at_infinity,
            "second_eigenvalue": self.second_eigenvalue,
            "residual": self.residual,
        }


class Criticality(Enum):
    SUBCRITICAL = "Subcritical"
    CRITICAL = "Critical"
    SUPERCRITICAL = "Supercritical"


@dataclass(frozen=True)
class CriticalityClass:
    tag: Criticality
    lam: float
    band: float


def _power_iterate(M: np.ndarray, v0: np.ndarray, tol: float, cap: int = POWER_CAP):
    n0 = np.linalg.norm(v0)
    if n0 == 0.0:
        return 0.0, v0
    v = v0 / n0
    lam = 0.0
    for _ in range(cap):
        y = M @ v
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0, v
        lam_new = float(v @ y)
        v = y / ny
        if abs(lam_new - lam) < tol:
            return lam_new, v
        lam = lam_new
    return lam, v


def leading_eigenpair(pi: DiscreteMeasure, tol: float = POWER_TOL,
                      warm_start: np.ndarray | None = None) -> EigenPair:
    """Leading eigenvalue and eigenfunction by power iteration.

    Works on the symmetrized matrix sqrt(w_i) min(s_i,s_j) sqrt(w_j); the
    eigenvector is de-symmetrized, made nonnegative and normalized so that
    integral(theta dpi) = 1.  One deflation step witnesses the spectral gap.
    """
    s, w = pi.positions, pi.weights
    sqw = np.sqrt(w)
    M = sqw[:, None] * np.minimum.outer(s, s) * sqw[None, :]
    if not np.any(M > 0):
        raise OperatorIsZeroError("operator is zero (pi = delta_0)")
    if warm_start is not None and np.linalg.norm(warm_start) > 0:
        v0 = np.asarray(warm_start, dtype=float)
    else:
        # positive start vector overlaps the (positive) principal eigenvector
        v0 = sqw * np.maximum(s, np.max(s) * 1e-3)
        if np.linalg.norm(v0) == 0:
            v0 = sqw.copy()
    lam, v = _power_iterate(M, v0, tol)
    v = np.abs(v)
    resid = float(np.linalg.norm(M @ v - lam * v) / np.linalg.norm(v))
    # deflate and estimate the runner-up eigenvalue
    if v.size > 1:
        M2 = M - lam * np.outer(v, v)
        start2 = np.cos(np.arange(v.size) * 2.417) + 0.5  # fixed, not random
        start2 -= v * (v @ start2)
        if np.linalg.norm(start2) < 1e-300:
            start2 = np.roll(v, 1)
            start2 -= v * (v @ start2)
        lam2, _ = _power_iterate(M2, start2, max(tol, 1e-10), cap=10_000)
    else:
        lam2 = 0.0
    # de-symmetrize: theta_i = v_i / sqrt(w_i) on atoms with mass
    theta = np.zeros_like(v)
    nz = sqw > 0
    theta[nz] = v[nz] / sqw[nz]
    norm = float(theta @ w)
    if norm <= 0:
        raise RuntimeError("eigenfunction has nonpositive mass")
    theta = theta / norm
    theta_inf = float((theta * s) @ w)
    return EigenPair(lam=lam, theta=theta, theta_at_infinity=theta_inf,
                     second_eigenvalue=lam2, residual=resid)


def classify(pi: DiscreteMeasure, band: float = DEFAULT_BAND,
             eigenpair: EigenPair | None = None) -> CriticalityClass:
    """Trichotomy verdict from the leading eigenvalue, with cheap certificates.

    Certificates: mean(pi) < 1 forces subcritical; an atom tail with
    pi([x, inf)) > 1/x for some x >= 1 forces supercritical.  Disagreement
    with the eigenvalue verdict (outside the band) raises.
    """
    ep = eigenpair if eigenpair is not None else leading_eigenpair(pi)
    lam = ep.lam
    if lam < 1.0 - band:
        tag = Criticality.SUBCRITICAL
    elif lam > 1.0 + band:
        tag = Criticality.SUPERCRITICAL
    else:
        tag = Criticality.CRITICAL
    mean = pi.moment(1)
    if mean < 1.0 and tag == Criticality.SUPERCRITICAL:
        raise CertificateMismatchError(
            "mean %.6g < 1 but eigenvalue %.6g supercritical" % (mean, lam))
    # tail certificate: pi([x, inf)) * x > 1 at some atom x >= 1
    x, w = pi.positions, pi.weights
    tail = np.cumsum(w[::-1])[::-1]
    super_cert = bool(np.any((x >= 1.0) & (tail * x > 1.0 + 1e-12)))
    if super_cert and tag == Criticality.SUBCRITICAL:
        raise CertificateMismatchError(
            "tail certificate supercritical but eigenvalue %.6g subcritical" % lam)
    return CriticalityClass(tag=tag, lam=lam, band=band)


def phi_from_theta(pi: DiscreteMeasure, theta: np.ndarray) -> float:
    """Burning rate phi = 1 / integral(theta^3 dpi); always <= 1 by Jensen."""
    cube = float((np.asarray(theta, float) ** 3) @ pi.weights)
    if cube <= 0:
        raise ValueError("integral of theta^3 is zero")
    return 1.0 / cube
