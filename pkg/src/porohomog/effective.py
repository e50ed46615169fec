"""Closed-form effective solution for the canonical infiltration case.

Free fluid above the interface (0 < x2 < 1) with v = (0, -1) on top, a
porous layer below (-1 < x2 < 0) drained with normal velocity -1. The
effective Stokes flow above and the Darcy pressure below are

    u_eff = ((C1bl / K22) (1 - x2), -1),   p_eff = 0,
    P_D = x2 / K22,                        u_D = -K grad P_D = (-K12 / K22, -1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .errors import SpecError


@dataclass(frozen=True)
class EffectiveSolution:
    K: np.ndarray
    C1bl: float

    @property
    def K22(self):
        return float(self.K[1, 1])

    @property
    def K12(self):
        return float(self.K[0, 1])

    @property
    def slip(self):
        """u_eff_1 on the interface."""
        return self.C1bl / self.K22

    @property
    def dPD_dx2(self):
        return 1.0 / self.K22

    def u_eff(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.stack([self.slip * (1.0 - x[:, 1]), -np.ones(len(x))], axis=1)

    def grad_u_eff(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        g = np.zeros((len(x), 2, 2))
        g[:, 0, 1] = -self.slip
        return g

    def p_eff(self, x):
        return np.zeros(len(np.atleast_2d(x)))

    def P_D(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x[:, 1] / self.K22

    def grad_P_D(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.tile([0.0, 1.0 / self.K22], (len(x), 1))

    def u_D(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return -(self.grad_P_D(x) @ self.K.T)

    def tangential_jump(self):
        """u_eff_1 - u_D_1 on the interface."""
        return self.slip + self.K12 / self.K22


def build_effective(K, C1bl) -> EffectiveSolution:
    K = np.array(K, dtype=float)
    if K.shape != (2, 2):
        raise SpecError("K must be a 2 x 2 matrix")
    if not K[1, 1] > 0:
        raise SpecError(f"K22 = {K[1, 1]} must be positive")
    if np.any(np.linalg.eigvalsh(0.5 * (K + K.T)) <= 0):
        raise SpecError("K must be positive definite")
    return EffectiveSolution(K, float(C1bl))


def _line_integral(f, L):
    if callable(f):
        return quad(lambda s: float(f(s)), 0.0, L, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
    return float(f) * L


def verify_compatibility(v_D, g, L=1.0, tol=1e-12):
    """U_B from L U_B = int_0^L g = int_0^L v_D . e2.

    ``v_D`` is a pair (v1, v2) and ``g`` a number; entries may be callables
    of x1. Raises SpecError when the two integrals differ by more than tol.
    """
    v2 = v_D[1]
    flux_g = _line_integral(g, L)
    flux_v = _line_integral(v2, L)
    if abs(flux_g - flux_v) > tol:
        raise SpecError(f"incompatible boundary data: int g = {flux_g:.17g}, int v_D.e2 = {flux_v:.17g}")
    return flux_g / L
