"""Central finite-difference oracles for cross-checking the closed forms.

These deliberately rebuild every derived quantity from scratch out of scalar
evaluations (of the metric, of log J, of log k), so a formula error in the
closed-form chain cannot cancel against itself here.  Default steps follow
the usual truncation/roundoff balance at double precision: 1e-4 for first
derivatives, 1e-3 for second derivatives.
"""

from __future__ import annotations

import numpy as np

from . import geometry

H_FIRST = 1e-4
H_SECOND = 1e-3


def grad_fd(func, x, h: float = H_FIRST) -> np.ndarray:
    """Coordinate partials of a scalar field by central differences."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (func(x + e) - func(x - e)) / (2 * h)
    return out


def hess_fd(func, x, h: float = H_SECOND) -> np.ndarray:
    """Matrix of second coordinate partials by central differences."""
    x = np.asarray(x, dtype=float)
    n = x.size
    out = np.empty((n, n))
    f0 = func(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        out[i, i] = (func(x + ei) - 2 * f0 + func(x - ei)) / h**2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h
            out[i, j] = out[j, i] = (
                func(x + ei + ej) - func(x + ei - ej)
                - func(x - ei + ej) + func(x - ei - ej)
            ) / (4 * h**2)
    return out


def metric_partials_fd(geom, x, h: float = H_FIRST) -> np.ndarray:
    """d_k g_ij by central differences of the closed-form metric."""
    x = np.asarray(x, dtype=float)
    n = x.size
    out = np.empty((n, n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        out[k] = (geometry.metric_at(geom, x + e)
                  - geometry.metric_at(geom, x - e)) / (2 * h)
    return out


def christoffel_fd(geom, x, h: float = H_FIRST) -> np.ndarray:
    """Gamma^k_{ij} from finite-difference metric derivatives."""
    dg = metric_partials_fd(geom, x, h)
    ginv = np.linalg.inv(geometry.metric_at(geom, x))
    first = 0.5 * (np.einsum('ikj->kij', dg) + np.einsum('jki->kij', dg)
                   - np.einsum('kij->kij', dg))
    return np.einsum('lk,kij->lij', ginv, first)


def ricci_fd(geom, x, h: float = H_SECOND) -> np.ndarray:
    """Ric# by contracting the curvature tensor built from christoffel_at.

    Ric_jk = d_i Gamma^i_{jk} - d_j Gamma^i_{ik} + Gamma^i_{im} Gamma^m_{jk}
             - Gamma^i_{jm} Gamma^m_{ik}, then raised with g^{-1}.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    dgamma = np.empty((n, n, n, n))     # [derivative axis, k, i, j]
    for a in range(n):
        e = np.zeros(n)
        e[a] = h
        dgamma[a] = (geometry.christoffel_at(geom, x + e)
                     - geometry.christoffel_at(geom, x - e)) / (2 * h)
    gam = geometry.christoffel_at(geom, x)
    ric = (np.einsum('iijk->jk', dgamma) - np.einsum('jiik->jk', dgamma)
           + np.einsum('iim,mjk->jk', gam, gam)
           - np.einsum('ijm,mik->jk', gam, gam))
    return geometry.metric_inverse_at(geom, x) @ ric


def laplace_beltrami_fd(geom, func, x, h: float = H_SECOND) -> float:
    """Lap f = g^{ij} (d^2_ij f - Gamma^k_ij d_k f) with FD partials and
    FD Christoffels, so the oracle only consumes the closed-form metric."""
    x = np.asarray(x, dtype=float)
    ginv = np.linalg.inv(geometry.metric_at(geom, x))
    hess = hess_fd(func, x, h)
    grad = grad_fd(func, x)
    gam = christoffel_fd(geom, x)
    return float(np.einsum('ij,ij->', ginv, hess)
                 - np.einsum('ij,kij,k->', ginv, gam, grad))


def phi_fd(geom, x) -> float:
    """The potential as 1/2 J^{1/2} Lap(J^{-1/2}), all by finite differences."""
    def j_inv_sqrt(y):
        n = geom.dim
        q = float(geom.profile.q(np.linalg.norm(y)))
        return q ** (-0.5 * (n - 1))

    lap = laplace_beltrami_fd(geom, j_inv_sqrt, x)
    return 0.5 * lap / j_inv_sqrt(np.asarray(x, dtype=float))


def dtime_log_k_fd(geom, tau: float, x, h: float = 1e-5) -> float:
    """Time derivative of log k_{1-s} in s, i.e. minus the tau-derivative.

    The step scales with tau: the third tau-derivative grows like r^2/tau^4,
    so an absolute step loses the truncation budget at small tau.
    """
    ht = h * tau
    up = geometry.log_k_data(geom, tau + ht, x).log_k
    dn = geometry.log_k_data(geom, tau - ht, x).log_k
    return -(up - dn) / (2 * ht)
