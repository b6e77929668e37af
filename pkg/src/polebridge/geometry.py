"""Closed-form differential geometry of rotationally symmetric manifolds with a pole.

Everything is expressed in the global normal chart at the pole: a point is an
n-vector x of normal coordinates, the pole is the origin, and the radial
distance is r(x) = |x|.  For a warping function f (with f(0)=0, f'(0)=1) the
metric in polar form is dr^2 + f(r)^2 dtheta^2, which in the Cartesian chart
reads

    g_ij = phi(r) delta_ij + psi(r) x_i x_j,
    phi = (f/r)^2,  psi = (1 - phi)/r^2,

so that the radial direction has unit length and tangential directions are
stretched by f(r)/r.  All derived quantities (Christoffel symbols, Ricci
curvature, the exponential-map Jacobian J = (f/r)^(n-1), the kernel
k_tau = (2 pi tau)^(-n/2) exp(-r^2/(2 tau)) J^(-1/2) and the potential
Phi = 1/8 |grad log J|^2 - 1/4 Lap(log J)) are radial and reduce to a small
chain of logarithmic derivatives of q(r) = f(r)/r, which each profile below
evaluates in a numerically stable way down to r = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_POLE = 1e-8
"""Radial exclusion radius: Hessian-type quantities are undefined below it."""


class GeometryError(ValueError):
    """Invalid input to a geometry operation."""


class DegeneratePointError(GeometryError):
    """Operation requested at (or too close to) the pole where it is singular."""


def _as_radii(r):
    r = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r)) or np.any(r < 0):
        raise GeometryError("radii must be finite and nonnegative")
    return r


# ---------------------------------------------------------------------------
# Warping profiles
# ---------------------------------------------------------------------------

class WarpingProfile:
    """Radial warping function f and the derivative chain of q = f/r.

    Subclasses provide f, f', f'' and q, q', q'', q''' (all vectorized over
    arrays of radii and stable near r = 0), plus the metric coefficients
    psi = (1-q^2)/r^2 and its derivative, and the two sectional-curvature
    ratios f''/f and (1-f'^2)/f^2 in cancellation-free form.
    """

    name = "abstract"

    def f(self, r):
        raise NotImplementedError

    def fp(self, r):
        raise NotImplementedError

    def fpp(self, r):
        raise NotImplementedError

    def q(self, r):
        raise NotImplementedError

    def qp(self, r):
        raise NotImplementedError

    def qpp(self, r):
        raise NotImplementedError

    def qppp(self, r):
        raise NotImplementedError

    def psi(self, r):
        raise NotImplementedError

    def psip(self, r):
        raise NotImplementedError

    def fpp_over_f(self, r):
        raise NotImplementedError

    def one_minus_fp2_over_f2(self, r):
        raise NotImplementedError


class FlatProfile(WarpingProfile):
    """f(r) = r: Euclidean space."""

    name = "flat"

    def f(self, r):
        return _as_radii(r)

    def fp(self, r):
        return np.ones_like(_as_radii(r))

    def fpp(self, r):
        return np.zeros_like(_as_radii(r))

    def q(self, r):
        return np.ones_like(_as_radii(r))

    def qp(self, r):
        return np.zeros_like(_as_radii(r))

    qpp = qp
    qppp = qp
    psi = qp
    psip = qp
    fpp_over_f = qp
    one_minus_fp2_over_f2 = qp


def _sinhc_chain(u, order):
    """d^order/du^order of sinh(u)/u, series-switched below u = 0.1."""
    u = np.asarray(u, dtype=float)
    small = u < 0.1
    us = np.where(small, 0.0, u)  # keep the closed form free of 0/0
    u2 = u * u
    if order == 0:
        series = 1.0 + u2 / 6 + u2**2 / 120 + u2**3 / 5040
        with np.errstate(invalid="ignore", divide="ignore"):
            closed = np.sinh(us) / us
    elif order == 1:
        series = u * (1.0 / 3 + u2 / 30 + u2**2 / 840 + u2**3 / 45360)
        with np.errstate(invalid="ignore", divide="ignore"):
            closed = np.cosh(us) / us - np.sinh(us) / us**2
    elif order == 2:
        series = 1.0 / 3 + u2 / 10 + u2**2 / 168 + u2**3 / 6480
        with np.errstate(invalid="ignore", divide="ignore"):
            closed = np.sinh(us) / us - 2 * np.cosh(us) / us**2 + 2 * np.sinh(us) / us**3
    elif order == 3:
        series = u * (1.0 / 5 + u2 / 42 + u2**2 / 1080)
        with np.errstate(invalid="ignore", divide="ignore"):
            closed = (np.cosh(us) / us - 3 * np.sinh(us) / us**2
                      + 6 * np.cosh(us) / us**3 - 6 * np.sinh(us) / us**4)
    else:
        raise ValueError(order)
    return np.where(small, series, closed)


class HyperbolicProfile(WarpingProfile):
    """f(r) = sinh(c r)/c: constant sectional curvature -c^2."""

    name = "hyperbolic"

    def __init__(self, c: float):
        if not (np.isfinite(c) and c > 0):
            raise GeometryError("hyperbolic curvature scale c must be positive")
        self.c = float(c)

    def f(self, r):
        return np.sinh(self.c * _as_radii(r)) / self.c

    def fp(self, r):
        return np.cosh(self.c * _as_radii(r))

    def fpp(self, r):
        return self.c * np.sinh(self.c * _as_radii(r))

    def q(self, r):
        return _sinhc_chain(self.c * _as_radii(r), 0)

    def qp(self, r):
        return self.c * _sinhc_chain(self.c * _as_radii(r), 1)

    def qpp(self, r):
        return self.c**2 * _sinhc_chain(self.c * _as_radii(r), 2)

    def qppp(self, r):
        return self.c**3 * _sinhc_chain(self.c * _as_radii(r), 3)

    def psi(self, r):
        # (1 - sinhc(u)^2) * c^2 / u^2, series below u = 0.1
        u = self.c * _as_radii(r)
        small = u < 0.1
        us = np.where(small, 1.0, u)
        u2 = u * u
        series = -(1.0 / 3 + 2 * u2 / 45 + u2**2 / 315 + 2 * u2**3 / 14175)
        s = _sinhc_chain(us, 0)
        closed = (1.0 - s * s) / us**2
        return self.c**2 * np.where(small, series, closed)

    def psip(self, r):
        u = self.c * _as_radii(r)
        small = u < 0.1
        us = np.where(small, 1.0, u)
        u2 = u * u
        series = -u * (4.0 / 45 + 4 * u2 / 315 + 4 * u2**2 / 4725)
        s = _sinhc_chain(us, 0)
        s1 = _sinhc_chain(us, 1)
        closed = -2 * s * s1 / us**2 - 2 * (1.0 - s * s) / us**3
        return self.c**3 * np.where(small, series, closed)

    def fpp_over_f(self, r):
        _as_radii(r)
        return np.full(np.shape(np.asarray(r, dtype=float)), self.c**2)

    def one_minus_fp2_over_f2(self, r):
        # 1 - cosh^2 = -sinh^2 exactly
        _as_radii(r)
        return np.full(np.shape(np.asarray(r, dtype=float)), -self.c**2)


class CubicProfile(WarpingProfile):
    """f(r) = r + r^3/6: a pole metric with nonconstant negative curvature."""

    name = "cubic"

    def f(self, r):
        r = _as_radii(r)
        return r + r**3 / 6

    def fp(self, r):
        r = _as_radii(r)
        return 1.0 + r * r / 2

    def fpp(self, r):
        return _as_radii(r).copy()

    def q(self, r):
        r = _as_radii(r)
        return 1.0 + r * r / 6

    def qp(self, r):
        return _as_radii(r) / 3

    def qpp(self, r):
        return np.full(np.shape(_as_radii(r)), 1.0 / 3)

    def qppp(self, r):
        return np.zeros_like(_as_radii(r))

    def psi(self, r):
        # 1 - q^2 = -(r^2/3 + r^4/36)
        r = _as_radii(r)
        return -(1.0 / 3 + r * r / 36)

    def psip(self, r):
        return -_as_radii(r) / 18

    def fpp_over_f(self, r):
        r = _as_radii(r)
        return 1.0 / (1.0 + r * r / 6)

    def one_minus_fp2_over_f2(self, r):
        # (1 - fp^2)/f^2 = -(1 + r^2/4)/(1 + r^2/6)^2
        r = _as_radii(r)
        return -(1.0 + r * r / 4) / (1.0 + r * r / 6) ** 2


WARPED_PROFILES = {"cubic": CubicProfile, "flat": FlatProfile}
"""Named built-in profiles accepted for kind="warped"."""


# ---------------------------------------------------------------------------
# Geometry model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeometryModel:
    """Immutable descriptor of a rotationally symmetric manifold with a pole.

    dim=1 is normalized to the flat profile: in one dimension the warped
    metric is identically dr^2 and J = (f/r)^0 = 1, so every kind coincides
    with the Euclidean line.
    """

    dim: int
    kind: str                       # "euclidean" | "hyperbolic" | "warped"
    profile: WarpingProfile
    curvature_scale: float | None = None
    growth_constant_a: float = 0.0

    def __post_init__(self):
        if not (isinstance(self.dim, (int, np.integer)) and self.dim >= 1):
            raise GeometryError("dimension must be >= 1")
        if self.kind not in ("euclidean", "hyperbolic", "warped"):
            raise GeometryError(f"unknown geometry kind {self.kind!r}")
        if self.growth_constant_a < 0:
            raise GeometryError("growth constant a must be nonnegative")

    @property
    def is_flat(self) -> bool:
        return isinstance(self.profile, FlatProfile)


def euclidean(dim: int, a: float = 0.0) -> GeometryModel:
    return GeometryModel(dim=dim, kind="euclidean", profile=FlatProfile(),
                         growth_constant_a=a)


def hyperbolic(dim: int, c: float = 1.0, a: float = 0.0) -> GeometryModel:
    profile = FlatProfile() if dim == 1 else HyperbolicProfile(c)
    return GeometryModel(dim=dim, kind="hyperbolic", profile=profile,
                         curvature_scale=c, growth_constant_a=a)


def warped(dim: int, profile: str = "cubic", a: float = 0.0) -> GeometryModel:
    if profile not in WARPED_PROFILES:
        raise GeometryError(
            f"unknown warped profile {profile!r}; available: {sorted(WARPED_PROFILES)}")
    prof = FlatProfile() if dim == 1 else WARPED_PROFILES[profile]()
    return GeometryModel(dim=dim, kind="warped", profile=prof, growth_constant_a=a)


def from_config(kind: str, dim: int, c: float = 1.0, a: float = 0.0,
                profile: str = "cubic") -> GeometryModel:
    if kind == "euclidean":
        return euclidean(dim, a)
    if kind == "hyperbolic":
        return hyperbolic(dim, c, a)
    if kind == "warped":
        return warped(dim, profile, a)
    raise GeometryError(f"unknown geometry kind {kind!r}")


def check_point(geom: GeometryModel, x) -> np.ndarray:
    """Validate and return a chart point as a float n-vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (geom.dim,):
        raise GeometryError(f"chart point must have shape ({geom.dim},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise GeometryError("chart point has non-finite coordinates")
    return x


def radius(x) -> float:
    return float(np.linalg.norm(np.asarray(x, dtype=float)))


# ---------------------------------------------------------------------------
# Radial derivative chain shared by all scalar quantities
# ---------------------------------------------------------------------------

@dataclass
class RadialChain:
    """Vectorized radial functions of one geometry at given radii.

    w = (log q)' and its derivatives drive log J = (n-1) log q;
    w_over_r is w/r continued smoothly through r = 0.
    """

    r: np.ndarray
    q: np.ndarray
    w: np.ndarray
    wp: np.ndarray
    w_over_r: np.ndarray
    fp: np.ndarray
    fpq: np.ndarray        # f'(r) * q(r) = f'(r) f(r)/r
    phi: np.ndarray        # q^2, tangential metric coefficient
    psi: np.ndarray
    psip: np.ndarray
    wpp: np.ndarray | None = None


def radial_chain(geom: GeometryModel, r, with_wpp: bool = False) -> RadialChain:
    r = _as_radii(r)
    p = geom.profile
    q = p.q(r)
    qp = p.qp(r)
    qpp = p.qpp(r)
    w = qp / q
    wp = qpp / q - w * w
    # w/r -> w'(0) as r -> 0; below 1e-6 the two agree to O(r^2)
    small = r < 1e-6
    w_over_r = np.where(small, wp, np.divide(w, np.where(small, 1.0, r)))
    fp = p.fp(r)
    chain = RadialChain(r=r, q=q, w=w, wp=wp, w_over_r=w_over_r, fp=fp,
                        fpq=fp * q, phi=q * q, psi=p.psi(r), psip=p.psip(r))
    if with_wpp:
        chain.wpp = p.qppp(r) / q - qpp * qp / (q * q) - 2.0 * w * wp
    return chain


# ---------------------------------------------------------------------------
# Metric, Christoffel symbols, curvature
# ---------------------------------------------------------------------------

def metric_at(geom: GeometryModel, x) -> np.ndarray:
    """Chart components g_ij = phi I + psi x x^T; identity at the pole."""
    x = check_point(geom, x)
    r = radius(x)
    ch = radial_chain(geom, r)
    return float(ch.phi) * np.eye(geom.dim) + float(ch.psi) * np.outer(x, x)


def metric_inverse_at(geom: GeometryModel, x) -> np.ndarray:
    x = check_point(geom, x)
    r = radius(x)
    if r < EPS_POLE or geom.is_flat:
        return np.eye(geom.dim)
    phi = float(radial_chain(geom, r).phi)
    xhat = x / r
    proj = np.outer(xhat, xhat)
    return (np.eye(geom.dim) - proj) / phi + proj


def christoffel_at(geom: GeometryModel, x) -> np.ndarray:
    """Christoffel symbols Gamma^k_{ij} as an (n, n, n) array, index order [k, i, j].

    Below the pole-exclusion radius the smooth limit (all zeros) is returned.
    """
    x = check_point(geom, x)
    n = geom.dim
    r = radius(x)
    if geom.is_flat or r < EPS_POLE:
        return np.zeros((n, n, n))
    ch = radial_chain(geom, r)
    xhat = x / r
    eye = np.eye(n)
    phip = 2.0 * ch.phi * ch.w          # phi' = 2 q q'
    # first kind: Gamma_{k,ij}
    g1 = 0.5 * float(phip) * (np.einsum('i,kj->kij', xhat, eye)
                              + np.einsum('j,ki->kij', xhat, eye)
                              - np.einsum('k,ij->kij', xhat, eye))
    g1 += 0.5 * float(ch.psip) / r * np.einsum('i,j,k->kij', x, x, x)
    g1 += float(ch.psi) * np.einsum('ij,k->kij', eye, x)
    return np.einsum('lk,kij->lij', metric_inverse_at(geom, x), g1)


def ricci_sharp_at(geom: GeometryModel, x) -> np.ndarray:
    """Chart matrix of Ric# (the (1,1) Ricci tensor).

    Eigenvalues: -(n-1) f''/f on the radial line and
    -f''/f + (n-2)(1-f'^2)/f^2 on the tangential hyperplane.
    """
    x = check_point(geom, x)
    n = geom.dim
    if geom.is_flat:
        return np.zeros((n, n))
    r = radius(x)
    k_rad = float(geom.profile.fpp_over_f(r))
    k_tan = float(geom.profile.one_minus_fp2_over_f2(r))
    lam_rad = -(n - 1) * k_rad
    lam_tan = -k_rad + (n - 2) * k_tan
    if r < EPS_POLE:
        # smooth limit: both eigenvalues agree at the pole for model spaces
        return lam_rad * np.eye(n)
    xhat = x / r
    proj = np.outer(xhat, xhat)
    return lam_rad * proj + lam_tan * (np.eye(n) - proj)


# ---------------------------------------------------------------------------
# Radial distance, Jacobian, potential, kernel
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RadialData:
    r: float
    grad_r: np.ndarray
    hess_r: np.ndarray      # covariant Hessian, (f'f/r^2) * (tangential projector)


@dataclass(frozen=True)
class JacobianData:
    log_J: float
    grad_log_J: np.ndarray
    lap_log_J: float


@dataclass(frozen=True)
class PhiData:
    phi: float
    grad_phi: np.ndarray


@dataclass(frozen=True)
class LogKData:
    log_k: float
    grad_log_k: np.ndarray
    hess_log_k: np.ndarray
    dtime_log_k: float


def radial_data(geom: GeometryModel, x) -> RadialData:
    x = check_point(geom, x)
    r = radius(x)
    if r < EPS_POLE:
        raise DegeneratePointError("radial Hessian is undefined at the pole")
    xhat = x / r
    ch = radial_chain(geom, r)
    proj_tan = np.eye(geom.dim) - np.outer(xhat, xhat)
    hess = float(ch.fpq) / r * proj_tan        # f'f/r^2 = (f' q)/r
    return RadialData(r=r, grad_r=xhat, hess_r=hess)


def jacobian_data(geom: GeometryModel, x) -> JacobianData:
    x = check_point(geom, x)
    n = geom.dim
    r = radius(x)
    ch = radial_chain(geom, r)
    log_J = (n - 1) * float(np.log(ch.q))
    if r < EPS_POLE:
        grad = np.zeros(n)
    else:
        grad = (n - 1) * float(ch.w) * (x / r)
    # Lap(log J) = psi'' + Delta(r) psi' for the radial profile psi = log J
    lap = (n - 1) * float(ch.wp) + (n - 1) ** 2 * float(ch.w * ch.w + ch.w_over_r)
    return JacobianData(log_J=log_J, grad_log_J=grad, lap_log_J=lap)


def _phi_profile(geom: GeometryModel, r):
    """Phi(r) = 1/8 |grad log J|^2 - 1/4 Lap(log J), vectorized over radii."""
    n = geom.dim
    ch = radial_chain(geom, r)
    lap = (n - 1) * ch.wp + (n - 1) ** 2 * (ch.w * ch.w + ch.w_over_r)
    return 0.125 * (n - 1) ** 2 * ch.w**2 - 0.25 * lap


def _phi_deriv_profile(geom: GeometryModel, r):
    """d Phi / dr, from the q-derivative chain (stable through r = 0)."""
    n = geom.dim
    ch = radial_chain(geom, r, with_wpp=True)
    r = ch.r
    small = r < 1e-6
    safe_r = np.where(small, 1.0, r)
    # d/dr [w/r] = (w' - w/r)/r ; vanishes like O(r) at the pole
    d_w_over_r = np.where(small, 0.0, (ch.wp - ch.w_over_r) / safe_r)
    dlap = (n - 1) * ch.wpp + (n - 1) ** 2 * (2.0 * ch.w * ch.wp + d_w_over_r)
    return 0.25 * (n - 1) ** 2 * ch.w * ch.wp - 0.25 * dlap


def phi_data(geom: GeometryModel, x) -> PhiData:
    x = check_point(geom, x)
    r = radius(x)
    phi = float(_phi_profile(geom, r))
    if r < EPS_POLE:
        grad = np.zeros(geom.dim)
    else:
        grad = float(_phi_deriv_profile(geom, r)) * (x / r)
    return PhiData(phi=phi, grad_phi=grad)


def hyperbolic_phi_closed_form(n: int, c: float, r) -> np.ndarray:
    """Model-space potential: -1/8 (n-1)^2 c^2 + 1/8 (n-1)(n-3) (1/r^2 - c^2/sinh^2(cr))."""
    r = _as_radii(r)
    u = c * r
    # 1/r^2 - c^2/sinh(cr)^2 = c^2 (sinhc^2 - 1) / (u sinhc)^2, stable at 0
    s = _sinhc_chain(u, 0)
    small = u < 0.1
    us = np.where(small, 1.0, u)
    series = (1.0 / 3 + 2 * u * u / 45 + u**4 / 315 + 2 * u**6 / 14175)
    closed = (s * s - 1.0) / us**2
    bracket = c * c * np.where(small, series, closed) / (s * s)
    return -0.125 * (n - 1) ** 2 * c * c + 0.125 * (n - 1) * (n - 3) * bracket


def log_k_data(geom: GeometryModel, tau: float, x) -> LogKData:
    """Semi-classical kernel data at remaining time tau = 1 - s.

    grad is the Riemannian gradient (its chart components coincide with the
    coordinate partials for radial functions); hess is the covariant (0,2)
    Hessian; dtime_log_k is the derivative of log k_{1-s} in s.
    """
    if not (np.isfinite(tau) and tau > 0):
        raise GeometryError("remaining time tau must be positive")
    x = check_point(geom, x)
    n = geom.dim
    r = radius(x)
    ch = radial_chain(geom, r)
    log_k = (-0.5 * n * np.log(2 * np.pi * tau) - r * r / (2 * tau)
             - 0.5 * (n - 1) * float(np.log(ch.q)))
    grad = (-1.0 / tau - 0.5 * (n - 1) * float(ch.w_over_r)) * x
    # hess = a * (radial projector) + b * (tangential projector)
    a = -1.0 / tau - 0.5 * (n - 1) * float(ch.wp)
    b = -float(ch.fpq) * (1.0 / tau + 0.5 * (n - 1) * float(ch.w_over_r))
    if r < EPS_POLE:
        hess = a * np.eye(n)        # a = b in the pole limit
    else:
        xhat = x / r
        proj = np.outer(xhat, xhat)
        hess = a * proj + b * (np.eye(n) - proj)
    dtime = 0.5 * n / tau - r * r / (2 * tau * tau)
    return LogKData(log_k=float(log_k), grad_log_k=grad, hess_log_k=hess,
                    dtime_log_k=float(dtime))


def laplacian_log_k(geom: GeometryModel, tau: float, x) -> float:
    """Laplace-Beltrami of log k_tau: trace of the Hessian with g^{-1}."""
    data = log_k_data(geom, tau, x)
    ginv = metric_inverse_at(geom, x)
    return float(np.einsum('ij,ij->', ginv, data.hess_log_k))


def log_k_values(geom: GeometryModel, tau: float, r) -> np.ndarray:
    """log k_tau as a function of the radial distance, vectorized."""
    if not (np.isfinite(tau) and tau > 0):
        raise GeometryError("remaining time tau must be positive")
    r = _as_radii(r)
    n = geom.dim
    q = geom.profile.q(r)
    return (-0.5 * n * np.log(2 * np.pi * tau) - r * r / (2 * tau)
            - 0.5 * (n - 1) * np.log(q))


# ---------------------------------------------------------------------------
# Growth/boundedness audits (conditions on Ricci, Phi and the Jacobian)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionAudit:
    """Empirical margins on a radius grid; reported, never asserted globally."""

    radii: np.ndarray
    ricci_min: float
    ricci_max: float
    phi_min: float
    growth_lhs: np.ndarray          # |grad Phi| + |grad log J|
    growth_envelope: np.ndarray     # exp(a r^2) + 1
    growth_ratio_max: float         # implied constant c for the growth bound


def condition_audit(geom: GeometryModel, radii) -> ConditionAudit:
    radii = _as_radii(radii)
    n = geom.dim
    ch = radial_chain(geom, radii)
    k_rad = geom.profile.fpp_over_f(radii)
    k_tan = geom.profile.one_minus_fp2_over_f2(radii)
    lam = np.concatenate([-(n - 1) * k_rad, -k_rad + (n - 2) * k_tan])
    phi_vals = _phi_profile(geom, radii)
    lhs = np.abs(_phi_deriv_profile(geom, radii)) + np.abs((n - 1) * ch.w)
    envelope = np.exp(geom.growth_constant_a * radii**2) + 1.0
    return ConditionAudit(
        radii=radii,
        ricci_min=float(np.min(lam)),
        ricci_max=float(np.max(lam)),
        phi_min=float(np.min(phi_vals)),
        growth_lhs=lhs,
        growth_envelope=envelope,
        growth_ratio_max=float(np.max(lhs / envelope)),
    )
