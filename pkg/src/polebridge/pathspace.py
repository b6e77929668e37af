"""Cameron-Martin directions, cylindrical functionals, and divergence weights.

A direction h lives in the Cameron-Martin space H of finite-energy paths in
R^n starting at 0; pinned directions additionally satisfy h(1) = 0.  Along a
frame path the direction acts through the frame, v_s = u_s h(s), and the
differential of a cylindrical functional F(sigma) = f(sigma_{t_1}, ...,
sigma_{t_m}) is the sum of slot derivatives paired with v_{t_k}.

The divergence weight attached to (bridge path, h) is

    int <h' + 1/2 ric_u h, dB~>  +  int dPhi(u h) ds,

where dB~ is the anti-development increment record of the path (driving noise
plus drift in frame coordinates; see bridge.py).  divergence_direct computes
this weight from dB~.  divergence_lemma1 recomputes the same quantity from
the raw driving increments via the kernel-Hessian identity

    int <h' + 1/2 ric h, dB~> = int <h' + 1/2 ric h, dB>
        - int Hess(log k_{1-s})(u dB, u h) - int dPhi(u h) ds
        + <grad log k_{1-s}(x_s), u_s h_s> |_{s -> 1},

in which the dPhi integral cancels against the weight's own dPhi term, so the
cross-check total is raw martingale minus Hessian integral plus the boundary
term at the truncation horizon (it vanishes as eps_end -> 0 for pinned h).
The full kernel Hessian is used, including the -1/2 Hess(log J) part.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import geometry
from .bridge import FramePathSample, PathObserver, TimeGrid
from .geometry import GeometryModel


class RegistryError(ValueError):
    """Unknown or malformed functional/direction key."""


# ---------------------------------------------------------------------------
# Cameron-Martin directions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CMDirection:
    """A direction h with its derivative, evaluable at any time in [0, 1]."""

    label: str
    dim: int
    h: Callable[[np.ndarray], np.ndarray]       # (...,) -> (..., n)
    hdot: Callable[[np.ndarray], np.ndarray]
    h_norm: float                                # |h|_{H^1}
    pinned: bool                                 # h(1) = 0


def cm_basis(k: int, axis: int, dim: int) -> CMDirection:
    """Pinned basis direction h(s) = sqrt(2) sin(k pi s)/(k pi) e_axis.

    Unit H^1 norm; h(0) = h(1) = 0.  axis is 1-based.
    """
    if not (isinstance(k, (int, np.integer)) and k >= 1):
        raise RegistryError("sine frequency k must be a positive integer")
    if not (1 <= axis <= dim):
        raise RegistryError(f"axis must lie in [1, {dim}]")
    j = axis - 1
    kp = k * np.pi

    def h(s):
        s = np.asarray(s, dtype=float)
        out = np.zeros(s.shape + (dim,))
        out[..., j] = np.sqrt(2.0) * np.sin(kp * s) / kp
        return out

    def hdot(s):
        s = np.asarray(s, dtype=float)
        out = np.zeros(s.shape + (dim,))
        out[..., j] = np.sqrt(2.0) * np.cos(kp * s)
        return out

    return CMDirection(label=f"sine({k},{axis})", dim=dim, h=h, hdot=hdot,
                       h_norm=1.0, pinned=True)


def cm_linear(axis: int, dim: int) -> CMDirection:
    """Based-space direction h(s) = s e_axis with h(1) != 0 (negative control)."""
    if not (1 <= axis <= dim):
        raise RegistryError(f"axis must lie in [1, {dim}]")
    j = axis - 1

    def h(s):
        s = np.asarray(s, dtype=float)
        out = np.zeros(s.shape + (dim,))
        out[..., j] = s
        return out

    def hdot(s):
        s = np.asarray(s, dtype=float)
        out = np.zeros(s.shape + (dim,))
        out[..., j] = 1.0
        return out

    return CMDirection(label=f"linear({axis})", dim=dim, h=h, hdot=hdot,
                       h_norm=1.0, pinned=False)


def h1_norm(direction: CMDirection, n_quad: int = 4001) -> float:
    """|h|_{H^1} by composite-trapezoid quadrature of |h'|^2 (invariant check)."""
    s = np.linspace(0.0, 1.0, n_quad)
    hd = direction.hdot(s)
    return float(np.sqrt(np.trapezoid(np.einsum('si,si->s', hd, hd), s)))


# ---------------------------------------------------------------------------
# Cylindrical functionals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CylinderFunctional:
    """F(sigma) = f(sigma_{t_1}, ..., sigma_{t_m}) with per-slot derivatives.

    value and partials are batched: points has shape (..., m, n) and partials
    returns the coordinate partial derivatives per slot, same shape.  The
    Riemannian slot gradients are obtained from them with the inverse metric.
    """

    label: str
    times: tuple
    value: Callable[[np.ndarray], np.ndarray]
    partials: Callable[[np.ndarray], np.ndarray]

    @property
    def n_slots(self) -> int:
        return len(self.times)

    def fd_partials(self, points: np.ndarray, h: float = 1e-5) -> np.ndarray:
        """Central-difference fallback for the slot partials (single point set)."""
        points = np.asarray(points, dtype=float)
        out = np.zeros_like(points)
        for k in range(points.shape[0]):
            for i in range(points.shape[1]):
                plus = points.copy()
                minus = points.copy()
                plus[k, i] += h
                minus[k, i] -= h
                out[k, i] = (self.value(plus) - self.value(minus)) / (2 * h)
        return out

    def g_gradients(self, geom: GeometryModel, points: np.ndarray) -> np.ndarray:
        """Riemannian slot gradients g^{-1} (partials) at a single point set."""
        parts = self.partials(np.asarray(points, dtype=float))
        return np.stack([geometry.metric_inverse_at(geom, points[k]) @ parts[k]
                         for k in range(len(self.times))])


def _check_time(t: float) -> float:
    t = float(t)
    if not (0.0 < t <= 1.0):
        raise RegistryError(f"functional time {t} must lie in (0, 1]")
    return t


def functional_one(dim: int) -> CylinderFunctional:
    def value(points):
        points = np.asarray(points, dtype=float)
        return np.ones(points.shape[:-2])

    def partials(points):
        return np.zeros_like(np.asarray(points, dtype=float))

    return CylinderFunctional(label="one", times=(), value=value, partials=partials)


def functional_coord(power: int, axis: int, t: float, dim: int) -> CylinderFunctional:
    """f(y) = (y . e_axis)^power at a single time; axis is 1-based."""
    if not (isinstance(power, (int, np.integer)) and power >= 1):
        raise RegistryError("coordinate power must be a positive integer")
    if not (1 <= axis <= dim):
        raise RegistryError(f"axis must lie in [1, {dim}]")
    j = axis - 1
    t = _check_time(t)

    def value(points):
        return np.asarray(points, dtype=float)[..., 0, j] ** power

    def partials(points):
        points = np.asarray(points, dtype=float)
        out = np.zeros_like(points)
        out[..., 0, j] = power * points[..., 0, j] ** (power - 1)
        return out

    return CylinderFunctional(label=f"coord({power},{axis},{t:g})", times=(t,),
                              value=value, partials=partials)


def functional_dist2(t: float, dim: int) -> CylinderFunctional:
    """f(y) = r(y)^2, squared distance to the pole at one time."""
    t = _check_time(t)

    def value(points):
        points = np.asarray(points, dtype=float)
        return np.einsum('...i,...i->...', points[..., 0, :], points[..., 0, :])

    def partials(points):
        points = np.asarray(points, dtype=float)
        out = np.zeros_like(points)
        out[..., 0, :] = 2.0 * points[..., 0, :]
        return out

    return CylinderFunctional(label=f"dist2({t:g})", times=(t,),
                              value=value, partials=partials)


def functional_bump(t: float, dim: int) -> CylinderFunctional:
    """Smooth bump of the radial distance, f(y) = exp(-r(y)^2)."""
    t = _check_time(t)

    def value(points):
        points = np.asarray(points, dtype=float)
        r2 = np.einsum('...i,...i->...', points[..., 0, :], points[..., 0, :])
        return np.exp(-r2)

    def partials(points):
        points = np.asarray(points, dtype=float)
        r2 = np.einsum('...i,...i->...', points[..., 0, :], points[..., 0, :])
        out = np.zeros_like(points)
        out[..., 0, :] = -2.0 * np.exp(-r2)[..., None] * points[..., 0, :]
        return out

    return CylinderFunctional(label=f"bump({t:g})", times=(t,),
                              value=value, partials=partials)


def functional_product(a: CylinderFunctional, b: CylinderFunctional) -> CylinderFunctional:
    """Pointwise product with product-rule slot derivatives; slots are merged."""
    times = tuple(sorted(set(a.times) | set(b.times)))
    idx_a = np.array([times.index(t) for t in a.times], dtype=int)
    idx_b = np.array([times.index(t) for t in b.times], dtype=int)

    def value(points):
        points = np.asarray(points, dtype=float)
        return a.value(points[..., idx_a, :]) * b.value(points[..., idx_b, :])

    def partials(points):
        points = np.asarray(points, dtype=float)
        pa, pb = points[..., idx_a, :], points[..., idx_b, :]
        va, vb = a.value(pa), b.value(pb)
        out = np.zeros_like(points)
        if len(idx_a):
            out[..., idx_a, :] += a.partials(pa) * vb[..., None, None]
        if len(idx_b):
            out[..., idx_b, :] += b.partials(pb) * va[..., None, None]
        return out

    return CylinderFunctional(label=f"product({a.label},{b.label})", times=times,
                              value=value, partials=partials)


# ---------------------------------------------------------------------------
# Registry key parsing
# ---------------------------------------------------------------------------

def _split_args(body: str) -> list[str]:
    parts, depth, current = [], 0, []
    for ch in body:
        if ch == '(':
            depth += 1
        elif ch == ')':
            depth -= 1
            if depth < 0:
                raise RegistryError(f"unbalanced parentheses in {body!r}")
        if ch == ',' and depth == 0:
            parts.append(''.join(current))
            current = []
        else:
            current.append(ch)
    if depth != 0:
        raise RegistryError(f"unbalanced parentheses in {body!r}")
    if current or parts:
        parts.append(''.join(current))
    return [p.strip() for p in parts]


def _parse_key(key: str) -> tuple[str, list[str]]:
    key = key.strip()
    if '(' not in key:
        return key, []
    if not key.endswith(')'):
        raise RegistryError(f"malformed key {key!r}")
    name, body = key.split('(', 1)
    return name.strip(), _split_args(body[:-1])


FUNCTIONAL_KEYS = ("one", "coord(power,axis,t)", "dist2(t)", "bump(t)",
                   "product(key,key)")
DIRECTION_KEYS = ("sine(k,axis)", "linear(axis)")


def functional_from_key(key: str, dim: int) -> CylinderFunctional:
    """Build a registry functional, e.g. "coord(1,1,0.5)" or
    "product(dist2(0.5),bump(0.75))"."""
    name, args = _parse_key(key)
    try:
        if name == "one" and not args:
            return functional_one(dim)
        if name == "coord" and len(args) == 3:
            return functional_coord(int(args[0]), int(args[1]), float(args[2]), dim)
        if name == "dist2" and len(args) == 1:
            return functional_dist2(float(args[0]), dim)
        if name == "bump" and len(args) == 1:
            return functional_bump(float(args[0]), dim)
        if name == "product" and len(args) == 2:
            return functional_product(functional_from_key(args[0], dim),
                                      functional_from_key(args[1], dim))
    except (ValueError, TypeError) as exc:
        raise RegistryError(f"bad arguments in functional key {key!r}: {exc}") from exc
    raise RegistryError(
        f"unknown functional key {key!r}; available: {', '.join(FUNCTIONAL_KEYS)}")


def direction_from_key(key: str, dim: int) -> CMDirection:
    """Build a registry direction, e.g. "sine(1,1)" or "linear(1)"."""
    name, args = _parse_key(key)
    try:
        if name == "sine" and len(args) == 2:
            return cm_basis(int(args[0]), int(args[1]), dim)
        if name == "linear" and len(args) == 1:
            return cm_linear(int(args[0]), dim)
    except (ValueError, TypeError) as exc:
        raise RegistryError(f"bad arguments in direction key {key!r}: {exc}") from exc
    raise RegistryError(
        f"unknown direction key {key!r}; available: {', '.join(DIRECTION_KEYS)}")


# ---------------------------------------------------------------------------
# Green functions of d/ds on (0,1)
# ---------------------------------------------------------------------------

def green_based(s, t):
    """G(s,t) = min(s,t): covariance of the based (free) coordinate process."""
    return np.minimum(s, t)


def green_pinned(s, t):
    """G0(s,t) = min(s,t) - st: covariance of the pinned coordinate process."""
    return np.minimum(s, t) - np.asarray(s) * np.asarray(t)


# ---------------------------------------------------------------------------
# Single-path operations
# ---------------------------------------------------------------------------

def _snap_indices(F: CylinderFunctional, grid: TimeGrid) -> np.ndarray:
    return np.array([grid.nearest_index(t) for t in F.times], dtype=int)


def differential_along(F: CylinderFunctional, path: FramePathSample,
                       h: CMDirection) -> float:
    """dF(u h) = sum_k <slot partials, u_{t_k} h(t_k)>, slot times snapped to
    the nearest grid node."""
    idx = _snap_indices(F, path.grid)
    if F.n_slots == 0:
        return 0.0
    ts = path.grid.nodes[idx]
    pts = path.points[idx]
    parts = F.partials(pts)
    uh = np.einsum('kij,kj->ki', path.frames[idx], h.h(ts))
    return float(np.einsum('ki,ki->', parts, uh))


@dataclass(frozen=True)
class DivergenceBreakdown:
    """Terms of one divergence-weight evaluation; total is their sum.

    The direct route fills martingale_term (against dB~) and phi_term.  The
    Lemma-style route fills martingale_term (against raw dB), hessian_term
    (minus the kernel-Hessian stochastic integral) and boundary_term (the
    kernel-gradient pairing at the truncation horizon); its phi_term is zero
    because the conversion identity's dPhi integral cancels the weight's own.
    """

    martingale_term: float
    phi_term: float
    hessian_term: float = 0.0
    boundary_term: float = 0.0

    @property
    def total(self) -> float:
        return (self.martingale_term + self.phi_term
                + self.hessian_term + self.boundary_term)


def _ric_in_frame(geom: GeometryModel, points, frames, uh):
    """u^{-1} Ric#(u h) stepwise: (K, n) frame-coordinate vectors."""
    n = geom.dim
    if geom.is_flat:
        return np.zeros_like(uh)
    r = np.sqrt(np.einsum('ki,ki->k', points, points))
    safe_r = np.maximum(r, geometry.EPS_POLE)
    xhat = points / safe_r[:, None]
    k_rad = geom.profile.fpp_over_f(r)
    k_tan = geom.profile.one_minus_fp2_over_f2(r)
    lam_rad = -(n - 1) * k_rad
    lam_tan = -k_rad + (n - 2) * k_tan
    s = np.einsum('ki,ki->k', xhat, uh)
    ric_uh = (lam_rad * s)[:, None] * xhat + lam_tan[:, None] * (uh - s[:, None] * xhat)
    # back to frame coordinates with u^{-1} = u^T g
    q = geom.profile.q(r)
    phi = q * q
    psi = geom.profile.psi(r)
    gw = phi[:, None] * ric_uh + (psi * np.einsum('ki,ki->k', points, ric_uh))[:, None] * points
    return np.einsum('kia,ki->ka', frames, gw)


def _phi_pairing(geom: GeometryModel, points, uh):
    """dPhi(u h) stepwise: Phi'(r) <xhat, u h>."""
    if geom.is_flat:
        return np.zeros(len(points))
    r = np.sqrt(np.einsum('ki,ki->k', points, points))
    deriv = geometry._phi_deriv_profile(geom, r)
    safe_r = np.maximum(r, geometry.EPS_POLE)
    return deriv * np.einsum('ki,ki->k', points / safe_r[:, None], uh)


def _hess_log_k_pairing(geom: GeometryModel, tau, points, v1, v2):
    """Hess(log k_tau)(v1, v2) stepwise, full Hessian including the J part."""
    n = geom.dim
    r = np.sqrt(np.einsum('ki,ki->k', points, points))
    if geom.is_flat:
        a = b = -1.0 / tau
    else:
        prof = geom.profile
        q = prof.q(r)
        qp = prof.qp(r)
        w = qp / q
        wp = prof.qpp(r) / q - w * w
        small = r < 1e-6
        w_over_r = np.where(small, wp, w / np.where(small, 1.0, r))
        a = -1.0 / tau - 0.5 * (n - 1) * wp
        b = -prof.fp(r) * q * (1.0 / tau + 0.5 * (n - 1) * w_over_r)
    safe_r = np.maximum(r, geometry.EPS_POLE)
    xhat = points / safe_r[:, None]
    s1 = np.einsum('ki,ki->k', xhat, v1)
    s2 = np.einsum('ki,ki->k', xhat, v2)
    dots = np.einsum('ki,ki->k', v1, v2)
    return a * s1 * s2 + b * (dots - s1 * s2)


def _require_bridge(path: FramePathSample):
    if path.kind != "bridge":
        raise ValueError("divergence weights require a bridge path")
    if path.dB_tilde is None:
        raise ValueError("path sample is missing dB_tilde increments")


def divergence_direct(geom: GeometryModel, path: FramePathSample,
                      h: CMDirection) -> DivergenceBreakdown:
    """Theorem weight from the anti-development increments (default route)."""
    _require_bridge(path)
    K = path.grid.steps
    ts = path.grid.nodes[:K]
    dts = path.grid.dts
    points = path.points[:K]
    frames = path.frames[:K]
    hs = h.h(ts)
    hds = h.hdot(ts)
    uh = np.einsum('kij,kj->ki', frames, hs)
    integrand = hds + 0.5 * _ric_in_frame(geom, points, frames, uh)
    mart = float(np.einsum('ki,ki->', integrand, path.dB_tilde))
    phi = float(np.sum(_phi_pairing(geom, points, uh) * dts))
    return DivergenceBreakdown(martingale_term=mart, phi_term=phi)


def divergence_lemma1(geom: GeometryModel, path: FramePathSample,
                      h: CMDirection) -> DivergenceBreakdown:
    """Theorem weight recomputed from raw driving noise (cross-check route)."""
    _require_bridge(path)
    K = path.grid.steps
    ts = path.grid.nodes[:K]
    points = path.points[:K]
    frames = path.frames[:K]
    hs = h.h(ts)
    hds = h.hdot(ts)
    uh = np.einsum('kij,kj->ki', frames, hs)
    integrand = hds + 0.5 * _ric_in_frame(geom, points, frames, uh)
    mart = float(np.einsum('ki,ki->', integrand, path.dB))
    udb = np.einsum('kij,kj->ki', frames, path.dB)
    hess = -float(np.sum(
        _hess_log_k_pairing(geom, 1.0 - ts, points, udb, uh)))
    # boundary pairing at the truncation horizon t_K = 1 - eps_end
    tK = path.grid.nodes[K]
    xK = path.points[K]
    uhK = path.frames[K] @ h.h(np.asarray(tK))
    grad = geometry.log_k_data(geom, 1.0 - tK, xK).grad_log_k
    boundary = float(grad @ uhK)
    return DivergenceBreakdown(martingale_term=mart, phi_term=0.0,
                               hessian_term=hess, boundary_term=boundary)


def green_gradient_norm(geom: GeometryModel, F: CylinderFunctional,
                        path: FramePathSample, which: str = "pinned") -> float:
    """|grad F|^2 against the based or pinned Green function.

    Slot gradients are parallel-transported between slots through the frames;
    in frame coordinates b_k = u_{t_k}^T (slot partials), the transport drops
    out and the norm is sum_{k,j} G(t_k,t_j) b_k . b_j.
    """
    if which == "pinned":
        green = green_pinned
    elif which == "based":
        green = green_based
    else:
        raise ValueError(f"which must be 'based' or 'pinned', got {which!r}")
    if F.n_slots == 0:
        return 0.0
    idx = _snap_indices(F, path.grid)
    ts = path.grid.nodes[idx]
    pts = path.points[idx]
    parts = F.partials(pts)
    b = np.einsum('kia,ki->ka', path.frames[idx], parts)
    gmat = green(ts[:, None], ts[None, :])
    return float(np.einsum('kj,ka,ja->', gmat, b, b))


# ---------------------------------------------------------------------------
# Streaming accumulators for batched Monte Carlo runs
# ---------------------------------------------------------------------------

class DivergenceAccumulator(PathObserver):
    """Streams the divergence terms over a batched bridge simulation.

    mode: "direct", "lemma1" or "both".  After the run, totals() returns the
    per-path weight(s); identical to the single-path operations.
    """

    def __init__(self, geom: GeometryModel, h: CMDirection, mode: str = "direct"):
        if mode not in ("direct", "lemma1", "both"):
            raise ValueError(f"unknown divergence mode {mode!r}")
        self.geom = geom
        self.h = h
        self.mode = mode

    def begin(self, n_paths, grid):
        self._K = grid.steps
        ts = grid.nodes[:-1]
        self._hs = self.h.h(ts)
        self._hds = self.h.hdot(ts)
        self._h_end = self.h.h(np.asarray(grid.nodes[-1]))
        self._eps = grid.eps_end
        z = np.zeros(n_paths)
        self.mart_direct = z.copy()
        self.phi_int = z.copy()
        self.mart_raw = z.copy()
        self.hess_int = z.copy()
        self.boundary = z.copy()

    def increment(self, k, t, dt, x, u, dB, dB_tilde):
        geom = self.geom
        hd = self._hds[k]
        uh = np.einsum('pij,j->pi', u, self._hs[k])
        if geom.is_flat:
            integrand_const = hd
            ric_part = None
        else:
            ric_part = 0.5 * _ric_in_frame(geom, x, u, uh)
            integrand_const = hd
        if self.mode in ("direct", "both"):
            m = np.einsum('pi,i->p', dB_tilde, integrand_const)
            if ric_part is not None:
                m = m + np.einsum('pi,pi->p', dB_tilde, ric_part)
            self.mart_direct += m
            self.phi_int += _phi_pairing(geom, x, uh) * dt
        if self.mode in ("lemma1", "both"):
            m = np.einsum('pi,i->p', dB, integrand_const)
            if ric_part is not None:
                m = m + np.einsum('pi,pi->p', dB, ric_part)
            self.mart_raw += m
            udb = np.einsum('pij,pj->pi', u, dB)
            self.hess_int -= _hess_log_k_pairing(
                geom, np.full(len(x), 1.0 - t), x, udb, uh)

    def node(self, k, t, x, u):
        if k == self._K and self.mode in ("lemma1", "both"):
            uh = np.einsum('pij,j->pi', u, self._h_end)
            n = self.geom.dim
            if self.geom.is_flat:
                grad = x * (-1.0 / self._eps)
            else:
                r = np.sqrt(np.einsum('pi,pi->p', x, x))
                from .bridge import _drift_grad_log_k
                grad = _drift_grad_log_k(self.geom, self._eps, x, r)
            self.boundary = np.einsum('pi,pi->p', grad, uh)

    def totals_direct(self) -> np.ndarray:
        return self.mart_direct + self.phi_int

    def totals_lemma1(self) -> np.ndarray:
        return self.mart_raw + self.hess_int + self.boundary


class SnapshotObserver(PathObserver):
    """Captures (points, frames) at a fixed set of node indices."""

    def __init__(self, node_indices):
        self.node_indices = sorted(set(int(i) for i in node_indices))
        self.points: dict[int, np.ndarray] = {}
        self.frames: dict[int, np.ndarray] = {}

    def begin(self, n_paths, grid):
        self._want = set(self.node_indices)

    def node(self, k, t, x, u):
        if k in self._want:
            self.points[k] = np.array(x)
            self.frames[k] = np.array(u)


class PhiPathIntegralObserver(PathObserver):
    """Trapezoid quadrature of Phi along each path up to a final node index."""

    def __init__(self, geom: GeometryModel, stop_index: int):
        self.geom = geom
        self.stop_index = int(stop_index)

    def begin(self, n_paths, grid):
        self.integral = np.zeros(n_paths)
        self._prev = None

    def node(self, k, t, x, u):
        if k > self.stop_index or self.geom.is_flat:
            return
        r = np.sqrt(np.einsum('pi,pi->p', x, x))
        vals = geometry._phi_profile(self.geom, r)
        if self._prev is not None:
            prev_vals, prev_t = self._prev
            self.integral += 0.5 * (vals + prev_vals) * (t - prev_t)
        self._prev = (vals, t)


def functional_on_snapshots(geom: GeometryModel, F: CylinderFunctional,
                            grid: TimeGrid, snaps: SnapshotObserver,
                            h: CMDirection | None = None):
    """Batched F values and (optionally) dF(u h) from captured snapshots."""
    idx = _snap_indices(F, grid)
    if F.n_slots == 0:
        n_paths = len(next(iter(snaps.points.values()))) if snaps.points else 0
        vals = np.ones(n_paths)
        return (vals, np.zeros(n_paths)) if h is not None else vals
    pts = np.stack([snaps.points[i] for i in idx], axis=1)        # (N, m, n)
    vals = F.value(pts)
    if h is None:
        return vals
    parts = F.partials(pts)
    diff = np.zeros(len(pts))
    ts = grid.nodes[idx]
    hs = h.h(ts)
    for slot, i in enumerate(idx):
        uh = np.einsum('pij,j->pi', snaps.frames[i], hs[slot])
        diff += np.einsum('pi,pi->p', parts[:, slot], uh)
    return vals, diff


def kernel_gradient_pairing(geom: GeometryModel, t: float, x: np.ndarray,
                            u: np.ndarray, h: CMDirection) -> np.ndarray:
    """<grad log k_{1-t}(x), u h(t)> batched (the endpoint-decay statistic)."""
    from .bridge import _drift_grad_log_k
    r = np.sqrt(np.einsum('pi,pi->p', x, x))
    grad = _drift_grad_log_k(geom, 1.0 - t, x, r)
    uh = np.einsum('pij,j->pi', u, h.h(np.asarray(t)))
    return np.einsum('pi,pi->p', grad, uh)
