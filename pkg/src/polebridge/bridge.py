"""Time-stepping of the horizontal frame-bundle SDE and the radial oracle.

The state is a chart point x together with a g-orthonormal frame u (columns
are frame vectors in chart components).  The Stratonovich system

    dx^k      = (u dB)^k + A^k dt,
    du^k_a    = -Gamma^k_{ij}(x) (dx)^i u^j_a,

is integrated with a Heun predictor-corrector on the diffusion/transport part
while the drift A (the kernel gradient for bridges, zero for free motion) is
frozen at the left endpoint of each step.  Frames are re-orthonormalized in
the g-inner product after every step.

Two noise records are kept per path: dB, the driving Brownian increments, and
dB_tilde, the increments of the anti-developed path u^{-1} dx = dB +
u^{-1} A dt.  For free paths the two coincide.  The anti-development is the
integrator of the divergence weights in pathspace; its drift part carries the
terminal-time singularity, which the geometric grid refinement resolves.

Per-path noise comes from counter-based Philox streams keyed by
(master seed, role, path index), so any chunking or worker layout reproduces
bit-identical paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .geometry import GeometryModel

R_FLOOR = 1e-10
"""Radial floor in the Bessel oracle, guarding the (n-1)/(2r) drift."""

ORTHO_TOL = 1e-6
"""Accepted frame orthonormality defect."""

ROLE_BRIDGE = 0
ROLE_FREE = 1
ROLE_BESSEL = 2

DEFAULT_CHUNK = 4096


class SimulationError(RuntimeError):
    """A path produced a non-finite state; carries the failing step index."""

    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message)
        self.step_index = step_index


# ---------------------------------------------------------------------------
# Time grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing nodes 0 = t_0 < ... < t_K = 1 - eps_end."""

    nodes: np.ndarray
    eps_end: float
    refinement: str              # "uniform" | "geometric"
    ratio: float | None = None

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or len(nodes) < 1:
            raise ValueError("grid needs at least one node")
        if nodes[0] != 0.0 or np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must start at 0 and strictly increase")
        if len(nodes) == 1:
            return      # degenerate zero-length grid: a single initial state
        if abs(nodes[-1] - (1.0 - self.eps_end)) > 1e-12:
            raise ValueError("last grid node must equal 1 - eps_end")

    @property
    def steps(self) -> int:
        return len(self.nodes) - 1

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.nodes)

    def nearest_index(self, t: float) -> int:
        """Index of the closest node; times are snapped rather than interpolated."""
        if not (0.0 <= t <= self.nodes[-1] + 1e-12):
            raise ValueError(f"time {t} outside grid range [0, {self.nodes[-1]}]")
        return int(np.argmin(np.abs(self.nodes - t)))

    def meta(self) -> dict:
        return {"steps": self.steps, "eps_end": self.eps_end,
                "refinement": self.refinement, "ratio": self.ratio}


def make_time_grid(steps: int, eps_end: float, refinement: str = "uniform",
                   ratio: float = 0.9) -> TimeGrid:
    """Build a grid over [0, 1 - eps_end].

    "uniform" spaces nodes evenly.  "geometric" keeps a uniform head and ends
    with a tail in which the remaining time decays by `ratio` per step, so the
    step size stays proportional to 1 - t against the singular bridge drift.
    The tail length solves eps * ratio^-m * ((1-ratio)(steps-m) + 1) = 1, which
    makes the head and tail step sizes match at the junction.
    """
    if not (isinstance(steps, (int, np.integer)) and steps >= 2):
        raise ValueError("steps must be an integer >= 2")
    if not (0.0 < eps_end <= 0.5):
        raise ValueError("eps_end must lie in (0, 0.5]")
    if refinement == "uniform":
        nodes = np.linspace(0.0, 1.0 - eps_end, steps + 1)
        return TimeGrid(nodes=nodes, eps_end=eps_end, refinement="uniform")
    if refinement != "geometric":
        raise ValueError(f"unknown refinement {refinement!r}")
    if not (0.0 < ratio < 1.0):
        raise ValueError("geometric ratio must lie in (0, 1)")

    m = steps / 2
    for _ in range(200):
        target = eps_end * ((1.0 - ratio) * (steps - m) + 1.0)
        m_new = math.log(target) / math.log(ratio)
        m_new = min(max(m_new, 0.0), steps - 1.0)
        if abs(m_new - m) < 1e-9:
            m = m_new
            break
        m = m_new
    m = int(round(m))
    # the tail must not swallow the whole interval
    m_max = int(math.floor(math.log(2.0 * eps_end) / math.log(ratio)))
    m = min(m, max(m_max, 0), steps - 1)
    if m < 1:
        nodes = np.linspace(0.0, 1.0 - eps_end, steps + 1)
        return TimeGrid(nodes=nodes, eps_end=eps_end, refinement="geometric",
                        ratio=ratio)
    tau_zone = eps_end * ratio ** (-m)
    head = np.linspace(0.0, 1.0 - tau_zone, steps - m + 1)
    # remaining times decay geometrically from tau_zone down to eps_end
    tail = 1.0 - eps_end * ratio ** (-np.arange(m - 1.0, -0.5, -1.0))
    nodes = np.concatenate([head, tail])
    return TimeGrid(nodes=nodes, eps_end=eps_end, refinement="geometric",
                    ratio=ratio)


# ---------------------------------------------------------------------------
# Reproducible per-path noise streams
# ---------------------------------------------------------------------------

def path_stream(seed: int, path_index: int, role: int = ROLE_BRIDGE) -> np.random.Generator:
    """Counter-based stream for one path, splittable by (seed, role, index)."""
    if not (0 <= seed < 2**63):
        raise ValueError("seed must lie in [0, 2^63)")
    if not (0 <= path_index < 2**56):
        raise ValueError("path index out of range")
    key = np.array([seed, (role << 56) + path_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# Batched chart kernels
# ---------------------------------------------------------------------------

def _radii(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum('pi,pi->p', x, x))


def _metric_coeffs(geom: GeometryModel, r: np.ndarray):
    """(phi, psi) of the metric g = phi I + psi x x^T at batched radii."""
    q = geom.profile.q(r)
    return q * q, geom.profile.psi(r)


def _metric_apply(phi, psi, x, v):
    """g(x) v for batches: phi v + psi (x.v) x."""
    return phi[:, None] * v + (psi * np.einsum('pi,pi->p', x, v))[:, None] * x


def _frame_coords(phi, psi, x, u, v):
    """u^{-1} v = u^T g v for g-orthonormal frames, batched."""
    return np.einsum('pka,pk->pa', u, _metric_apply(phi, psi, x, v))


def _gamma_columns(geom: GeometryModel, x, r, dx, u):
    """Gamma(dx, u_a) for every frame column a, via the radial closed form."""
    safe_r = np.maximum(r, geometry.EPS_POLE)
    xhat = x / safe_r[:, None]
    prof = geom.profile
    q = prof.q(r)
    phi = q * q
    phip = 2.0 * q * prof.qp(r)
    psi = prof.psi(r)
    psip = prof.psip(r)

    s_dx = np.einsum('pi,pi->p', xhat, dx)
    s_u = np.einsum('pi,pia->pa', xhat, u)
    dot_u = np.einsum('pi,pia->pa', dx, u)
    # first-kind contraction Gamma_{k,ij} dx^i u^j_a
    flat = 0.5 * phip[:, None, None] * (s_dx[:, None, None] * u
                                        + s_u[:, None, :] * dx[:, :, None])
    coef = (-0.5 * phip[:, None] * dot_u
            + (0.5 * psip * safe_r * safe_r * s_dx)[:, None] * s_u
            + (psi * safe_r)[:, None] * dot_u)
    flat += coef[:, None, :] * xhat[:, :, None]
    # raise the index: g^{-1} v = v/phi + (1 - 1/phi)(xhat.v) xhat
    s_flat = np.einsum('pi,pia->pa', xhat, flat)
    return (flat / phi[:, None, None]
            + ((1.0 - 1.0 / phi)[:, None] * s_flat)[:, None, :] * xhat[:, :, None])


def _gram_schmidt(geom: GeometryModel, x, u):
    """Orthonormalize frame columns in the g-inner product at x, in place."""
    r = _radii(x)
    phi, psi = _metric_coeffs(geom, r)
    n = geom.dim
    for a in range(n):
        v = u[:, :, a]
        xv = np.einsum('pi,pi->p', x, v)
        for b in range(a):
            w = u[:, :, b]
            c = phi * np.einsum('pi,pi->p', v, w) + psi * xv * np.einsum('pi,pi->p', x, w)
            v = v - c[:, None] * w
            xv = np.einsum('pi,pi->p', x, v)
        norm2 = phi * np.einsum('pi,pi->p', v, v) + psi * xv * xv
        u[:, :, a] = v / np.sqrt(norm2)[:, None]
    return u


def _initial_frame(geom: GeometryModel, x0: np.ndarray) -> np.ndarray:
    u = np.eye(geom.dim)[None, :, :].copy()
    return _gram_schmidt(geom, x0[None, :], u)[0]


def _drift_grad_log_k(geom: GeometryModel, tau: float, x, r) -> np.ndarray:
    """grad log k_tau = (-1/tau - (n-1)/2 * w(r)/r) x, batched and pole-safe."""
    n = geom.dim
    if geom.is_flat:
        return x * (-1.0 / tau)
    prof = geom.profile
    q = prof.q(r)
    w = prof.qp(r) / q
    wp = prof.qpp(r) / q - w * w
    small = r < 1e-6
    w_over_r = np.where(small, wp, w / np.where(small, 1.0, r))
    return x * (-1.0 / tau - 0.5 * (n - 1) * w_over_r)[:, None]


def _heun_step_batch(geom: GeometryModel, x, u, dB, dt, drift):
    """One Stratonovich-Heun step; drift is pre-evaluated at the left endpoint."""
    if geom.is_flat:
        dx = dB if drift is None else dB + drift * dt
        return x + dx, u
    r = _radii(x)
    dx1 = np.einsum('pij,pj->pi', u, dB)
    if drift is not None:
        dx1 = dx1 + drift * dt
    du1 = -_gamma_columns(geom, x, r, dx1, u)
    xp = x + dx1
    up = u + du1
    dx2 = np.einsum('pij,pj->pi', up, dB)
    if drift is not None:
        dx2 = dx2 + drift * dt
    du2 = -_gamma_columns(geom, xp, _radii(xp), dx2, up)
    return x + 0.5 * (dx1 + dx2), u + 0.5 * (du1 + du2)


# ---------------------------------------------------------------------------
# Path containers
# ---------------------------------------------------------------------------

@dataclass
class FrameState:
    """Chart point with a g-orthonormal frame (columns = frame vectors)."""

    point: np.ndarray
    frame: np.ndarray


@dataclass
class FramePathSample:
    """One discretized path: grid, states, and both noise records.

    For bridges a virtual terminal state at t = 1 pinned to the pole is
    appended after the last integrated node (functional evaluation times stay
    at or below 1 - eps_end); its frame repeats the last integrated frame.
    """

    grid: TimeGrid
    times: np.ndarray            # (K+1,) or (K+2,) with the virtual terminal node
    points: np.ndarray           # matching leading dimension, (.., n)
    frames: np.ndarray           # (.., n, n)
    dB: np.ndarray               # (K, n) driving increments
    dB_tilde: np.ndarray         # (K, n) anti-development increments
    kind: str                    # "bridge" | "free"

    @property
    def n_nodes(self) -> int:
        return len(self.grid.nodes)

    def state_at(self, k: int) -> FrameState:
        return FrameState(point=self.points[k], frame=self.frames[k])

    def radii(self) -> np.ndarray:
        return np.sqrt(np.einsum('ki,ki->k', self.points, self.points))


def orthonormality_defect(geom: GeometryModel, state: FrameState) -> float:
    """Max-norm of u^T G u - I at the state's point."""
    g = geometry.metric_at(geom, state.point)
    gram = state.frame.T @ g @ state.frame
    return float(np.max(np.abs(gram - np.eye(geom.dim))))


# ---------------------------------------------------------------------------
# Batched simulation driver
# ---------------------------------------------------------------------------

class PathObserver:
    """Streaming hooks for batched simulation; all arrays are read-only."""

    def begin(self, n_paths: int, grid: TimeGrid) -> None:
        pass

    def node(self, k: int, t: float, x: np.ndarray, u: np.ndarray) -> None:
        """Called at every node, including k=0 and the final node."""

    def increment(self, k: int, t: float, dt: float, x: np.ndarray,
                  u: np.ndarray, dB: np.ndarray, dB_tilde: np.ndarray) -> None:
        """Called once per step with left-endpoint state and both increments."""

    def end(self) -> None:
        pass


@dataclass
class BatchResult:
    n_paths: int
    finite_mask: np.ndarray      # (N,) paths that stayed finite
    storage: dict | None = None

    @property
    def n_failed(self) -> int:
        return int(self.n_paths - np.count_nonzero(self.finite_mask))


def simulate_batch(geom: GeometryModel, x0, grid: TimeGrid, *, kind: str,
                   seed: int, n_paths: int, start_index: int = 0,
                   observers=(), store: bool = False,
                   role: int | None = None) -> BatchResult:
    """Integrate n_paths paths with per-path Philox streams.

    kind="bridge" adds the kernel-gradient drift toward the pole and fills
    dB_tilde with anti-development increments; kind="free" integrates plain
    Brownian motion (dB_tilde = dB).
    """
    if kind not in ("bridge", "free"):
        raise ValueError(f"unknown path kind {kind!r}")
    x0 = geometry.check_point(geom, x0)
    if kind == "bridge" and geometry.radius(x0) <= 0.0:
        raise ValueError("bridge start point must differ from the pole")
    if role is None:
        role = ROLE_BRIDGE if kind == "bridge" else ROLE_FREE
    n = geom.dim
    nodes = grid.nodes
    dts = grid.dts
    K = grid.steps

    sqrt_dt = np.sqrt(dts)
    dB_all = np.empty((n_paths, K, n))
    for i in range(n_paths):
        gen = path_stream(seed, start_index + i, role)
        dB_all[i] = gen.standard_normal((K, n)) * sqrt_dt[:, None]

    x = np.tile(x0, (n_paths, 1))
    if geom.is_flat:
        u = np.broadcast_to(np.eye(n), (n_paths, n, n))
    else:
        u = np.tile(_initial_frame(geom, x0), (n_paths, 1, 1))

    stored = None
    if store:
        stored = {
            "points": np.empty((K + 1, n_paths, n)),
            "frames": np.empty((K + 1, n_paths, n, n)),
            "dB": dB_all,
            "dB_tilde": np.empty((n_paths, K, n)),
        }
        stored["points"][0] = x
        stored["frames"][0] = u

    for obs in observers:
        obs.begin(n_paths, grid)
        obs.node(0, 0.0, x, u)

    for k in range(K):
        t, dt = nodes[k], dts[k]
        dB = dB_all[:, k]
        if kind == "bridge":
            r = _radii(x)
            drift = _drift_grad_log_k(geom, 1.0 - t, x, r)
            phi, psi = _metric_coeffs(geom, r)
            dB_tilde = dB + _frame_coords(phi, psi, x, u, drift) * dt
        else:
            drift = None
            dB_tilde = dB
        if store:
            stored["dB_tilde"][:, k] = dB_tilde
        for obs in observers:
            obs.increment(k, t, dt, x, u, dB, dB_tilde)
        x, u = _heun_step_batch(geom, x, u, dB, dt, drift)
        if not geom.is_flat:
            u = _gram_schmidt(geom, x, u)
        if store:
            stored["points"][k + 1] = x
            stored["frames"][k + 1] = u
        for obs in observers:
            obs.node(k + 1, nodes[k + 1], x, u)

    for obs in observers:
        obs.end()

    finite = np.isfinite(x).all(axis=1)
    return BatchResult(n_paths=n_paths, finite_mask=finite, storage=stored)


def _single_path(geom, x0, grid, rng_or_seed, kind: str) -> FramePathSample:
    if isinstance(rng_or_seed, np.random.Generator):
        # reuse the batch layout so seeded streams and Generators agree
        seed_mode = False
        gen = rng_or_seed
    else:
        seed_mode = True

    if seed_mode:
        result = simulate_batch(geom, x0, grid, kind=kind, seed=int(rng_or_seed),
                                n_paths=1, store=True)
        stored = result.storage
    else:
        stored = _simulate_single_with_generator(geom, x0, grid, gen, kind)

    points = stored["points"][:, 0] if seed_mode else stored["points"]
    frames = stored["frames"][:, 0] if seed_mode else stored["frames"]
    dB = stored["dB"][0] if seed_mode else stored["dB"]
    dB_tilde = stored["dB_tilde"][0] if seed_mode else stored["dB_tilde"]

    bad = ~np.isfinite(points).all(axis=1)
    if bad.any():
        raise SimulationError("non-finite state during integration",
                              step_index=int(np.argmax(bad)))

    times = grid.nodes
    if kind == "bridge":
        times = np.append(times, 1.0)
        points = np.vstack([points, np.zeros(geom.dim)])
        frames = np.vstack([frames, frames[-1:]])
    return FramePathSample(grid=grid, times=times, points=points, frames=frames,
                           dB=dB, dB_tilde=dB_tilde, kind=kind)


def _simulate_single_with_generator(geom, x0, grid, gen, kind):
    """Single-path run driven by a caller-supplied Generator."""
    x0 = geometry.check_point(geom, x0)
    if kind == "bridge" and geometry.radius(x0) <= 0.0:
        raise ValueError("bridge start point must differ from the pole")
    n = geom.dim
    K = grid.steps
    dts = grid.dts
    dB = gen.standard_normal((K, n)) * np.sqrt(dts)[:, None]
    points = np.empty((K + 1, n))
    frames = np.empty((K + 1, n, n))
    dB_tilde = np.empty((K, n))
    x = x0[None, :].copy()
    u = (np.eye(n)[None] if geom.is_flat
         else _initial_frame(geom, x0)[None].copy())
    points[0], frames[0] = x[0], u[0]
    for k in range(K):
        t, dt = grid.nodes[k], dts[k]
        db = dB[k][None, :]
        if kind == "bridge":
            r = _radii(x)
            drift = _drift_grad_log_k(geom, 1.0 - t, x, r)
            phi, psi = _metric_coeffs(geom, r)
            dB_tilde[k] = (db + _frame_coords(phi, psi, x, u, drift) * dt)[0]
        else:
            drift = None
            dB_tilde[k] = db[0]
        x, u = _heun_step_batch(geom, x, u, db, dt, drift)
        if not geom.is_flat:
            u = _gram_schmidt(geom, x, u)
        points[k + 1], frames[k + 1] = x[0], u[0]
    return {"points": points, "frames": frames, "dB": dB, "dB_tilde": dB_tilde}


def simulate_bridge(geom: GeometryModel, x0, grid: TimeGrid, rng) -> FramePathSample:
    """One semi-classical bridge path from x0 toward the pole.

    rng may be a numpy Generator or an integer master seed (path index 0).
    """
    return _single_path(geom, x0, grid, rng, "bridge")


def simulate_bm(geom: GeometryModel, x0, grid: TimeGrid, rng) -> FramePathSample:
    """One free Brownian path (zero drift)."""
    return _single_path(geom, x0, grid, rng, "free")


# ---------------------------------------------------------------------------
# Single-state operations (spec-level API; wrappers over the batched kernels)
# ---------------------------------------------------------------------------

def horizontal_heun_step(geom: GeometryModel, state: FrameState, dB_k, dt: float,
                         drift=None) -> FrameState:
    """One Heun step from a single state; drift (if given) maps point -> vector
    and is evaluated at the left endpoint."""
    x = geometry.check_point(geom, state.point)[None, :]
    u = np.asarray(state.frame, dtype=float)[None, :, :].copy()
    dB = np.asarray(dB_k, dtype=float)[None, :]
    drift_vec = None
    if drift is not None:
        drift_vec = np.asarray(drift(state.point), dtype=float)[None, :]
    xn, un = _heun_step_batch(geom, x, u, dB, dt, drift_vec)
    if not np.all(np.isfinite(xn)):
        raise SimulationError("non-finite state after step")
    return FrameState(point=xn[0], frame=un[0])


def reorthonormalize(geom: GeometryModel, state: FrameState) -> FrameState:
    """Gram-Schmidt in the g-inner product at the state's point."""
    if abs(np.linalg.det(state.frame)) < 1e-300:
        raise SimulationError("singular frame cannot be orthonormalized")
    x = geometry.check_point(geom, state.point)[None, :]
    u = np.asarray(state.frame, dtype=float)[None, :, :].copy()
    u = _gram_schmidt(geom, x, u)
    if not np.all(np.isfinite(u)):
        raise SimulationError("frame orthonormalization failed")
    return FrameState(point=state.point.copy(), frame=u[0])


# ---------------------------------------------------------------------------
# One-dimensional Bessel-bridge oracle
# ---------------------------------------------------------------------------

def _bessel_step(r, z, t, dt, n):
    """One step of dr = dbeta + ((n-1)/(2r) - r/(1-t)) dt.

    The repulsive 1/r term is discretized semi-implicitly: solving
    r+ = b + (n-1) dt / (2 r+) with b the explicitly-updated remainder gives
    r+ = (b + sqrt(b^2 + 2(n-1)dt))/2 > 0, which agrees with the explicit
    Euler step to O(dt^2/r^3) away from the origin but cannot overshoot
    through it (an explicit step floored at r_floor would follow up with a
    divergent drift kick).  For n = 1 the term vanishes and the step reduces
    to reflection at the origin.
    """
    b = r + z - r / (1.0 - t) * dt
    if n == 1:
        return np.maximum(np.abs(b), R_FLOOR)
    return np.maximum(0.5 * (b + np.sqrt(b * b + 2.0 * (n - 1) * dt)), R_FLOOR)


def simulate_bessel_bridge(n: int, r0: float, grid: TimeGrid, rng) -> np.ndarray:
    """Euler-Maruyama path of dr = dbeta + ((n-1)/(2r) - r/(1-t)) dt from r0.

    Matches the radial law of the manifold bridge; rng may be a Generator or
    an integer master seed (path index 0).
    """
    if not (np.isfinite(r0) and r0 > 0):
        raise ValueError("r0 must be positive")
    if isinstance(rng, np.random.Generator):
        gen = rng
    else:
        gen = path_stream(int(rng), 0, ROLE_BESSEL)
    K = grid.steps
    dts = grid.dts
    noise = gen.standard_normal(K) * np.sqrt(dts)
    path = np.empty(K + 1)
    path[0] = r0
    r = np.array([r0])
    for k in range(K):
        r = _bessel_step(r, noise[k], grid.nodes[k], dts[k], n)
        path[k + 1] = r[0]
    return path


def simulate_bessel_batch(n: int, r0: float, grid: TimeGrid, *, seed: int,
                          n_paths: int, start_index: int = 0,
                          node_indices=None) -> np.ndarray:
    """Radial values of many Bessel-bridge paths at the requested node indices
    (all nodes if None); shape (n_paths, len(node_indices))."""
    if node_indices is None:
        node_indices = np.arange(grid.steps + 1)
    node_indices = np.asarray(node_indices, dtype=int)
    K = grid.steps
    dts = grid.dts
    sqrt_dt = np.sqrt(dts)
    noise = np.empty((n_paths, K))
    for i in range(n_paths):
        gen = path_stream(seed, start_index + i, ROLE_BESSEL)
        noise[i] = gen.standard_normal(K) * sqrt_dt
    out = np.empty((n_paths, len(node_indices)))
    col = {int(k): j for j, k in enumerate(node_indices)}
    r = np.full(n_paths, float(r0))
    if 0 in col:
        out[:, col[0]] = r
    for k in range(K):
        r = _bessel_step(r, noise[:, k], grid.nodes[k], dts[k], n)
        if (k + 1) in col:
            out[:, col[k + 1]] = r
    return out
