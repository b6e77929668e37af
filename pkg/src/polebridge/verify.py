"""Monte Carlo and finite-difference verification harness.

Each check produces an McReport (or a list/table of them) comparing two
estimates of the same quantity with sample standard errors and a z-score.
Acceptance thresholds are |z| < 3 for statistical checks; deterministic
identity tolerances are stated per record in the identity suite.

Reproducibility contract: per-path noise comes from counter-based streams
keyed by (seed, role, path index), chunking is fixed, estimator accumulation
uses a pairwise tree over path-index order, and work is split across a worker
pool by path-index ranges and merged by index, so reports are bit-identical
for a given (seed, config) regardless of the worker count.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import geometry, pathspace
from .bridge import (DEFAULT_CHUNK, ROLE_BESSEL, TimeGrid, make_time_grid,
                     simulate_batch, simulate_bessel_batch)
from .geometry import GeometryModel
from .pathspace import (CMDirection, CylinderFunctional, DivergenceAccumulator,
                        PhiPathIntegralObserver, SnapshotObserver,
                        direction_from_key, functional_from_key,
                        functional_on_snapshots, kernel_gradient_pairing)

FAILURE_BUDGET = 1e-3
"""Fraction of non-finite paths tolerated before a check aborts."""


class SimulationBudgetError(RuntimeError):
    """More paths failed than the failure budget allows."""


# ---------------------------------------------------------------------------
# Deterministic reductions and report container
# ---------------------------------------------------------------------------

def pairwise_sum(values) -> float:
    """Pairwise tree sum in array order; independent of worker scheduling."""
    a = np.asarray(values, dtype=float).ravel()
    if a.size == 0:
        return 0.0
    while a.size > 1:
        if a.size % 2:
            a = np.concatenate([a[0:-1:2] + a[1::2], a[-1:]])
        else:
            a = a[0::2] + a[1::2]
    return float(a[0])


def mc_mean_se(values) -> tuple[float, float]:
    """Sample mean and standard error with the deterministic reduction."""
    a = np.asarray(values, dtype=float).ravel()
    n = a.size
    if n == 0:
        return float("nan"), float("nan")
    mean = pairwise_sum(a) / n
    if n < 2:
        return mean, float("nan")
    var = pairwise_sum((a - mean) ** 2) / (n - 1)
    return mean, float(np.sqrt(var / n))


@dataclass
class McReport:
    """A two-sided Monte Carlo comparison with its uncertainty.

    se_diff is the paired-sample standard error of lhs - rhs where both sides
    consume the same paths, else sqrt(se_lhs^2 + se_rhs^2); the z-score always
    uses se_diff.
    """

    label: str
    estimate_lhs: float
    estimate_rhs: float
    se_lhs: float
    se_rhs: float
    se_diff: float
    z_score: float
    n_paths: int
    n_failed: int
    grid_meta: dict
    seed: int
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return abs(self.z_score) < 3.0

    def to_json_dict(self) -> dict:
        out = {
            "label": self.label,
            "lhs": self.estimate_lhs,
            "rhs": self.estimate_rhs,
            "se_lhs": self.se_lhs,
            "se_rhs": self.se_rhs,
            "se_diff": self.se_diff,
            "z": self.z_score,
            "n_paths": self.n_paths,
            "n_failed": self.n_failed,
            "steps": self.grid_meta.get("steps"),
            "eps_end": self.grid_meta.get("eps_end"),
            "refinement": self.grid_meta.get("refinement"),
            "ratio": self.grid_meta.get("ratio"),
            "seed": self.seed,
            "wall_time": self.wall_time,
        }
        if self.extra:
            out["extra"] = self.extra
        return out


def _paired_report(label, lhs, rhs, grid, seed, n_failed, wall_time=0.0,
                   extra=None) -> McReport:
    mean_l, se_l = mc_mean_se(lhs)
    mean_r, se_r = mc_mean_se(rhs)
    _, se_d = mc_mean_se(np.asarray(lhs) - np.asarray(rhs))
    z = (mean_l - mean_r) / se_d if se_d > 0 else 0.0
    return McReport(label=label, estimate_lhs=mean_l, estimate_rhs=mean_r,
                    se_lhs=se_l, se_rhs=se_r, se_diff=se_d, z_score=float(z),
                    n_paths=len(np.asarray(lhs)), n_failed=n_failed,
                    grid_meta=grid.meta(), seed=seed, wall_time=wall_time,
                    extra=extra or {})


def _unpaired_report(label, lhs, rhs, grid, seed, n_failed, wall_time=0.0,
                     extra=None) -> McReport:
    mean_l, se_l = mc_mean_se(lhs)
    mean_r, se_r = mc_mean_se(rhs)
    se_d = float(np.sqrt(se_l**2 + se_r**2))
    z = (mean_l - mean_r) / se_d if se_d > 0 else 0.0
    return McReport(label=label, estimate_lhs=mean_l, estimate_rhs=mean_r,
                    se_lhs=se_l, se_rhs=se_r, se_diff=se_d, z_score=float(z),
                    n_paths=len(np.asarray(lhs)), n_failed=n_failed,
                    grid_meta=grid.meta(), seed=seed, wall_time=wall_time,
                    extra=extra or {})


# ---------------------------------------------------------------------------
# Chunked (optionally multi-process) Monte Carlo driver
# ---------------------------------------------------------------------------

def _chunk_ranges(n_paths: int, chunk: int = DEFAULT_CHUNK):
    return [(s, min(s + chunk, n_paths)) for s in range(0, n_paths, chunk)]


def _default_x0(geom: GeometryModel, r0: float) -> np.ndarray:
    x0 = np.zeros(geom.dim)
    x0[0] = r0
    return x0


@dataclass(frozen=True)
class _PathTask:
    """Picklable description of one chunk of paths plus what to record.

    Functionals and directions travel as registry keys so worker processes
    can rebuild them (their closures do not pickle).
    """

    geom: GeometryModel
    grid: TimeGrid
    kind: str
    seed: int
    start: int
    count: int
    x0: tuple
    functional_keys: tuple = ()          # evaluate values at their slot times
    diff_pairs: tuple = ()               # (f_key, h_key): also record dF(u h)
    divergences: tuple = ()              # (h_key, mode) divergence weights
    snapshot_times: tuple = ()           # radial values r(x_t) recorded per time
    phi_integral_to: float | None = None  # trapezoid of Phi up to this time
    decay: tuple | None = None           # (h_key, times): <grad log k, u h>^2 data


def _run_path_chunk(task: _PathTask) -> tuple[int, dict, np.ndarray]:
    geom, grid = task.geom, task.grid
    dim = geom.dim
    f_keys = list(dict.fromkeys(task.functional_keys
                                + tuple(f for f, _ in task.diff_pairs)))
    functionals = {k: functional_from_key(k, dim) for k in f_keys}

    snap_indices: set[int] = set()
    for F in functionals.values():
        snap_indices.update(int(grid.nearest_index(t)) for t in F.times)
    for t in task.snapshot_times:
        snap_indices.add(int(grid.nearest_index(t)))
    decay_dir = None
    if task.decay is not None:
        decay_dir = direction_from_key(task.decay[0], dim)
        for t in task.decay[1]:
            snap_indices.add(int(grid.nearest_index(t)))

    observers = []
    snaps = SnapshotObserver(sorted(snap_indices)) if snap_indices else None
    if snaps is not None:
        observers.append(snaps)
    div_accs = {}
    for h_key, mode in task.divergences:
        acc = DivergenceAccumulator(geom, direction_from_key(h_key, dim), mode)
        div_accs[(h_key, mode)] = acc
        observers.append(acc)
    phi_obs = None
    if task.phi_integral_to is not None:
        phi_obs = PhiPathIntegralObserver(geom, grid.nearest_index(task.phi_integral_to))
        observers.append(phi_obs)

    result = simulate_batch(geom, np.asarray(task.x0), grid, kind=task.kind,
                            seed=task.seed, n_paths=task.count,
                            start_index=task.start, observers=observers)

    out: dict[str, np.ndarray] = {}
    for key, F in functionals.items():
        out[f"val:{key}"] = functional_on_snapshots(geom, F, grid, snaps)
    for f_key, h_key in task.diff_pairs:
        h_dir = direction_from_key(h_key, dim)
        _, diff = functional_on_snapshots(geom, functionals[f_key], grid,
                                          snaps, h_dir)
        out[f"diff:{f_key}|{h_key}"] = diff
    for (h_key, mode), acc in div_accs.items():
        if mode in ("direct", "both"):
            out[f"div_direct:{h_key}"] = acc.totals_direct()
        if mode in ("lemma1", "both"):
            out[f"div_lemma1:{h_key}"] = acc.totals_lemma1()
    if phi_obs is not None:
        out["phi_integral"] = phi_obs.integral
    for t in task.snapshot_times:
        k = grid.nearest_index(t)
        x = snaps.points[k]
        out[f"r:{t:g}"] = np.sqrt(np.einsum('pi,pi->p', x, x))
    if decay_dir is not None:
        for t in task.decay[1]:
            k = grid.nearest_index(t)
            t_snap = float(grid.nodes[k])
            out[f"decay:{t:g}"] = kernel_gradient_pairing(
                geom, t_snap, snaps.points[k], snaps.frames[k], decay_dir)
    return task.start, out, result.finite_mask


def _merge_chunks(n_paths, pieces):
    merged: dict[str, np.ndarray] = {}
    mask = np.empty(n_paths, dtype=bool)
    for start, out, finite in pieces:
        count = len(finite)
        mask[start:start + count] = finite
        for key, arr in out.items():
            if key not in merged:
                merged[key] = np.empty((n_paths,) + arr.shape[1:], dtype=arr.dtype)
            merged[key][start:start + count] = arr
    return merged, mask


def _run_paths(geom, grid, kind, seed, n_paths, x0, jobs=1, **record) -> tuple[dict, np.ndarray]:
    tasks = [_PathTask(geom=geom, grid=grid, kind=kind, seed=seed, start=s,
                       count=e - s, x0=tuple(np.asarray(x0, dtype=float)), **record)
             for s, e in _chunk_ranges(n_paths)]
    if jobs <= 1 or len(tasks) == 1:
        pieces = [_run_path_chunk(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            pieces = list(pool.map(_run_path_chunk, tasks))
    return _merge_chunks(n_paths, pieces)


def _apply_budget(label: str, mask: np.ndarray):
    n_failed = int(len(mask) - np.count_nonzero(mask))
    if n_failed > FAILURE_BUDGET * len(mask):
        raise SimulationBudgetError(
            f"{label}: {n_failed}/{len(mask)} paths failed (> {FAILURE_BUDGET:.1%})")
    return n_failed


def _key_of(obj) -> str:
    return obj.label if hasattr(obj, "label") else str(obj)


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def ibp_check(geom: GeometryModel, F, G, h, n_paths: int, grid: TimeGrid,
              seed: int, *, r0: float = 1.0, jobs: int = 1) -> McReport:
    """Integration-by-parts balance over bridge paths.

    lhs_i = G dF(u h) + F dG(u h), rhs_i = F G * divergence weight; both sides
    share paths, so the z-score uses the paired standard error.
    """
    reports = ibp_battery(geom, [(F, G, h)], n_paths, grid, seed, r0=r0,
                          jobs=jobs)
    return reports[0]


def ibp_battery(geom: GeometryModel, combos, n_paths: int, grid: TimeGrid,
                seed: int, *, r0: float = 1.0, jobs: int = 1) -> list[McReport]:
    """Several (F, G, h) integration-by-parts checks over one shared set of
    bridge paths (common random numbers across the battery)."""
    t0 = time.perf_counter()
    keys = [(_key_of(F), _key_of(G), _key_of(h)) for F, G, h in combos]
    f_keys = tuple(dict.fromkeys(k for f, g, _ in keys for k in (f, g)))
    diff_pairs = tuple(dict.fromkeys(
        p for f, g, h in keys for p in ((f, h), (g, h))))
    div_specs = tuple(dict.fromkeys((h, "direct") for _, _, h in keys))
    x0 = _default_x0(geom, r0)
    merged, mask = _run_paths(
        geom, grid, "bridge", seed, n_paths, x0, jobs=jobs,
        functional_keys=f_keys, diff_pairs=diff_pairs, divergences=div_specs)
    wall = time.perf_counter() - t0
    reports = []
    for f_key, g_key, h_key in keys:
        label = f"ibp[{geom.kind}{geom.dim},F={f_key},G={g_key},h={h_key}]"
        n_failed = _apply_budget(label, mask)
        Fv = merged[f"val:{f_key}"][mask]
        dF = merged[f"diff:{f_key}|{h_key}"][mask]
        Gv = merged[f"val:{g_key}"][mask]
        dG = merged[f"diff:{g_key}|{h_key}"][mask]
        div = merged[f"div_direct:{h_key}"][mask]
        lhs = Gv * dF + Fv * dG
        rhs = Fv * Gv * div
        reports.append(_paired_report(label, lhs, rhs, grid, seed, n_failed,
                                      wall_time=wall))
    return reports


def divergence_mean_check(geom: GeometryModel, h, n_paths: int, grid: TimeGrid,
                          seed: int, *, r0: float = 1.0, jobs: int = 1) -> McReport:
    """E[divergence weight] = 0: the constant-functional case of the balance."""
    t0 = time.perf_counter()
    h_key = _key_of(h)
    x0 = _default_x0(geom, r0)
    merged, mask = _run_paths(geom, grid, "bridge", seed, n_paths, x0, jobs=jobs,
                              divergences=((h_key, "direct"),))
    label = f"divergence-mean[{geom.kind}{geom.dim},h={h_key}]"
    n_failed = _apply_budget(label, mask)
    div = merged[f"div_direct:{h_key}"][mask]
    return _paired_report(label, div, np.zeros_like(div), grid, seed, n_failed,
                          wall_time=time.perf_counter() - t0)


def girsanov_check(geom: GeometryModel, t: float, g, n_paths: int,
                   grid: TimeGrid, seed: int, *, r0: float = 1.0,
                   jobs: int = 1) -> McReport:
    """Reweighted free paths against bridge paths at one time slice.

    lhs = E_free[M_t g(x_t)] with M_t = k_{1-t}(x_t)/k_1(x_0) exp(-int Phi),
    rhs = E_bridge[g(x_t)]; E[M_t] itself is reported in extra.
    """
    if not (0.0 < t <= grid.nodes[-1] + 1e-12):
        raise ValueError(f"slice time {t} must lie in (0, 1 - eps_end]")
    t0 = time.perf_counter()
    g_key = _key_of(g)
    x0 = _default_x0(geom, r0)
    k_t = grid.nearest_index(t)
    t_snap = float(grid.nodes[k_t])

    free, free_mask = _run_paths(
        geom, grid, "free", seed, n_paths, x0, jobs=jobs,
        functional_keys=(g_key,), snapshot_times=(t_snap,),
        phi_integral_to=t_snap)
    bridge, bridge_mask = _run_paths(
        geom, grid, "bridge", seed, n_paths, x0, jobs=jobs,
        functional_keys=(g_key,))
    label = f"girsanov[{geom.kind}{geom.dim},t={t:g},g={g_key}]"
    n_failed = _apply_budget(label, free_mask) + _apply_budget(label, bridge_mask)

    r_free = free[f"r:{t_snap:g}"][free_mask]
    log_m = (geometry.log_k_values(geom, 1.0 - t_snap, r_free)
             - geometry.log_k_values(geom, 1.0, np.array([r0]))[0]
             - free["phi_integral"][free_mask])
    m_t = np.exp(log_m)
    lhs = m_t * free[f"val:{g_key}"][free_mask]
    rhs = bridge[f"val:{g_key}"][bridge_mask]
    mean_m, se_m = mc_mean_se(m_t)
    return _unpaired_report(label, lhs, rhs, grid, seed, n_failed,
                            wall_time=time.perf_counter() - t0,
                            extra={"mean_M": mean_m, "se_M": se_m,
                                   "t_snap": t_snap})


def radial_law_check(geom: GeometryModel, t_slices, n_paths: int,
                     grid: TimeGrid, seed: int, *, r0: float = 1.0,
                     jobs: int = 1) -> list[McReport]:
    """Bridge radial moments against the one-dimensional Bessel-bridge oracle.

    Two reports per slice (first and second moment); the oracle runs on the
    same grid with its own noise streams, so the z-scores are unpaired.
    """
    t0 = time.perf_counter()
    x0 = _default_x0(geom, r0)
    t_slices = tuple(float(t) for t in t_slices)
    merged, mask = _run_paths(geom, grid, "bridge", seed, n_paths, x0,
                              jobs=jobs, snapshot_times=t_slices)
    base = f"radial[{geom.kind}{geom.dim},r0={r0:g}]"
    n_failed = _apply_budget(base, mask)
    indices = [grid.nearest_index(t) for t in t_slices]
    oracle = simulate_bessel_batch(geom.dim, r0, grid, seed=seed,
                                   n_paths=n_paths, node_indices=indices)
    reports = []
    for j, t in enumerate(t_slices):
        r_bridge = merged[f"r:{t:g}"][mask]
        r_oracle = oracle[:, j]
        wall = time.perf_counter() - t0
        reports.append(_unpaired_report(
            f"{base}/t={t:g}/E[r]", r_bridge, r_oracle, grid, seed,
            n_failed, wall_time=wall))
        extra = {}
        if geom.growth_constant_a > 0:
            exp_m, exp_se = mc_mean_se(
                np.exp(2.0 * geom.growth_constant_a * r_bridge**2))
            extra = {"exp_moment_2a_r2": exp_m, "exp_moment_se": exp_se}
        reports.append(_unpaired_report(
            f"{base}/t={t:g}/E[r^2]", r_bridge**2, r_oracle**2, grid, seed,
            n_failed, wall_time=wall, extra=extra))
    return reports


@dataclass
class DecayRow:
    t: float
    moment: float
    se: float


@dataclass
class DecayTable:
    """Second moments of the kernel-gradient pairing along late times."""

    label: str
    rows: list[DecayRow]
    margins: list[float]            # (m_i - m_{i+1}) / (3 * combined se)
    decreasing: bool                # every consecutive margin > 1
    n_paths: int
    n_failed: int
    grid_meta: dict
    seed: int
    wall_time: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "label": self.label,
            "rows": [{"t": r.t, "m": r.moment, "se": r.se} for r in self.rows],
            "margins": self.margins,
            "decreasing": self.decreasing,
            "n_paths": self.n_paths,
            "n_failed": self.n_failed,
            "steps": self.grid_meta.get("steps"),
            "eps_end": self.grid_meta.get("eps_end"),
            "refinement": self.grid_meta.get("refinement"),
            "ratio": self.grid_meta.get("ratio"),
            "seed": self.seed,
            "wall_time": self.wall_time,
        }

    @property
    def passed(self) -> bool:
        return self.decreasing


def endpoint_decay_check(geom: GeometryModel, h, ts, n_paths: int,
                         grid: TimeGrid, seed: int, *, r0: float = 1.0,
                         jobs: int = 1) -> DecayTable:
    """m(t) = E[<grad log k_{1-t}(x_t), u_t h(t)>^2] along late times.

    For pinned h the moments must decrease toward the terminal time; a
    direction with h(1) != 0 shows no such decay (negative control).
    """
    t0 = time.perf_counter()
    h_key = _key_of(h)
    ts = tuple(float(t) for t in ts)
    x0 = _default_x0(geom, r0)
    merged, mask = _run_paths(geom, grid, "bridge", seed, n_paths, x0,
                              jobs=jobs, decay=(h_key, ts))
    label = f"decay[{geom.kind}{geom.dim},h={h_key}]"
    n_failed = _apply_budget(label, mask)
    rows = []
    for t in ts:
        y2 = merged[f"decay:{t:g}"][mask] ** 2
        m, se = mc_mean_se(y2)
        rows.append(DecayRow(t=t, moment=m, se=se))
    margins = []
    for a, b in zip(rows[:-1], rows[1:]):
        combined = float(np.sqrt(a.se**2 + b.se**2))
        margins.append((a.moment - b.moment) / (3.0 * combined)
                       if combined > 0 else float("inf"))
    return DecayTable(label=label, rows=rows, margins=margins,
                      decreasing=all(m > 1.0 for m in margins),
                      n_paths=int(np.count_nonzero(mask)), n_failed=n_failed,
                      grid_meta=grid.meta(), seed=seed,
                      wall_time=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Deterministic identity suite
# ---------------------------------------------------------------------------

@dataclass
class IdentityRecord:
    name: str
    where: str
    value_a: float
    value_b: float
    error: float                 # |a-b| / max(|a|, |b|, 1)
    tol: float
    passed: bool


@dataclass
class IdentityReport:
    label: str
    records: list[IdentityRecord]
    audit: dict
    wall_time: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def failures(self) -> list[IdentityRecord]:
        return [r for r in self.records if not r.passed]

    def to_rows(self) -> list[dict]:
        return [{"name": r.name, "where": r.where, "lhs": r.value_a,
                 "rhs": r.value_b, "error": r.error, "tol": r.tol,
                 "passed": r.passed} for r in self.records]


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def identity_suite(geom: GeometryModel, sample_points, taus,
                   fd_cross_check: bool = True) -> IdentityReport:
    """Deterministic identity checks at the given chart points and times.

    Covers: Laplacian/time-derivative/gradient-norm of log k against finite
    differences and against their expansion formulas; the scalar identity
    1/2 Lap log k + d_s log k + 1/2 |grad log k|^2 = Phi in closed form and
    against finite differences; Phi against 1/2 J^(1/2) Lap J^(-1/2) and (for
    hyperbolic) against the model-space closed form; the two routes to
    Lap r; the Frobenius-norm bound on Hess r; and the boundedness audits for
    the curvature, potential, and growth conditions.
    """
    from . import finitediff as fd

    t_start = time.perf_counter()
    records: list[IdentityRecord] = []
    n = geom.dim

    def add(name, where, a, b, tol):
        err = _rel_err(a, b)
        records.append(IdentityRecord(name=name, where=where, value_a=float(a),
                                      value_b=float(b), error=err, tol=tol,
                                      passed=err < tol))

    for x in sample_points:
        x = np.asarray(x, dtype=float)
        r = geometry.radius(x)
        where_x = f"r={r:.4f}"
        gmat = geometry.metric_at(geom, x)
        ginv = geometry.metric_inverse_at(geom, x)
        jd = geometry.jacobian_data(geom, x)
        pd = geometry.phi_data(geom, x)

        # (vi) two routes to Lap r
        if n >= 2:
            rd = geometry.radial_data(geom, x)
            lap_r_trace = float(np.einsum('ij,ij->', ginv, rd.hess_r))
            lap_r_alt = (n - 1) / r + float(rd.grad_r @ gmat @ jd.grad_log_J)
            add("lap_r_two_routes", where_x, lap_r_trace, lap_r_alt, 1e-10)

            # (vii) Frobenius bound |Hess r|_F <= Lap r / sqrt(n-1)
            mixed = ginv @ rd.hess_r
            frob = float(np.sqrt(np.einsum('ij,ji->', mixed, mixed)))
            bound = lap_r_trace / np.sqrt(n - 1)
            add("hess_r_frobenius_bound", where_x, min(frob, bound), bound, 1e-10)

        # (v) Phi definition cross-checks
        if fd_cross_check:
            add("phi_vs_fd_laplacian", where_x, pd.phi, fd.phi_fd(geom, x), 1e-5)
        if geom.kind == "hyperbolic" and not geom.is_flat:
            closed = float(geometry.hyperbolic_phi_closed_form(
                n, geom.curvature_scale, r))
            add("phi_vs_hyperbolic_closed_form", where_x, pd.phi, closed, 1e-10)

        for tau in taus:
            where = f"r={r:.4f},tau={tau:g}"
            lk = geometry.log_k_data(geom, tau, x)
            lap_k = float(np.einsum('ij,ij->', ginv, lk.hess_log_k))
            grad_norm2 = float(lk.grad_log_k @ gmat @ lk.grad_log_k)

            # (iii) gradient-norm expansion and (i) Laplacian expansion;
            # <grad r, grad log J> reduces to the radial pairing
            rad_pair = float(np.dot(x / r, jd.grad_log_J)) if r > 0 else 0.0
            expand_norm = (r * r / tau**2 + 0.25 * float(jd.grad_log_J @ gmat @ jd.grad_log_J)
                           + r * rad_pair / tau)
            add("grad_log_k_norm_expansion", where, grad_norm2, expand_norm, 1e-10)
            expand_lap = -n / tau - r * rad_pair / tau - 0.5 * jd.lap_log_J
            add("lap_log_k_expansion", where, lap_k, expand_lap, 1e-10)

            # (ii) time derivative: closed form and finite difference
            if fd_cross_check:
                add("dtime_log_k_vs_fd", where, lk.dtime_log_k,
                    fd.dtime_log_k_fd(geom, tau, x), 1e-6)

            # (iv) the scalar identity, closed form then FD route
            lhs = 0.5 * lap_k + lk.dtime_log_k + 0.5 * grad_norm2
            err = abs(lhs - pd.phi) / max(abs(pd.phi), 1.0)
            records.append(IdentityRecord(
                name="kernel_pde_identity", where=where, value_a=float(lhs),
                value_b=float(pd.phi), error=err, tol=1e-8, passed=err < 1e-8))
            if fd_cross_check:
                def log_k_scalar(y, _tau=tau):
                    return geometry.log_k_values(geom, _tau, np.linalg.norm(y))
                lap_fd = fd.laplace_beltrami_fd(geom, log_k_scalar, x)
                add("lap_log_k_vs_fd", where, lap_k, lap_fd, 1e-5)
                grad_fd = fd.grad_fd(log_k_scalar, x)
                gn_fd = float(grad_fd @ ginv @ grad_fd)
                lhs_fd = (0.5 * lap_fd + fd.dtime_log_k_fd(geom, tau, x)
                          + 0.5 * gn_fd)
                err_fd = abs(lhs_fd - pd.phi) / max(abs(pd.phi), 1.0)
                records.append(IdentityRecord(
                    name="kernel_pde_identity_fd", where=where,
                    value_a=float(lhs_fd), value_b=float(pd.phi), error=err_fd,
                    tol=1e-5, passed=err_fd < 1e-5))

    # (viii) boundedness audits, reported rather than asserted
    radii = np.linspace(0.05, 5.0, 120)
    audit_data = geometry.condition_audit(geom, radii)
    audit = {
        "ricci_min": audit_data.ricci_min,
        "ricci_max": audit_data.ricci_max,
        "phi_min": audit_data.phi_min,
        "growth_ratio_max": audit_data.growth_ratio_max,
        "growth_constant_a": geom.growth_constant_a,
    }
    return IdentityReport(label=f"identities[{geom.kind}{geom.dim}]",
                          records=records, audit=audit,
                          wall_time=time.perf_counter() - t_start)


# ---------------------------------------------------------------------------
# Representation equivalence under grid refinement
# ---------------------------------------------------------------------------

@dataclass
class EquivRow:
    steps: int
    gap_mean: float
    gap_se: float


@dataclass
class EquivReport:
    """Mean pathwise gap between the two divergence representations per grid."""

    label: str
    rows: list[EquivRow]
    monotone: bool
    n_paths: int
    seed: int
    wall_time: float = 0.0

    @property
    def passed(self) -> bool:
        return self.monotone

    def to_json_dict(self) -> dict:
        return {"label": self.label,
                "rows": [{"steps": r.steps, "gap": r.gap_mean, "se": r.gap_se}
                         for r in self.rows],
                "monotone": self.monotone, "n_paths": self.n_paths,
                "seed": self.seed, "wall_time": self.wall_time}


def representation_equiv_check(geom: GeometryModel, h, n_paths: int, grids,
                               seed: int, *, r0: float = 1.0,
                               jobs: int = 1) -> EquivReport:
    """Both divergence routes discretize one identity; the gap must shrink as
    the step count doubles.  grids: list of TimeGrid or step counts."""
    t0 = time.perf_counter()
    h_key = _key_of(h)
    x0 = _default_x0(geom, r0)
    rows = []
    for g in grids:
        grid = g if isinstance(g, TimeGrid) else make_time_grid(
            int(g), 1e-4, "geometric", 0.9)
        merged, mask = _run_paths(geom, grid, "bridge", seed, n_paths, x0,
                                  jobs=jobs, divergences=((h_key, "both"),))
        _apply_budget("representation_equiv", mask)
        gap = np.abs(merged[f"div_direct:{h_key}"][mask]
                     - merged[f"div_lemma1:{h_key}"][mask])
        m, se = mc_mean_se(gap)
        rows.append(EquivRow(steps=grid.steps, gap_mean=m, gap_se=se))
    monotone = all(a.gap_mean > b.gap_mean for a, b in zip(rows[:-1], rows[1:]))
    return EquivReport(label=f"equiv[{geom.kind}{geom.dim},h={h_key}]",
                       rows=rows, monotone=monotone, n_paths=n_paths,
                       seed=seed, wall_time=time.perf_counter() - t0)
