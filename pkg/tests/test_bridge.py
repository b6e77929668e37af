"""Time grids, the horizontal integrator, and the radial oracle."""

import numpy as np
import pytest

from polebridge import bridge, geometry as geo
from polebridge.pathspace import SnapshotObserver


# ---------------------------------------------------------------------------
# time grids
# ---------------------------------------------------------------------------

def test_uniform_grid_small_example():
    grid = bridge.make_time_grid(2, 0.5, "uniform")
    assert np.allclose(grid.nodes, [0.0, 0.25, 0.5])


def test_uniform_grid_node_count_and_spacing():
    grid = bridge.make_time_grid(1000, 1e-4, "uniform")
    assert len(grid.nodes) == 1001
    assert np.allclose(grid.dts, (1.0 - 1e-4) / 1000)
    assert grid.nodes[-1] == pytest.approx(1.0 - 1e-4, abs=1e-15)


def test_geometric_grid_tail_ratio():
    grid = bridge.make_time_grid(1000, 1e-4, "geometric", 0.99)
    tau = 1.0 - grid.nodes
    # deep in the refinement zone the remaining time decays by the ratio
    tail = tau[-50:]
    assert np.allclose(tail[1:] / tail[:-1], 0.99, atol=1e-9)
    assert grid.nodes[-1] == pytest.approx(1.0 - 1e-4, abs=1e-12)
    assert np.all(np.diff(grid.nodes) > 0)


def test_geometric_grid_junction_is_smooth():
    grid = bridge.make_time_grid(2000, 1e-4, "geometric", 0.9)
    dts = grid.dts
    # no step jumps by more than the geometric factor anywhere
    ratios = dts[1:] / dts[:-1]
    assert ratios.max() < 1.5 and ratios.min() > 0.5


def test_grid_rejects_bad_parameters():
    with pytest.raises(ValueError):
        bridge.make_time_grid(1, 0.1)
    with pytest.raises(ValueError):
        bridge.make_time_grid(10, 0.7)
    with pytest.raises(ValueError):
        bridge.make_time_grid(10, 0.1, "geometric", 1.5)
    with pytest.raises(ValueError):
        bridge.make_time_grid(10, 0.1, "weird")


def test_nearest_index_snapping():
    grid = bridge.make_time_grid(10, 0.5, "uniform")
    assert grid.nearest_index(0.26) == 5
    assert grid.nearest_index(0.0) == 0
    with pytest.raises(ValueError):
        grid.nearest_index(0.9)


# ---------------------------------------------------------------------------
# noise streams
# ---------------------------------------------------------------------------

def test_path_streams_reproducible_and_distinct():
    a1 = bridge.path_stream(7, 3).standard_normal(8)
    a2 = bridge.path_stream(7, 3).standard_normal(8)
    b = bridge.path_stream(7, 4).standard_normal(8)
    c = bridge.path_stream(7, 3, role=bridge.ROLE_FREE).standard_normal(8)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    assert not np.array_equal(a1, c)


def test_path_stream_rejects_bad_seed():
    with pytest.raises(ValueError):
        bridge.path_stream(-1, 0)
    with pytest.raises(ValueError):
        bridge.path_stream(2**63, 0)


# ---------------------------------------------------------------------------
# single-step operations
# ---------------------------------------------------------------------------

def test_heun_step_flat_zero_noise_is_identity():
    g = geo.euclidean(2)
    state = bridge.FrameState(point=np.array([0.5, 0.2]), frame=np.eye(2))
    out = bridge.horizontal_heun_step(g, state, np.zeros(2), 0.01)
    assert np.allclose(out.point, state.point)
    assert np.allclose(out.frame, np.eye(2))


def test_heun_step_flat_translates_point():
    g = geo.euclidean(3)
    state = bridge.FrameState(point=np.zeros(3), frame=np.eye(3))
    v = np.array([0.1, -0.2, 0.05])
    out = bridge.horizontal_heun_step(g, state, v, 0.01)
    assert np.allclose(out.point, v)
    assert np.allclose(out.frame, np.eye(3))


def test_reorthonormalize_examples():
    g = geo.euclidean(2)
    state = bridge.FrameState(point=np.array([1.0, 0.0]), frame=np.eye(2))
    out = bridge.reorthonormalize(g, state)
    assert np.allclose(out.frame, np.eye(2))
    state2 = bridge.FrameState(point=np.array([1.0, 0.0]), frame=2 * np.eye(2))
    out2 = bridge.reorthonormalize(g, state2)
    assert np.allclose(out2.frame, np.eye(2))


def test_reorthonormalize_fixes_small_perturbations():
    g = geo.hyperbolic(2, 1.0)
    rng = np.random.default_rng(4)
    x = np.array([0.8, -0.3])
    base = bridge._initial_frame(g, x)
    for _ in range(5):
        frame = base + 1e-4 * rng.normal(size=(2, 2))
        state = bridge.reorthonormalize(g, bridge.FrameState(point=x, frame=frame))
        assert bridge.orthonormality_defect(g, state) < 1e-12
        again = bridge.reorthonormalize(g, state)
        assert np.allclose(again.frame, state.frame, atol=1e-12)


def test_reorthonormalize_singular_frame_errors():
    g = geo.euclidean(2)
    state = bridge.FrameState(point=np.zeros(2), frame=np.zeros((2, 2)))
    with pytest.raises(bridge.SimulationError):
        bridge.reorthonormalize(g, state)


# ---------------------------------------------------------------------------
# bridge simulation
# ---------------------------------------------------------------------------

def test_bridge_requires_offpole_start():
    g = geo.euclidean(2)
    grid = bridge.make_time_grid(10, 1e-2)
    with pytest.raises(ValueError):
        bridge.simulate_bridge(g, [0.0, 0.0], grid, 0)


def test_bridge_flat_marginal_law():
    g = geo.euclidean(2)
    grid = bridge.make_time_grid(300, 1e-4, "geometric", 0.9)
    k = grid.nearest_index(0.5)
    snaps = SnapshotObserver([k])
    n = 4000
    res = bridge.simulate_batch(g, [1.0, 0.0], grid, kind="bridge", seed=2,
                                n_paths=n, observers=[snaps])
    assert res.n_failed == 0
    x = snaps.points[k]
    t = grid.nodes[k]
    # mean (1-t) x0 within 3 SE per coordinate
    se = np.sqrt(t * (1 - t) / n)
    assert abs(x[:, 0].mean() - (1 - t)) < 3 * se
    assert abs(x[:, 1].mean()) < 3 * se
    # E[r^2] = (1-t)^2 r0^2 + 2 t (1-t) within 3 SE
    r2 = np.einsum('pi,pi->p', x, x)
    expected = (1 - t) ** 2 + 2 * t * (1 - t)
    assert abs(r2.mean() - expected) < 3 * r2.std(ddof=1) / np.sqrt(n)


def test_bridge_terminal_radius_small():
    g = geo.hyperbolic(2, 1.0)
    grid = bridge.make_time_grid(300, 1e-4, "geometric", 0.9)
    snaps = SnapshotObserver([grid.steps])
    bridge.simulate_batch(g, [1.0, 0.0], grid, kind="bridge", seed=3,
                          n_paths=1000, observers=[snaps])
    x = snaps.points[grid.steps]
    r2 = np.einsum('pi,pi->p', x, x)
    # E[r^2] = O(eps_end): comfortably below 10 * n * eps
    assert r2.mean() < 10 * 2 * grid.eps_end


def test_bridge_reproducible_and_matches_batch():
    g = geo.hyperbolic(2, 1.0)
    grid = bridge.make_time_grid(50, 1e-3, "geometric", 0.9)
    s1 = bridge.simulate_bridge(g, [1.0, 0.0], grid, 42)
    s2 = bridge.simulate_bridge(g, [1.0, 0.0], grid, 42)
    assert np.array_equal(s1.points, s2.points)
    assert np.array_equal(s1.dB, s2.dB)
    # a Generator seeded like path 0 reproduces the seed-mode run
    gen = bridge.path_stream(42, 0, bridge.ROLE_BRIDGE)
    s3 = bridge.simulate_bridge(g, [1.0, 0.0], grid, gen)
    assert np.allclose(s1.points, s3.points, atol=1e-15)
    assert np.array_equal(s1.dB, s3.dB)


def test_bridge_sample_shape_and_virtual_terminal():
    g = geo.euclidean(2)
    grid = bridge.make_time_grid(20, 1e-2)
    sample = bridge.simulate_bridge(g, [1.0, 0.0], grid, 5)
    assert sample.kind == "bridge"
    assert len(sample.times) == len(grid.nodes) + 1
    assert sample.times[-1] == 1.0
    assert np.allclose(sample.points[-1], 0.0)   # pinned to the pole
    assert sample.dB.shape == (20, 2)
    assert sample.dB_tilde.shape == (20, 2)


def test_bridge_dB_tilde_is_anti_development():
    g = geo.euclidean(2)
    grid = bridge.make_time_grid(40, 1e-2)
    sample = bridge.simulate_bridge(g, [1.0, 0.0], grid, 9)
    # flat frames are the identity: dB~ = dB + grad log k dt = dx
    K = grid.steps
    dx = np.diff(sample.points[:K + 1], axis=0)
    assert np.allclose(sample.dB_tilde, dx, atol=1e-12)


def test_frame_orthonormality_along_path():
    for g in (geo.hyperbolic(2, 1.0), geo.hyperbolic(3, 0.5),
              geo.warped(2, "cubic")):
        grid = bridge.make_time_grid(200, 1e-3, "geometric", 0.9)
        sample = bridge.simulate_bridge(g, np.full(g.dim, 0.8), grid, 11)
        for k in range(0, grid.steps + 1, 20):
            defect = bridge.orthonormality_defect(g, sample.state_at(k))
            assert defect < bridge.ORTHO_TOL


# ---------------------------------------------------------------------------
# free Brownian motion
# ---------------------------------------------------------------------------

def test_bm_flat_increment_moments():
    g = geo.euclidean(2)
    grid = bridge.make_time_grid(50, 1e-2, "uniform")
    snaps = SnapshotObserver([grid.steps])
    n = 3000
    bridge.simulate_batch(g, [0.5, 0.0], grid, kind="free", seed=8,
                          n_paths=n, observers=[snaps])
    x = snaps.points[grid.steps]
    t = grid.nodes[-1]
    se = np.sqrt(t / n)
    assert abs(x[:, 0].mean() - 0.5) < 3 * se
    assert abs(x[:, 1].mean()) < 3 * se
    var = x.var(axis=0, ddof=1)
    # Var per coordinate = t, chi-square SE ~ t sqrt(2/n)
    assert np.all(np.abs(var - t) < 3 * t * np.sqrt(2.0 / n))


def test_bm_free_paths_have_trivial_dB_tilde():
    g = geo.hyperbolic(2, 1.0)
    grid = bridge.make_time_grid(30, 1e-2)
    sample = bridge.simulate_bm(g, [1.0, 0.0], grid, 3)
    assert sample.kind == "free"
    assert np.array_equal(sample.dB, sample.dB_tilde)
    assert len(sample.times) == len(grid.nodes)


def test_bm_hyperbolic_spreads_faster_than_flat():
    g = geo.hyperbolic(2, 1.0)
    grid = bridge.make_time_grid(150, 1e-4, "uniform")
    indices = [grid.nearest_index(t) for t in (0.25, 0.5, 0.75)]
    snaps = SnapshotObserver(indices)
    n = 3000
    bridge.simulate_batch(g, [1e-3, 0.0], grid, kind="free", seed=13,
                          n_paths=n, observers=[snaps])
    means = []
    for k in indices:
        x = snaps.points[k]
        means.append(np.einsum('pi,pi->p', x, x).mean())
    assert means[0] < means[1] < means[2]
    # negative curvature spreads paths beyond the flat value n*t
    assert means[2] > 2 * grid.nodes[indices[2]]


def test_single_node_grid_gives_single_state():
    g = geo.euclidean(2)
    grid = bridge.TimeGrid(nodes=np.array([0.0]), eps_end=1.0,
                           refinement="uniform")
    sample = bridge.simulate_bm(g, [1.0, 0.0], grid, 1)
    assert len(sample.times) == 1
    assert np.allclose(sample.points[0], [1.0, 0.0])


# ---------------------------------------------------------------------------
# Bessel-bridge oracle
# ---------------------------------------------------------------------------

def test_bessel_bridge_flat_second_moment():
    grid = bridge.make_time_grid(400, 1e-4, "geometric", 0.9)
    k = grid.nearest_index(0.5)
    vals = bridge.simulate_bessel_batch(2, 1.0, grid, seed=5, n_paths=4000,
                                        node_indices=[k])
    r2 = vals[:, 0] ** 2
    # E[r^2] = (1-t)^2 + 2 t (1-t) = 0.75 at t = 1/2
    assert abs(r2.mean() - 0.75) < 3 * r2.std(ddof=1) / np.sqrt(len(r2))


def test_bessel_bridge_terminal_and_replay():
    grid = bridge.make_time_grid(300, 1e-4, "geometric", 0.9)
    p1 = bridge.simulate_bessel_bridge(2, 1.0, grid, 42)
    p2 = bridge.simulate_bessel_bridge(2, 1.0, grid, 42)
    assert np.array_equal(p1, p2)
    assert p1.shape == (301,)
    assert np.all(p1 > 0)
    vals = bridge.simulate_bessel_batch(3, 1.0, grid, seed=6, n_paths=2000,
                                        node_indices=[grid.steps])
    assert (vals[:, 0] ** 2).mean() < 10 * 3 * grid.eps_end


def test_bessel_batch_matches_single_path():
    grid = bridge.make_time_grid(50, 1e-2)
    single = bridge.simulate_bessel_bridge(2, 1.0, grid,
                                           bridge.path_stream(9, 4, bridge.ROLE_BESSEL))
    batch = bridge.simulate_bessel_batch(2, 1.0, grid, seed=9, n_paths=6,
                                         start_index=0)
    assert np.allclose(batch[4], single, atol=1e-15)


def test_bessel_rejects_bad_start():
    grid = bridge.make_time_grid(10, 1e-2)
    with pytest.raises(ValueError):
        bridge.simulate_bessel_bridge(2, -1.0, grid, 0)
