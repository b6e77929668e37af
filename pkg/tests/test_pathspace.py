"""Directions, cylindrical functionals, differentials and divergence weights."""

import numpy as np
import pytest

from polebridge import bridge, geometry as geo, pathspace as ps


def make_zero_direction(dim):
    def h(s):
        s = np.asarray(s, dtype=float)
        return np.zeros(s.shape + (dim,))
    return ps.CMDirection(label="zero", dim=dim, h=h, hdot=h, h_norm=0.0,
                          pinned=True)


# ---------------------------------------------------------------------------
# Cameron-Martin directions
# ---------------------------------------------------------------------------

def test_sine_basis_values():
    h = ps.cm_basis(1, 1, 3)
    assert np.allclose(h.h(0.5), [np.sqrt(2) / np.pi, 0, 0])
    assert np.allclose(h.h(0.0), 0.0)
    assert np.allclose(h.h(1.0), 0.0, atol=1e-15)
    h2 = ps.cm_basis(2, 1, 2)
    assert np.allclose(h2.h(0.5), 0.0, atol=1e-15)


def test_sine_basis_unit_h1_norm():
    for k in (1, 2, 5):
        for axis in (1, 2):
            h = ps.cm_basis(k, axis, 2)
            assert ps.h1_norm(h) == pytest.approx(1.0, abs=1e-8)
            assert h.pinned


def test_linear_direction_not_pinned():
    h = ps.cm_linear(1, 2)
    assert not h.pinned
    assert np.allclose(h.h(1.0), [1.0, 0.0])
    assert ps.h1_norm(h) == pytest.approx(1.0, abs=1e-10)


def test_direction_registry():
    h = ps.direction_from_key("sine(2,1)", 3)
    assert h.label == "sine(2,1)"
    assert ps.direction_from_key("linear(2)", 2).label == "linear(2)"
    with pytest.raises(ps.RegistryError, match="sine"):
        ps.direction_from_key("wiggle(1)", 2)
    with pytest.raises(ps.RegistryError):
        ps.direction_from_key("sine(0,1)", 2)
    with pytest.raises(ps.RegistryError):
        ps.direction_from_key("sine(1,5)", 2)


# ---------------------------------------------------------------------------
# functionals
# ---------------------------------------------------------------------------

def test_functional_registry_parsing():
    F = ps.functional_from_key("coord(1,1,0.5)", 2)
    assert F.times == (0.5,)
    pts = np.array([[0.3, -0.7]])
    assert F.value(pts) == pytest.approx(0.3)
    G = ps.functional_from_key("product(coord(1,1,0.5),dist2(0.75))", 2)
    assert G.times == (0.5, 0.75)
    pts2 = np.array([[2.0, 0.0], [1.0, 1.0]])
    assert G.value(pts2) == pytest.approx(2.0 * 2.0)
    # labels round-trip through the parser
    again = ps.functional_from_key(G.label, 2)
    assert again.times == G.times
    with pytest.raises(ps.RegistryError, match="available"):
        ps.functional_from_key("nope(0.5)", 2)
    with pytest.raises(ps.RegistryError):
        ps.functional_from_key("coord(1,1,1.5)", 2)


def test_functional_batched_evaluation():
    F = ps.functional_from_key("dist2(0.5)", 2)
    pts = np.arange(12.0).reshape(3, 1, 2)
    vals = F.value(pts)
    assert vals.shape == (3,)
    assert np.allclose(vals, [1.0, 41.0, 145.0])
    parts = F.partials(pts)
    assert parts.shape == (3, 1, 2)
    assert np.allclose(parts, 2 * pts)


def test_functional_fd_fallback_matches_closed_partials():
    keys = ["coord(2,1,0.3)", "dist2(0.5)", "bump(0.7)",
            "product(coord(1,2,0.25),bump(0.6))"]
    rng = np.random.default_rng(0)
    for key in keys:
        F = ps.functional_from_key(key, 2)
        pts = rng.normal(size=(F.n_slots, 2))
        closed = F.partials(pts)
        approx = F.fd_partials(pts)
        scale = max(np.max(np.abs(closed)), 1.0)
        assert np.max(np.abs(closed - approx)) / scale < 1e-6


def test_functional_g_gradients_use_inverse_metric():
    g = geo.hyperbolic(2, 1.0)
    F = ps.functional_from_key("coord(1,2,0.5)", 2)
    pts = np.array([[1.0, 0.5]])
    grads = F.g_gradients(g, pts)
    expected = geo.metric_inverse_at(g, pts[0]) @ F.partials(pts)[0]
    assert np.allclose(grads[0], expected)


def test_green_functions():
    assert ps.green_based(0.5, 0.5) == pytest.approx(0.5)
    assert ps.green_pinned(0.5, 0.5) == pytest.approx(0.25)
    assert ps.green_pinned(0.25, 0.75) == pytest.approx(0.25 - 0.1875)
    # pinned Green function vanishes when either argument is 0 or 1
    for s in (0.0, 1.0):
        for t in (0.0, 0.3, 1.0):
            assert ps.green_pinned(s, t) == pytest.approx(0.0, abs=1e-15)


# ---------------------------------------------------------------------------
# differentials along paths
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def flat_path():
    g = geo.euclidean(2)
    grid = bridge.make_time_grid(400, 1e-4, "geometric", 0.9)
    return g, bridge.simulate_bridge(g, [1.0, 0.0], grid, 17)


def test_differential_constant_functional_is_zero(flat_path):
    g, path = flat_path
    F = ps.functional_from_key("one", 2)
    assert ps.differential_along(F, path, ps.cm_basis(1, 1, 2)) == 0.0


def test_differential_flat_coordinate_value(flat_path):
    g, path = flat_path
    F = ps.functional_from_key("coord(1,1,0.5)", 2)
    val = ps.differential_along(F, path, ps.cm_basis(1, 1, 2))
    assert val == pytest.approx(np.sqrt(2) / np.pi, abs=1e-5)
    # a grid whose last node is exactly 0.5 makes sine(2,1) vanish there
    g2 = geo.euclidean(2)
    grid_half = bridge.make_time_grid(100, 0.5, "uniform")
    path_half = bridge.simulate_bridge(g2, [1.0, 0.0], grid_half, 19)
    val2 = ps.differential_along(F, path_half, ps.cm_basis(2, 1, 2))
    assert val2 == pytest.approx(0.0, abs=1e-12)


def test_differential_linear_in_direction_and_gradient(flat_path):
    g, path = flat_path
    F = ps.functional_from_key("dist2(0.5)", 2)
    h = ps.cm_basis(1, 1, 2)
    base = ps.differential_along(F, path, h)

    def scaled(s):
        return 3.0 * h.h(s)

    def scaled_dot(s):
        return 3.0 * h.hdot(s)

    h3 = ps.CMDirection(label="3h", dim=2, h=scaled, hdot=scaled_dot,
                        h_norm=3.0, pinned=True)
    assert ps.differential_along(F, path, h3) == pytest.approx(3.0 * base,
                                                               rel=1e-12)
    F2 = ps.functional_product_scale = ps.functional_from_key(
        "product(dist2(0.5),one)", 2)
    assert ps.differential_along(F2, path, h) == pytest.approx(base, rel=1e-12)


def test_differential_rejects_times_outside_grid(flat_path):
    g, path = flat_path
    F = ps.functional_from_key("coord(1,1,0.99999)", 2)
    with pytest.raises(ValueError):
        ps.differential_along(F, path, ps.cm_basis(1, 1, 2))


# ---------------------------------------------------------------------------
# green-function gradient norms
# ---------------------------------------------------------------------------

def test_green_norm_single_time(flat_path):
    g, path = flat_path
    # unit gradient: the coordinate functional in flat space
    F = ps.functional_from_key("coord(1,1,0.5)", 2)
    pinned = ps.green_gradient_norm(g, F, path, "pinned")
    based = ps.green_gradient_norm(g, F, path, "based")
    t = path.grid.nodes[path.grid.nearest_index(0.5)]
    assert pinned == pytest.approx(t - t * t, rel=1e-10)
    assert based == pytest.approx(t, rel=1e-10)


def test_green_norm_constant_zero_and_two_slots(flat_path):
    g, path = flat_path
    assert ps.green_gradient_norm(g, ps.functional_from_key("one", 2), path) == 0.0
    # orthogonal unit gradients at 0.25 and 0.75: only diagonal terms
    F = ps.functional_from_key("product(coord(1,1,0.25),coord(1,2,0.75))", 2)
    val = ps.green_gradient_norm(g, F, path, "pinned")
    x1 = path.points[path.grid.nearest_index(0.25)]
    x2 = path.points[path.grid.nearest_index(0.75)]
    t1 = path.grid.nodes[path.grid.nearest_index(0.25)]
    t2 = path.grid.nodes[path.grid.nearest_index(0.75)]
    g0 = ps.green_pinned
    expected = (g0(t1, t1) * x2[1] ** 2 + g0(t2, t2) * x1[0] ** 2
                + 2 * g0(t1, t2) * x2[1] * 0.0 * x1[0])   # cross gradients orthogonal
    assert val == pytest.approx(expected, rel=1e-10)


def test_green_norm_slot_permutation_symmetry(flat_path):
    g, path = flat_path
    a = ps.functional_from_key("product(coord(1,1,0.25),dist2(0.75))", 2)
    b = ps.functional_from_key("product(dist2(0.75),coord(1,1,0.25))", 2)
    va = ps.green_gradient_norm(g, a, path, "pinned")
    vb = ps.green_gradient_norm(g, b, path, "pinned")
    assert va == pytest.approx(vb, rel=1e-12)


def test_green_norm_rejects_unknown_kind(flat_path):
    g, path = flat_path
    F = ps.functional_from_key("dist2(0.5)", 2)
    with pytest.raises(ValueError):
        ps.green_gradient_norm(g, F, path, "loop")


# ---------------------------------------------------------------------------
# divergence weights
# ---------------------------------------------------------------------------

def test_divergence_zero_direction(flat_path):
    g, path = flat_path
    h0 = make_zero_direction(2)
    direct = ps.divergence_direct(g, path, h0)
    lemma = ps.divergence_lemma1(g, path, h0)
    assert direct.total == 0.0
    assert lemma.total == 0.0
    assert lemma.hessian_term == 0.0


def test_divergence_flat_has_no_phi_or_ric_term(flat_path):
    g, path = flat_path
    h = ps.cm_basis(1, 1, 2)
    direct = ps.divergence_direct(g, path, h)
    assert direct.phi_term == 0.0
    assert direct.hessian_term == 0.0
    # martingale term equals the plain sum of <h', dB~>
    K = path.grid.steps
    ts = path.grid.nodes[:K]
    manual = float(np.einsum('ki,ki->', h.hdot(ts), path.dB_tilde))
    assert direct.martingale_term == pytest.approx(manual, rel=1e-12)


def test_divergence_requires_bridge_path():
    g = geo.euclidean(2)
    grid = bridge.make_time_grid(20, 1e-2)
    free = bridge.simulate_bm(g, [1.0, 0.0], grid, 3)
    with pytest.raises(ValueError):
        ps.divergence_direct(g, free, ps.cm_basis(1, 1, 2))


def test_divergence_mean_zero_flat(flat_path):
    g, _ = flat_path
    grid = bridge.make_time_grid(200, 1e-3, "geometric", 0.9)
    h = ps.cm_basis(1, 1, 2)
    acc = ps.DivergenceAccumulator(g, h, "direct")
    bridge.simulate_batch(g, [1.0, 0.0], grid, kind="bridge", seed=23,
                          n_paths=3000, observers=[acc])
    totals = acc.totals_direct()
    assert abs(totals.mean()) < 3 * totals.std(ddof=1) / np.sqrt(len(totals))


def test_accumulator_matches_single_path_ops():
    # the streaming accumulators and the stored-path operations must agree
    for g in (geo.euclidean(2), geo.hyperbolic(2, 1.0), geo.warped(3, "cubic")):
        grid = bridge.make_time_grid(60, 1e-3, "geometric", 0.9)
        h = ps.cm_basis(1, 1, g.dim)
        acc = ps.DivergenceAccumulator(g, h, "both")
        x0 = np.full(g.dim, 0.7)
        bridge.simulate_batch(g, x0, grid, kind="bridge", seed=31, n_paths=3,
                              observers=[acc])
        for i in range(3):
            sample = bridge.simulate_bridge(
                g, x0, grid, bridge.path_stream(31, i, bridge.ROLE_BRIDGE))
            direct = ps.divergence_direct(g, sample, h)
            lemma = ps.divergence_lemma1(g, sample, h)
            assert acc.totals_direct()[i] == pytest.approx(direct.total,
                                                           rel=1e-10, abs=1e-12)
            assert acc.totals_lemma1()[i] == pytest.approx(lemma.total,
                                                           rel=1e-10, abs=1e-12)


def test_divergence_gap_shrinks_with_dt(flat_path):
    g, _ = flat_path
    h = ps.cm_basis(1, 1, 2)
    gaps = []
    for steps in (50, 100, 200):
        grid = bridge.make_time_grid(steps, 1e-3, "geometric", 0.9)
        acc = ps.DivergenceAccumulator(g, h, "both")
        bridge.simulate_batch(g, [1.0, 0.0], grid, kind="bridge", seed=37,
                              n_paths=400, observers=[acc])
        gaps.append(np.abs(acc.totals_direct() - acc.totals_lemma1()).mean())
    assert gaps[0] > gaps[1] > gaps[2]


def test_kernel_gradient_pairing_matches_manual():
    g = geo.hyperbolic(2, 1.0)
    grid = bridge.make_time_grid(100, 1e-3, "geometric", 0.9)
    sample = bridge.simulate_bridge(g, [1.0, 0.0], grid, 41)
    h = ps.cm_basis(1, 1, 2)
    k = grid.nearest_index(0.9)
    t = float(grid.nodes[k])
    got = ps.kernel_gradient_pairing(g, t, sample.points[k][None],
                                     sample.frames[k][None], h)[0]
    lk = geo.log_k_data(g, 1.0 - t, sample.points[k])
    manual = float(lk.grad_log_k @ (sample.frames[k] @ h.h(np.asarray(t))))
    assert got == pytest.approx(manual, rel=1e-12)
