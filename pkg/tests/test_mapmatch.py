import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate
from scipy.sparse.csgraph import dijkstra

from stitchsmc.core import make_rng, logsumexp
from stitchsmc.mapmatch import (MapMatchingModel, MapMatchParams, NoRoadNearby, Observation, RouteMismatch,
                                RouteState, _node_graph, discretise, gamma_density, is_edge_continuous,
                                mm_rejection_bound, mm_stitch_weight, synth_route, transition_normaliser,
                                transition_unnorm, viterbi_match)
from stitchsmc.roadnet import (RoadPosition, Route, fork_network, grid_network, network_from_document,
                               shortest_road_distance)

DEFAULTS = MapMatchParams()


def _net(nodes, edges):
    return network_from_document({
        "nodes": [{"id": i, "x": x, "y": y} for i, (x, y) in nodes.items()],
        "edges": [{"id": i, "from": a, "to": b, "geometry": [list(nodes[a]), list(nodes[b])]} for i, a, b in edges]})


def _line(length):
    return _net({"a": (0.0, 0.0), "b": (length, 0.0)}, [("ab", "a", "b")])


def _objs(*states):
    out = np.empty(len(states), dtype=object)
    out[:] = list(states)
    return out


# -- distance prior and bound ---------------------------------------------------

def test_gamma_examples():
    assert gamma_density(0.0, DEFAULTS) == (0.14, 0.0)
    assert gamma_density(100.0, DEFAULTS)[1] == pytest.approx(0.86 * (0.07 / 15) * math.exp(-0.07 / 15 * 100))
    assert gamma_density(100.0, DEFAULTS)[1] == pytest.approx(0.002517, abs=5e-7)
    mass, _ = integrate.quad(lambda d: gamma_density(d, DEFAULTS)[1], 0, np.inf)
    assert mass == pytest.approx(1 - DEFAULTS.p0, rel=1e-8)


def test_rejection_bound_examples():
    assert mm_rejection_bound(DEFAULTS) == 0.14
    assert mm_rejection_bound(replace(DEFAULTS, p0=0.0)) == pytest.approx(DEFAULTS.lam)
    assert mm_rejection_bound(replace(DEFAULTS, p0=0.5, lam=2.0)) == 1.0


def test_params_validation():
    with pytest.raises(ValueError):
        MapMatchParams(p0=1.5)
    with pytest.raises(ValueError):
        MapMatchParams(sigma_gps=0.0)
    assert MapMatchParams().distance_cap(15.0) == 525.0
    assert MapMatchParams().rate(30.0) == pytest.approx(0.07 / 30)


# -- unnormalised transition --------------------------------------------------

def test_transition_unnorm_examples():
    net = _line(300.0)
    start = RoadPosition(0, 10.0)
    assert transition_unnorm(net, start, Route((0,), 10.0, 80.0, 70.0), DEFAULTS) == pytest.approx(
        gamma_density(70.0, DEFAULTS)[1])
    assert transition_unnorm(net, start, Route((0,), 10.0, 10.0, 0.0), DEFAULTS) == 0.14
    bend = _net({"a": (0.0, 0.0), "b": (30.0, 0.0), "c": (30.0, 40.0)}, [("ab", "a", "b"), ("bc", "b", "c")])
    value = transition_unnorm(bend, RoadPosition(0, 0.0), Route((0, 1), 0.0, 40.0, 70.0), DEFAULTS)
    assert value == pytest.approx(gamma_density(70.0, DEFAULTS)[1] * math.exp(-0.05 * 20))
    with pytest.raises(RouteMismatch):
        transition_unnorm(bend, RoadPosition(1, 0.0), Route((0, 1), 0.0, 40.0, 70.0), DEFAULTS)


def test_unnorm_never_exceeds_bound():
    net = grid_network(4, 4, 120.0)
    rng = np.random.default_rng(3)
    bound = mm_rejection_bound(DEFAULTS)
    for _ in range(20):
        e = int(rng.integers(net.n_edges))
        disc = discretise(net, RoadPosition(e, float(rng.uniform(0, net.lengths[e]))), DEFAULTS, 15.0)
        assert np.exp(disc.log_unnorm).max() <= bound
        assert math.exp(disc.log_atom) <= bound


# -- normaliser -------------------------------------------------------------------

def test_normaliser_closed_form_single_edge():
    ell = 400.0
    params = replace(DEFAULTS, d_max=1000.0)
    z = transition_normaliser(_line(ell), RoadPosition(0, 0.0), params)
    lam = params.lam
    exact = params.p0 + (1 - params.p0) * (1 - math.exp(-lam * ell))
    assert abs(z - exact) <= lam * params.resolution * ell


def test_normaliser_small_cap_is_atom():
    params = replace(DEFAULTS, d_max=1.0)
    z = transition_normaliser(_line(100.0), RoadPosition(0, 0.0), params)
    assert params.p0 < z <= params.p0 + (1 - params.p0) * params.lam * params.resolution


def test_normaliser_refinement():
    net = grid_network(3, 3, 200.0)
    start = RoadPosition(2, 55.0)
    z1 = transition_normaliser(net, start, DEFAULTS)
    z_half = transition_normaliser(net, start, replace(DEFAULTS, resolution=0.5))
    z_fine = transition_normaliser(net, start, replace(DEFAULTS, resolution=0.1))
    assert abs(z1 - z_fine) / z_fine < 0.02
    assert abs(z1 - z_half) < DEFAULTS.lam * DEFAULTS.resolution * DEFAULTS.distance_cap(15.0)


def test_normaliser_cache_survives_eviction():
    net = grid_network(3, 3, 200.0)
    model = MapMatchingModel(net, DEFAULTS, cache_size=2)
    values = [model.log_z(e, 20.0, 15.0) for e in range(5)]
    assert len(model._disc) == 2
    again = [model.log_z(e, 20.0, 15.0) for e in range(5)]
    assert values == again
    assert values[0] == pytest.approx(math.log(transition_normaliser(net, RoadPosition(0, 20.0), DEFAULTS)))


# -- proposal -------------------------------------------------------------------

def _state(model, edge, offset, time=0.0):
    return model.make_state(time, (edge,), offset, offset, 0.0)


def test_proposal_weight_identity():
    net = grid_network(3, 3, 200.0)
    model = MapMatchingModel(net, DEFAULTS)
    prev = _state(model, 0, 150.0)
    y = Observation(15.0, (230.0, 20.0))
    _, log_w = model.propagate(_objs(prev), y, make_rng(0))
    # independent Riemann sum from transition_unnorm and the Gaussian likelihood
    disc = model.discretisation(0, 150.0, 15.0)
    terms = [math.log(DEFAULTS.p0) + model.observation_log_density(_objs(prev), y)[0]]
    for g in range(len(disc.offsets)):
        route = Route(disc.routes[disc.point_route[g]], 150.0, float(disc.offsets[g]), float(disc.distances[g]))
        u = transition_unnorm(net, RoadPosition(0, 150.0), route, DEFAULTS)
        lik = -math.log(2 * math.pi * 5.2 ** 2) - 0.5 * np.sum((disc.xy[g] - y.point) ** 2) / 5.2 ** 2
        terms.append(math.log(u * DEFAULTS.resolution) + lik)
    assert log_w[0] + disc.log_z == pytest.approx(logsumexp(np.array(terms)), abs=1e-9)


def test_proposal_matches_brute_force_posterior():
    net = _line(600.0)
    model = MapMatchingModel(net, DEFAULTS)
    prev = _state(model, 0, 100.0)
    y = Observation(15.0, (160.0, 3.0))
    n = 100_000
    new, _ = model.propagate(_objs(*([prev] * n)), y, make_rng(1))
    # brute force: every lattice offset on the edge
    offs = np.arange(100.0, 601.0)
    d = offs - 100.0
    lam = DEFAULTS.lam
    prior = np.where(d == 0, DEFAULTS.p0, (1 - DEFAULTS.p0) * lam * np.exp(-lam * d) * DEFAULTS.resolution)
    prior[d > DEFAULTS.distance_cap(15.0)] = 0.0
    post = prior * np.exp(-0.5 * ((offs - 160.0) ** 2 + 9.0) / 5.2 ** 2)
    post /= post.sum()
    counts = np.bincount(np.array([s.offset for s in new]).astype(int) - 100, minlength=len(offs))
    assert 0.5 * np.abs(counts / n - post).sum() < 0.01


def test_proposal_flat_likelihood_limit():
    net = grid_network(3, 3, 200.0)
    model = MapMatchingModel(net, replace(DEFAULTS, sigma_gps=1e6))
    prev = _objs(_state(model, 0, 20.0), _state(model, 5, 150.0), _state(model, 9, 90.0))
    _, log_w = model.propagate(prev, Observation(15.0, (0.0, 0.0)), make_rng(2))
    assert np.ptp(log_w) < 1e-6


def test_proposal_splits_parallel_roads():
    net = fork_network()
    model = MapMatchingModel(net, DEFAULTS)
    n = 20_000
    prev = _state(model, 0, 190.0)
    new, _ = model.propagate(_objs(*([prev] * n)), Observation(15.0, (600.0, 0.0)), make_rng(4))
    upper = np.mean([net.edge_ids[s.edge] == "upper" for s in new])
    assert abs(upper - 0.5) < 4 * math.sqrt(0.25 / n)
    assert all(is_edge_continuous([prev, s]) for s in new[:200])


def test_proposal_dead_end_zeroes_only_stuck_particles():
    net = fork_network()
    model = MapMatchingModel(net, replace(DEFAULTS, p0=0.0))
    exit_edge = net.edge_ids.index("exit")
    end = net.lengths[exit_edge]
    states = _objs(_state(model, exit_edge, end), _state(model, exit_edge, end - 20.0))
    _, log_inc = model.propagate(states, Observation(15.0, (end, 0.0)), make_rng(0))
    assert log_inc[0] == -np.inf
    assert np.isfinite(log_inc[1])


# -- initial distribution -------------------------------------------------------

def test_initial_sample_concentrates_at_foot():
    net = _line(300.0)
    model = MapMatchingModel(net, DEFAULTS)
    xs = model.initial_sample(Observation(0.0, (120.3, 0.0)), 20_000, make_rng(5))
    offs = np.array([s.offset for s in xs])
    values, counts = np.unique(offs, return_counts=True)
    assert abs(values[np.argmax(counts)] - 120.3) <= DEFAULTS.resolution
    assert np.all(np.abs(offs - 120.3) < DEFAULTS.r_gps)
    with pytest.raises(NoRoadNearby):
        model.initial_sample(Observation(0.0, (120.0, 50.0)), 10, make_rng(5))


def test_initial_sample_symmetric_edges():
    net = fork_network()
    model = MapMatchingModel(net, DEFAULTS)
    n = 20_000
    xs = model.initial_sample(Observation(0.0, (600.0, 0.0)), n, make_rng(6))
    upper = np.mean([net.edge_ids[s.edge] == "upper" for s in xs])
    assert abs(upper - 0.5) < 4 * math.sqrt(0.25 / n)


# -- stitching weight -------------------------------------------------------------

def test_stitch_weight_examples():
    net = _line(1000.0)
    model = MapMatchingModel(net, DEFAULTS)
    overlap = model.make_state(0.0, (0,), 100.0, 200.0, 100.0)
    tail = model.make_state(15.0, (0,), 200.0, 260.0, 60.0)
    assert mm_stitch_weight(model, overlap, tail, overlap) == pytest.approx(1.0)

    behind = model.make_state(0.0, (0,), 100.0, 195.0, 95.0)
    lam = DEFAULTS.lam
    num = gamma_density(65.0, DEFAULTS)[1] / math.exp(model.log_z(0, 195.0, 15.0))
    den = gamma_density(60.0, DEFAULTS)[1] / math.exp(model.log_z(0, 200.0, 15.0))
    assert mm_stitch_weight(model, behind, tail, overlap) == pytest.approx(num / den)
    assert num / den == pytest.approx(math.exp(-lam * 5) * math.exp(model.log_z(0, 200.0, 15.0)
                                                                    - model.log_z(0, 195.0, 15.0)))
    ahead = model.make_state(0.0, (0,), 100.0, 270.0, 170.0)
    assert mm_stitch_weight(model, ahead, tail, overlap) == 0.0

    grid = grid_network(3, 3, 200.0)
    gm = MapMatchingModel(grid, DEFAULTS)
    g_overlap = gm.make_state(0.0, (0,), 10.0, 50.0, 40.0)
    g_tail = gm.make_state(15.0, (0,), 50.0, 90.0, 40.0)
    other = gm.make_state(0.0, (2,), 10.0, 50.0, 40.0)
    assert mm_stitch_weight(gm, other, g_tail, g_overlap) == 0.0


def test_stationary_tail_rebased_into_continuous_branch():
    net = _line(1000.0)
    model = MapMatchingModel(net, DEFAULTS)
    overlap = model.make_state(0.0, (0,), 100.0, 200.0, 100.0)
    stay = model.make_state(15.0, (0,), 200.0, 200.0, 0.0)
    head = model.make_state(0.0, (0,), 100.0, 190.0, 90.0)
    log_k = model.transition_log_kernel(_objs(head), _objs(stay))[0]
    assert log_k == pytest.approx(math.log(gamma_density(10.0, DEFAULTS)[1]))
    (rebased,) = model.rebase(_objs(head), _objs(stay))
    assert rebased.distance == pytest.approx(10.0) and rebased.start_offset == 190.0
    assert not rebased.stationary


def test_envelope_bounds_kernel():
    net = grid_network(3, 3, 200.0)
    model = MapMatchingModel(net, DEFAULTS)
    rng = make_rng(8)
    truth, trace = synth_route(net, DEFAULTS, 3, rng)
    prev = model.initial_sample(trace[0], 50, rng)
    new, _ = model.propagate(prev, trace[1], rng)
    kernel = np.array([model.transition_log_kernel(_objs(a), new) for a in prev])
    for side, axis in (("new", 0), ("prev", 1)):
        env = model.transition_log_envelope(prev, new, side)
        assert np.all(kernel.max(axis=axis) <= env + 1e-12)
    assert np.all(kernel <= math.log(model.transition_bound()) + 1e-12)


# -- Viterbi ----------------------------------------------------------------------

def test_viterbi_single_edge_projections():
    net = _line(500.0)
    trace = [Observation(15.0 * k, (40.0 + 30.0 * k, 0.0)) for k in range(6)]
    out = viterbi_match(net, trace, DEFAULTS)
    assert [s.offset for s in out] == pytest.approx([40.0 + 30.0 * k for k in range(6)])
    assert is_edge_continuous(out)


def test_viterbi_follows_grid_arm():
    net = grid_network(3, 3, 200.0)
    rng = np.random.default_rng(0)
    xs = np.arange(20.0, 400.0, 60.0)
    trace = [Observation(15.0 * k, (x + rng.normal(0, 1.0), rng.normal(0, 1.0))) for k, x in enumerate(xs)]
    out = viterbi_match(net, trace, DEFAULTS)
    edges = []
    for s in out:
        for e in s.edges:
            if not edges or edges[-1] != e:
                edges.append(e)
    assert [net.edge_ids[e] for e in edges] == ["n0_0-n0_1", "n0_1-n0_2"]


def test_viterbi_fork_returns_one_route():
    net = fork_network()
    trace = [Observation(15.0 * k, (x, 0.0)) for k, x in enumerate([100.0, 250.0, 450.0, 650.0, 850.0, 1050.0])]
    out = viterbi_match(net, trace, DEFAULTS)
    assert len(out) == len(trace)
    branches = {net.edge_ids[e] for s in out for e in s.edges} & {"upper", "lower"}
    assert len(branches) == 1
    assert is_edge_continuous(out)


# -- synthetic routes ---------------------------------------------------------------

def test_synth_stationary_vehicle():
    net = grid_network(3, 3, 200.0)
    truth, trace = synth_route(net, replace(DEFAULTS, p0=1.0), 20, make_rng(9))
    assert all(s.distance == 0.0 for s in truth[1:])
    pts = np.array([o.point for o in trace])
    assert np.all(np.hypot(*(pts - [truth[0].x, truth[0].y]).T) < 6 * DEFAULTS.sigma_gps)


def test_synth_large_beta_takes_shortest_routes():
    net = grid_network(4, 4, 150.0)
    params = replace(DEFAULTS, beta=50.0)
    truth, _ = synth_route(net, params, 30, make_rng(10))
    graph, _ = _node_graph(net)
    node_dist = dijkstra(graph, directed=True)
    for prev, cur in zip(truth[:-1], truth[1:]):
        assert is_edge_continuous([prev, cur])
        shortest = shortest_road_distance(net, prev.position, cur.position, lambda u, v: node_dist[u, v])
        assert cur.distance == pytest.approx(shortest, abs=1e-6)


def test_synth_step_mean_on_straight_road():
    params = replace(DEFAULTS, d_max=5000.0)
    net = _line(2.0e6)
    truth, _ = synth_route(net, params, 1000, make_rng(11))
    steps = np.array([s.distance for s in truth[1:]])
    moves = steps[steps > 0]
    # lattice mean of a geometric law with unit spacing
    q = math.exp(-params.lam)
    expected = 1.0 / (1.0 - q)
    assert abs(moves.mean() - expected) < 3.5 * expected / math.sqrt(len(moves))
    assert abs(np.mean(steps == 0) - params.p0) < 3.5 * math.sqrt(params.p0 * (1 - params.p0) / len(steps))


def test_synth_is_reproducible():
    net = grid_network(3, 3, 200.0)
    a = synth_route(net, DEFAULTS, 10, make_rng(12))
    b = synth_route(net, DEFAULTS, 10, make_rng(12))
    assert a == b
    assert all(isinstance(s, RouteState) for s in a[0])
    assert is_edge_continuous(a[0])
