"""Map-matching state-space model on a road network.

A state is the route travelled since the previous observation together with
the end position on its last edge.  The distance prior mixes a point mass at
zero (stationary vehicle) with an exponential density; a winding penalty
discourages routes much longer than the straight-line displacement.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .core import StateSpaceModel, as_object_array, inverse_cdf, logsumexp
from .roadnet import (
    RoadNetwork,
    RoadPosition,
    Route,
    enumerate_routes,
    nearest_positions,
)

DISTANCE_TOL = 1e-6
LOG_2PI = math.log(2 * math.pi)


def _log(value: float) -> float:
    """Natural log with log(0) = -inf."""
    return math.log(value) if value > 0 else -math.inf


class NoRoadNearby(ValueError):
    """No edge lies within the GPS radius of an observation."""


class Disconnected(RuntimeError):
    """Consecutive candidate sets admit no positive-probability transition."""


class DeadEnd(RuntimeError):
    """A simulated vehicle could not continue within the distance cap."""


class RouteMismatch(ValueError):
    """A route does not begin at the given previous position."""


@dataclass(frozen=True)
class MapMatchParams:
    p0: float = 0.14
    lam: float = 0.07 / 15
    beta: float = 0.05
    sigma_gps: float = 5.2
    r_gps_factor: float = 5.0
    d_max: float | None = None
    max_speed: float = 35.0
    resolution: float = 1.0
    reference_gap: float = 15.0
    ess_threshold: float = 0.5
    lag: int = 3
    max_rejections: int = 20

    def __post_init__(self):
        if not 0 <= self.p0 <= 1:
            raise ValueError("p0 must lie in [0, 1]")
        for name in ("lam", "beta", "sigma_gps", "resolution", "r_gps_factor", "max_speed",
                     "reference_gap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.d_max is not None and not self.d_max > 0:
            raise ValueError("d_max must be positive")

    @property
    def r_gps(self) -> float:
        return self.r_gps_factor * self.sigma_gps

    def rate(self, gap: float) -> float:
        """Exponential rate per metre for an observation gap in seconds."""
        return self.lam * self.reference_gap / gap

    def distance_cap(self, gap: float) -> float:
        return self.d_max if self.d_max is not None else self.max_speed * gap


@dataclass(frozen=True, slots=True)
class RouteState:
    """Route since the previous observation and the position at its end."""

    time: float
    edges: tuple
    start_offset: float
    offset: float
    distance: float
    x: float
    y: float

    @property
    def edge(self) -> int:
        return self.edges[-1]

    @property
    def position(self) -> RoadPosition:
        return RoadPosition(self.edges[-1], self.offset)

    @property
    def route(self) -> Route:
        return Route(self.edges, self.start_offset, self.offset, self.distance)

    @property
    def stationary(self) -> bool:
        return len(self.edges) == 1 and self.distance <= DISTANCE_TOL


@dataclass(frozen=True)
class Observation:
    time: float
    point: tuple[float, float]


def gamma_density(d: float, params: MapMatchParams, gap: float | None = None) -> tuple[float, float]:
    """(atom mass at zero, continuous density at d > 0)."""
    if d < 0:
        raise ValueError("distance must be nonnegative")
    lam = params.rate(params.reference_gap if gap is None else gap)
    cont = (1 - params.p0) * lam * math.exp(-lam * d) if d > 0 else 0.0
    return params.p0, cont


def mm_rejection_bound(params: MapMatchParams, gap: float | None = None) -> float:
    """max((1 - p0) * lambda, p0)."""
    lam = params.rate(params.reference_gap if gap is None else gap)
    return max((1 - params.p0) * lam, params.p0)


def transition_unnorm(net: RoadNetwork, x_prev: RoadPosition, route: Route, params: MapMatchParams,
                      gap: float | None = None) -> float:
    """gamma(d_road) * exp(-beta |d_road - d_straight|); atom mass for a stationary route."""
    if route.edges[0] != x_prev.edge or abs(route.start_offset - x_prev.offset) > DISTANCE_TOL:
        raise RouteMismatch("route does not begin at the previous position")
    atom, cont = gamma_density(route.distance, params, gap)
    if route.distance <= DISTANCE_TOL:
        return atom
    a = net.coords(x_prev.edge, x_prev.offset)
    b = net.coords(route.edges[-1], route.end_offset)
    straight = float(np.hypot(*(b - a)))
    return cont * math.exp(-params.beta * abs(route.distance - straight))


@dataclass
class Discretisation:
    """Grid of candidate end points reachable from one start position."""

    start: RoadPosition
    start_xy: np.ndarray
    routes: list[tuple]
    point_route: np.ndarray
    offsets: np.ndarray
    distances: np.ndarray
    xy: np.ndarray
    log_unnorm: np.ndarray
    log_atom: float
    log_resolution: float

    def __post_init__(self):
        # atom first, then every grid point; x and y kept contiguous for the likelihood
        self.log_masses = np.concatenate([[self.log_atom], self.log_unnorm + self.log_resolution])
        self.all_x = np.concatenate([[self.start_xy[0]], self.xy[:, 0]])
        self.all_y = np.concatenate([[self.start_xy[1]], self.xy[:, 1]])

    @property
    def log_z(self) -> float:
        return float(logsumexp(self.log_masses))


def discretise(net: RoadNetwork, start: RoadPosition, params: MapMatchParams, gap: float) -> Discretisation:
    d_max = params.distance_cap(gap)
    lam = params.rate(gap)
    options = enumerate_routes(net, start, d_max, params.resolution)
    start_xy = net.coords(start.edge, start.offset)
    offs = [o.end_offsets for o in options]
    point_route = np.concatenate([np.full(len(o), i) for i, o in enumerate(offs)]).astype(np.intp)
    offsets = np.concatenate(offs)
    distances = np.concatenate([o.distances for o in options])
    last = np.array([o.edges[-1] for o in options], dtype=np.intp)
    xy = net.coords_many(last[point_route], offsets)
    straight = np.hypot(xy[:, 0] - start_xy[0], xy[:, 1] - start_xy[1])
    with np.errstate(divide="ignore"):
        log_cont0 = _log((1 - params.p0) * lam)
        log_atom = _log(params.p0)
    log_unnorm = log_cont0 - lam * distances - params.beta * np.abs(distances - straight)
    return Discretisation(start, start_xy, [o.edges for o in options], point_route, offsets,
                          distances, xy, log_unnorm, log_atom, math.log(params.resolution))


def transition_normaliser(net: RoadNetwork, x_prev: RoadPosition, params: MapMatchParams,
                          gap: float | None = None) -> float:
    """Z = p0 + sum of unnormalised density times resolution over the route grid."""
    gap = params.reference_gap if gap is None else gap
    return math.exp(discretise(net, x_prev, params, gap).log_z)


class MapMatchingModel(StateSpaceModel):
    """Map-matching state-space model with the optimal (locally posterior) proposal.

    Transition kernel evaluation re-expresses the candidate route relative to
    the previous position: a candidate whose first edge differs from the
    previous edge, or that would need to move backwards, has zero density.
    """

    def __init__(self, net: RoadNetwork, params: MapMatchParams | None = None,
                 cache_size: int = 512):
        self.net = net
        self.params = params or MapMatchParams()
        self.cache_size = cache_size
        self._disc: OrderedDict = OrderedDict()
        self._log_z: dict = {}
        self._fields: list = []
        self._log_norm_const = -LOG_2PI - 2 * math.log(self.params.sigma_gps)

    # -- caches -------------------------------------------------------------
    @staticmethod
    def _key(edge: int, offset: float, gap: float):
        return edge, round(offset, 6), round(gap, 6)

    def discretisation(self, edge: int, offset: float, gap: float) -> Discretisation:
        key = self._key(edge, offset, gap)
        disc = self._disc.get(key)
        if disc is None:
            disc = discretise(self.net, RoadPosition(edge, offset), self.params, gap)
            self._disc[key] = disc
            self._log_z[key] = disc.log_z
            if len(self._disc) > self.cache_size:
                self._disc.popitem(last=False)
        else:
            self._disc.move_to_end(key)
        return disc

    def log_z(self, edge: int, offset: float, gap: float) -> float:
        key = self._key(edge, offset, gap)
        value = self._log_z.get(key)
        if value is None:
            value = self.discretisation(edge, offset, gap).log_z
        return value

    # -- helpers ------------------------------------------------------------
    def _state_fields(self, states: np.ndarray) -> dict:
        """Attribute arrays of a state array; recent arrays are memoised by identity."""
        for k, (ref, fields) in enumerate(self._fields):
            if ref is states:
                if k:
                    self._fields.insert(0, self._fields.pop(k))
                return fields
        flat = states.ravel()
        fields = {
            "end_edge": np.array([s.edges[-1] for s in flat]),
            "first_edge": np.array([s.edges[0] for s in flat]),
            "offset": np.array([s.offset for s in flat]),
            "reach": np.array([s.distance + s.start_offset for s in flat]),
            "x": np.array([s.x for s in flat]),
            "y": np.array([s.y for s in flat]),
        }
        fields = {k: v.reshape(states.shape) for k, v in fields.items()}
        if states.size > 1:
            self._fields = [(states, fields)] + self._fields[:3]
        return fields

    def _gap(self, x_prev, x_new) -> float:
        t_prev = (x_prev if isinstance(x_prev, RouteState) else x_prev.flat[0]).time
        t_new = (x_new if isinstance(x_new, RouteState) else x_new.flat[0]).time
        gap = t_new - t_prev
        if gap <= 0:
            raise ValueError("observation times must be strictly increasing")
        return gap

    def make_state(self, time: float, edges: tuple, start_offset: float, offset: float,
                   distance: float) -> RouteState:
        x, y = self.net.coords(edges[-1], offset)
        return RouteState(float(time), tuple(int(e) for e in edges), float(start_offset),
                          float(offset), float(distance), float(x), float(y))

    # -- model interface ----------------------------------------------------
    def initial_candidates(self, y0: Observation):
        """Lattice points within the GPS radius and their Gaussian log weights."""
        res = self.params.resolution
        radius = self.params.r_gps
        pts_edge, pts_off, pts_xy = [], [], []
        for pos, _ in nearest_positions(self.net, y0.point, radius):
            length = self.net.lengths[pos.edge]
            offs = np.arange(1, math.floor(length / res + 1e-9) + 1) * res
            offs = offs[np.abs(offs - pos.offset) < radius + res]
            if offs.size == 0:
                continue
            pts_edge.append(np.full(offs.size, pos.edge))
            pts_off.append(offs)
            pts_xy.append(self.net.coords(pos.edge, offs).reshape(-1, 2))
        if not pts_edge:
            raise NoRoadNearby(f"no road within {radius:.1f} m of {tuple(y0.point)}")
        edges, offs, xy = np.concatenate(pts_edge), np.concatenate(pts_off), np.concatenate(pts_xy)
        d2 = np.sum((xy - np.asarray(y0.point)) ** 2, axis=1)
        keep = d2 < radius ** 2
        if not keep.any():
            raise NoRoadNearby(f"no road within {radius:.1f} m of {tuple(y0.point)}")
        return edges[keep], offs[keep], -0.5 * d2[keep] / self.params.sigma_gps ** 2

    def initial_sample(self, y0: Observation, n: int, rng: np.random.Generator) -> np.ndarray:
        edges, offs, log_w = self.initial_candidates(y0)
        w = np.exp(log_w - log_w.max())
        idx = inverse_cdf(np.cumsum(w), rng.random(n))
        states = {}
        out = []
        for i in idx:
            if i not in states:
                states[i] = self.make_state(y0.time, (edges[i],), offs[i], offs[i], 0.0)
            out.append(states[i])
        return as_object_array(out)

    def initial_log_weight(self, x0, y0):
        # particles are exact draws from the truncated posterior on the lattice
        return np.zeros(len(x0))

    def observation_log_density(self, x, y: Observation):
        x = np.atleast_1d(x)
        xs = np.array([s.x for s in x])
        ys = np.array([s.y for s in x])
        d2 = (xs - y.point[0]) ** 2 + (ys - y.point[1]) ** 2
        return self._log_norm_const - 0.5 * d2 / self.params.sigma_gps ** 2

    def transition_bound(self) -> float:
        return mm_rejection_bound(self.params)

    def transition_log_normaliser(self, x_prev, x_next=None):
        x_prev = np.atleast_1d(x_prev)
        if x_next is None:
            raise ValueError("the map-matching normaliser depends on the next observation time")
        gap = self._gap(x_prev, x_next)
        return np.array([self.log_z(s.edges[-1], s.offset, gap) for s in x_prev])

    def transition_log_kernel(self, x_prev, x_new):
        """Log unnormalised density of x_new re-based onto x_prev (numpy broadcasting)."""
        prev = np.atleast_1d(x_prev)
        new = np.atleast_1d(x_new)
        gap = self._gap(prev, new)
        p = self.params
        lam = p.rate(gap)
        d_cap = p.distance_cap(gap)
        pf, nf = self._state_fields(prev), self._state_fields(new)
        p_edge, p_off, p_x, p_y = pf["end_edge"], pf["offset"], pf["x"], pf["y"]
        n_edge, n_reach, n_x, n_y = nf["first_edge"], nf["reach"], nf["x"], nf["y"]
        d = n_reach - p_off
        straight = np.hypot(n_x - p_x, n_y - p_y)
        ok = (n_edge == p_edge) & (d >= -DISTANCE_TOL) & (d <= d_cap + DISTANCE_TOL)
        with np.errstate(divide="ignore"):
            cont = _log((1 - p.p0) * lam) - lam * d - p.beta * np.abs(d - straight)
            atom = _log(p.p0)
        out = np.where(np.abs(d) <= DISTANCE_TOL, atom, cont)
        return np.where(ok, out, -np.inf)

    def transition_log_density(self, x_prev, x_new):
        return self.transition_log_kernel(x_prev, x_new) - self.transition_log_normaliser(x_prev, x_new)

    def transition_log_envelope(self, x_prev, x_new, candidates: str):
        """Per-candidate bound on the log kernel over every state on the other side.

        For a fixed candidate the kernel is at most the distance prior at the
        smallest feasible re-based distance, found by a sorted search over
        the other side's offsets on the shared edge.
        """
        prev = np.atleast_1d(x_prev)
        new = np.atleast_1d(x_new)
        gap = self._gap(prev, new)
        p = self.params
        lam = p.rate(gap)
        d_cap = p.distance_cap(gap)
        with np.errstate(divide="ignore"):
            log_cont0 = _log((1 - p.p0) * lam)
            atom = _log(p.p0)
        at_zero = max(atom, log_cont0)
        pf, nf = self._state_fields(prev), self._state_fields(new)
        p_edge, p_off = pf["end_edge"], pf["offset"]
        n_edge, n_reach = nf["first_edge"], nf["reach"]

        if candidates == "new":
            cand_edge, cand_val = n_edge, n_reach
            other_edge, other_val = p_edge, p_off
        elif candidates == "prev":
            cand_edge, cand_val = p_edge, p_off
            other_edge, other_val = n_edge, n_reach
        else:
            raise ValueError("candidates must be 'prev' or 'new'")

        bound = np.full(len(cand_edge), -np.inf)
        order = np.lexsort((other_val, other_edge))
        s_edge, s_val = other_edge[order], other_val[order]
        for e in np.unique(cand_edge):
            lo, hi = np.searchsorted(s_edge, [e, e + 1])
            if lo == hi:
                continue
            vals = s_val[lo:hi]
            mask = cand_edge == e
            cv = cand_val[mask]
            if candidates == "new":
                # closest prev offset not beyond the candidate's reach
                j = np.searchsorted(vals, cv + DISTANCE_TOL, side="right") - 1
                has = j >= 0
                d_min = np.where(has, cv - vals[np.maximum(j, 0)], np.inf)
            else:
                j = np.searchsorted(vals, cv - DISTANCE_TOL, side="left")
                has = j < len(vals)
                d_min = np.where(has, vals[np.minimum(j, len(vals) - 1)] - cv, np.inf)
            feasible = has & (d_min <= d_cap + DISTANCE_TOL)
            b = np.where(d_min <= DISTANCE_TOL, at_zero, log_cont0 - lam * np.maximum(d_min, 0.0))
            bound[mask] = np.where(feasible, b, -np.inf)
        return bound

    def propagate(self, x_prev, y: Observation, rng: np.random.Generator):
        """Optimal proposal over the discretised routes plus the stationary atom."""
        x_prev = np.atleast_1d(x_prev)
        n = len(x_prev)
        t_prev = x_prev[0].time
        gap = y.time - t_prev
        if gap <= 0:
            raise ValueError("observation times must be strictly increasing")
        sig2 = self.params.sigma_gps ** 2
        yx, yy = y.point
        groups: dict = {}
        for i, s in enumerate(x_prev):
            groups.setdefault((s.edges[-1], round(s.offset, 6)), []).append(i)
        out = np.empty(n, dtype=object)
        log_inc = np.empty(n)
        for (edge, _), members in groups.items():
            s0 = x_prev[members[0]]
            disc = self.discretisation(edge, s0.offset, gap)
            dx = disc.all_x - yx
            dy = disc.all_y - yy
            log_post = disc.log_masses - (dx * dx + dy * dy) * (0.5 / sig2)
            peak = log_post.max()
            if not np.isfinite(peak):
                log_inc[members] = -np.inf
                out[members] = [replace(x_prev[i], time=y.time) for i in members]
                continue
            # unnormalised cdf; its last entry also gives the normaliser
            cdf = np.cumsum(np.exp(log_post - peak))
            log_total = self._log_norm_const + peak + math.log(cdf[-1])
            log_inc[members] = log_total - self._log_z[self._key(edge, s0.offset, gap)]
            cdf /= cdf[-1]
            picks = inverse_cdf(cdf, rng.random(len(members)))
            made = {}
            for i, k in zip(members, picks):
                state = made.get(k)
                if state is None:
                    if k == 0:
                        state = RouteState(float(y.time), (edge,), s0.offset, s0.offset, 0.0,
                                           float(disc.start_xy[0]), float(disc.start_xy[1]))
                    else:
                        g = k - 1
                        state = RouteState(float(y.time), disc.routes[disc.point_route[g]],
                                           s0.offset, float(disc.offsets[g]),
                                           float(disc.distances[g]), float(disc.xy[g, 0]),
                                           float(disc.xy[g, 1]))
                    made[k] = state
                out[i] = state
        return out, log_inc

    def rebase(self, x_prev, x_new):
        """Rewrite each route's start offset and distance relative to x_prev."""
        prev = np.atleast_1d(x_prev)
        new = np.atleast_1d(x_new)
        prev = np.broadcast_to(prev, new.shape) if prev.size == 1 else prev
        out = np.empty(len(new), dtype=object)
        for i, (a, b) in enumerate(zip(prev, new)):
            if a.offset == b.start_offset:
                out[i] = b
            else:
                d = max(b.distance + b.start_offset - a.offset, 0.0)
                out[i] = RouteState(b.time, b.edges, a.offset, b.offset, d, b.x, b.y)
        return out


def mm_stitch_weight(model: MapMatchingModel, head_end: RouteState, tail_first: RouteState,
                     tail_overlap: RouteState) -> float:
    """p(tail | head_end) / p(tail | tail_overlap); zero when the tail is unreachable from the head."""
    num = model.transition_log_density(np.array([head_end], dtype=object),
                                       np.array([tail_first], dtype=object))[0]
    den = model.transition_log_density(np.array([tail_overlap], dtype=object),
                                       np.array([tail_first], dtype=object))[0]
    if not np.isfinite(num):
        return 0.0
    return float(np.exp(num - den))


def is_edge_continuous(trajectory: Sequence[RouteState]) -> bool:
    """Each route starts where the previous state ended."""
    for prev, cur in zip(trajectory[:-1], trajectory[1:]):
        if cur.edges[0] != prev.edges[-1] or abs(cur.start_offset - prev.offset) > DISTANCE_TOL:
            return False
    return True


def _node_graph(net: RoadNetwork) -> tuple[csr_matrix, dict]:
    n = len(net.node_ids)
    # keep the shortest of parallel edges
    weights: dict = {}
    for e in range(net.n_edges):
        key = (net.edge_from[e], net.edge_to[e])
        if key not in weights or net.lengths[e] < weights[key][0]:
            weights[key] = (net.lengths[e], e)
    rows = [k[0] for k in weights]
    cols = [k[1] for k in weights]
    data = [v[0] for v in weights.values()]
    return csr_matrix((data, (rows, cols)), shape=(n, n)), {k: v[1] for k, v in weights.items()}


def _node_path(pred: np.ndarray, src: int, dst: int) -> list[int]:
    path = [dst]
    while path[-1] != src:
        path.append(pred[path[-1]])
    return path[::-1]


def viterbi_match(net: RoadNetwork, trace: Sequence[Observation], params: MapMatchParams
                  ) -> list[RouteState]:
    """Most probable sequence of candidate positions with shortest connecting routes.

    Candidates are the closest points of edges within r_GPS of each
    observation.  Ties go to the lowest candidate index.
    """
    if not trace:
        raise ValueError("trace is empty")
    graph, edge_of = _node_graph(net)
    dist, pred = dijkstra(graph, directed=True, return_predecessors=True)
    sig2 = params.sigma_gps ** 2
    cands, emis = [], []
    for obs in trace:
        near = nearest_positions(net, obs.point, params.r_gps)
        if not near:
            raise NoRoadNearby(f"no road within {params.r_gps:.1f} m at t={obs.time}")
        cands.append([p for p, _ in near])
        emis.append(np.array([-0.5 * d ** 2 / sig2 for _, d in near]))

    def road(a: RoadPosition, b: RoadPosition):
        if a.edge == b.edge and b.offset >= a.offset - DISTANCE_TOL:
            return max(b.offset - a.offset, 0.0), (a.edge,)
        u, v = net.edge_to[a.edge], net.edge_from[b.edge]
        if not np.isfinite(dist[u, v]):
            return math.inf, None
        nodes = _node_path(pred[u], u, v)
        mid = tuple(edge_of[(s, t)] for s, t in zip(nodes[:-1], nodes[1:]))
        return (net.lengths[a.edge] - a.offset) + dist[u, v] + b.offset, (a.edge, *mid, b.edge)

    score = emis[0].copy()
    back, links = [], []
    for t in range(1, len(trace)):
        gap = trace[t].time - trace[t - 1].time
        lam = params.rate(gap)
        prev_c, cur_c = cands[t - 1], cands[t]
        trans = np.full((len(prev_c), len(cur_c)), -np.inf)
        routes = {}
        for i, a in enumerate(prev_c):
            pa = net.coords(a.edge, a.offset)
            for j, b in enumerate(cur_c):
                d, edges = road(a, b)
                if edges is None:
                    continue
                straight = float(np.hypot(*(net.coords(b.edge, b.offset) - pa)))
                if d <= DISTANCE_TOL:
                    trans[i, j] = _log(params.p0)
                else:
                    trans[i, j] = (_log((1 - params.p0) * lam) - lam * d
                                   - params.beta * abs(d - straight))
                routes[i, j] = (edges, d)
        total = score[:, None] + trans
        best = np.argmax(total, axis=0)  # first maximum, i.e. lowest index
        score = total[best, np.arange(len(cur_c))] + emis[t]
        if not np.isfinite(score).any():
            raise Disconnected(f"no feasible transition into t={trace[t].time}")
        back.append(best)
        links.append(routes)
    j = int(np.argmax(score))
    path = [j]
    for best in reversed(back):
        path.append(int(best[path[-1]]))
    path.reverse()
    first = cands[0][path[0]]
    out = [_viterbi_state(net, trace[0].time, (first.edge,), first.offset, first.offset, 0.0)]
    for t in range(1, len(trace)):
        i, j = path[t - 1], path[t]
        edges, d = links[t - 1][i, j]
        a, b = cands[t - 1][i], cands[t][j]
        out.append(_viterbi_state(net, trace[t].time, edges, a.offset, b.offset, d))
    return out


def _viterbi_state(net, time, edges, start, offset, distance) -> RouteState:
    x, y = net.coords(edges[-1], offset)
    return RouteState(float(time), tuple(int(e) for e in edges), float(start), float(offset),
                      float(distance), float(x), float(y))


def synth_route(net: RoadNetwork, params: MapMatchParams, steps: int, rng: np.random.Generator,
                gap: float = 15.0, max_retries: int = 20) -> tuple[list[RouteState], list[Observation]]:
    """Simulate a vehicle on the network and noisy GPS observations of it.

    The start is uniform over the resolution lattice of all edges; each step
    is drawn from the discretised transition law.  A trajectory that reaches
    a position with no onward grid point is restarted, up to ``max_retries``.
    """
    model = MapMatchingModel(net, params)
    res = params.resolution
    lattice = [(e, k * res) for e in range(net.n_edges)
               for k in range(1, math.floor(net.lengths[e] / res + 1e-9) + 1)]
    if not lattice:
        raise DeadEnd("network has no lattice points")
    for _ in range(max_retries + 1):
        e, off = lattice[int(rng.integers(len(lattice)))]
        states = [model.make_state(0.0, (e,), off, off, 0.0)]
        stuck = False
        for t in range(1, steps + 1):
            prev = states[-1]
            disc = model.discretisation(prev.edge, prev.offset, gap)
            if disc.offsets.size == 0 and params.p0 < 1:
                stuck = True
                break
            masses = disc.log_masses
            k = inverse_cdf(np.cumsum(np.exp(masses - masses.max())), rng.random(1))[0]
            if k == 0:
                states.append(replace(prev, time=t * gap, edges=(prev.edge,),
                                      start_offset=prev.offset, distance=0.0))
            else:
                g = k - 1
                states.append(RouteState(t * gap, disc.routes[disc.point_route[g]], prev.offset,
                                         float(disc.offsets[g]), float(disc.distances[g]),
                                         float(disc.xy[g, 0]), float(disc.xy[g, 1])))
        if not stuck:
            noise = rng.normal(scale=params.sigma_gps, size=(len(states), 2))
            trace = [Observation(s.time, (s.x + dx, s.y + dy)) for s, (dx, dy) in zip(states, noise)]
            return states, trace
    raise DeadEnd(f"vehicle got stuck in {max_retries + 1} attempts")
