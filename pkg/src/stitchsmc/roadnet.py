"""Road networks: directed graphs with polyline edges, positions and bounded routes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import jsonschema
import numpy as np

GEOMETRY_TOLERANCE = 1e-6
GRID_EPS = 1e-9

NETWORK_SCHEMA = {
    "type": "object",
    "required": ["nodes", "edges"],
    "properties": {
        "nodes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "x", "y"],
                "properties": {"id": {"type": "string"}, "x": {"type": "number"},
                               "y": {"type": "number"}},
            },
        },
        "edges": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "from", "to", "geometry"],
                "properties": {
                    "id": {"type": "string"},
                    "from": {"type": "string"},
                    "to": {"type": "string"},
                    "geometry": {
                        "type": "array",
                        "minItems": 2,
                        "items": {"type": "array", "minItems": 2, "maxItems": 2,
                                  "items": {"type": "number"}},
                    },
                },
            },
        },
    },
}


class NetworkError(ValueError):
    """Base class for invalid network documents."""


class SchemaError(NetworkError):
    pass


class DanglingReference(NetworkError):
    pass


class ZeroLengthEdge(NetworkError):
    pass


class GeometryMismatch(NetworkError):
    pass


class OffsetOutOfRange(ValueError):
    pass


class ExplosionGuard(RuntimeError):
    """Route enumeration exceeded its cap; d_max is too large for the network density."""


@dataclass(frozen=True)
class RoadPosition:
    edge: int
    offset: float


@dataclass(frozen=True)
class Route:
    """Connected edge sequence from a start offset on the first edge to an end offset on the last."""

    edges: tuple[int, ...]
    start_offset: float
    end_offset: float
    distance: float

    @property
    def end(self) -> RoadPosition:
        return RoadPosition(self.edges[-1], self.end_offset)


@dataclass(frozen=True)
class RouteOption:
    """One edge sequence and the grid of end points reachable along its last edge.

    ``base`` is the road distance from the start position to the start of the
    last edge (negative start offset for the stay-on-edge route).
    """

    edges: tuple[int, ...]
    start_offset: float
    base: float
    end_offsets: np.ndarray
    distances: np.ndarray


@dataclass(eq=False)
class RoadNetwork:
    """Immutable directed road graph; edges and nodes are addressed by integer index."""

    node_ids: list[str]
    node_xy: np.ndarray
    edge_ids: list[str]
    edge_from: np.ndarray
    edge_to: np.ndarray
    geometry: list[np.ndarray]
    lengths: np.ndarray = field(init=False)
    cumlen: list[np.ndarray] = field(init=False)
    out_edges: list[tuple[int, ...]] = field(init=False)

    def __post_init__(self):
        self.node_index = {nid: i for i, nid in enumerate(self.node_ids)}
        self.edge_index = {eid: i for i, eid in enumerate(self.edge_ids)}
        self.cumlen = []
        for g in self.geometry:
            seg = np.hypot(*np.diff(g, axis=0).T)
            self.cumlen.append(np.concatenate([[0.0], np.cumsum(seg)]))
        self.lengths = np.array([c[-1] for c in self.cumlen])
        out = [[] for _ in self.node_ids]
        for e, u in enumerate(self.edge_from):
            out[u].append(e)
        self.out_edges = [tuple(sorted(o)) for o in out]
        # flattened segments for nearest-point queries
        seg_edge, seg_a, seg_b, seg_off = [], [], [], []
        for e, (g, c) in enumerate(zip(self.geometry, self.cumlen)):
            seg_edge.append(np.full(len(g) - 1, e))
            seg_a.append(g[:-1])
            seg_b.append(g[1:])
            seg_off.append(c[:-1])
        self._seg_edge = np.concatenate(seg_edge)
        self._seg_a = np.concatenate(seg_a)
        self._seg_b = np.concatenate(seg_b)
        self._seg_off = np.concatenate(seg_off)
        self._seg_len = np.hypot(*(self._seg_b - self._seg_a).T)
        counts = np.array([len(g) - 1 for g in self.geometry])
        self._seg_first = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self._seg_count = counts

    @property
    def n_edges(self) -> int:
        return len(self.edge_ids)

    def coords(self, edge: int, offsets) -> np.ndarray:
        """Points at arc lengths ``offsets`` along an edge, shape (..., 2)."""
        g, c = self.geometry[edge], self.cumlen[edge]
        offsets = np.asarray(offsets, dtype=float)
        return np.stack([np.interp(offsets, c, g[:, 0]), np.interp(offsets, c, g[:, 1])], axis=-1)

    def coords_many(self, edges, offsets) -> np.ndarray:
        """Vectorised ``coords`` for paired arrays of edges and offsets, shape (n, 2)."""
        edges = np.asarray(edges, dtype=np.intp)
        offsets = np.asarray(offsets, dtype=float)
        first = self._seg_first[edges]
        # segment index within the edge: count of interior vertices at or before the offset
        local = np.zeros(len(edges), dtype=np.intp)
        multi = self._seg_count[edges] > 1
        if multi.any():
            for e in np.unique(edges[multi]):
                m = edges == e
                inner = self.cumlen[e][1:-1]
                local[m] = np.searchsorted(inner, offsets[m], side="right")
        seg = first + local
        seg_len = self._seg_len[seg]
        t = np.divide(offsets - self._seg_off[seg], seg_len, out=np.zeros(len(seg)), where=seg_len > 0)
        t = np.clip(t, 0.0, 1.0)
        return self._seg_a[seg] + t[:, None] * (self._seg_b[seg] - self._seg_a[seg])

    def to_document(self) -> dict:
        return {
            "nodes": [{"id": n, "x": float(x), "y": float(y)}
                      for n, (x, y) in zip(self.node_ids, self.node_xy)],
            "edges": [{"id": e, "from": self.node_ids[u], "to": self.node_ids[v],
                       "geometry": [[float(a), float(b)] for a, b in g]}
                      for e, u, v, g in zip(self.edge_ids, self.edge_from, self.edge_to, self.geometry)],
        }


def network_from_document(doc: dict) -> RoadNetwork:
    try:
        jsonschema.validate(doc, NETWORK_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(exc.message) from None
    node_ids = [n["id"] for n in doc["nodes"]]
    if len(set(node_ids)) != len(node_ids):
        raise SchemaError("duplicate node id")
    edge_ids = [e["id"] for e in doc["edges"]]
    if len(set(edge_ids)) != len(edge_ids):
        raise SchemaError("duplicate edge id")
    index = {nid: i for i, nid in enumerate(node_ids)}
    node_xy = np.array([[n["x"], n["y"]] for n in doc["nodes"]], dtype=float).reshape(-1, 2)
    frm, to, geometry = [], [], []
    for e in doc["edges"]:
        for end in ("from", "to"):
            if e[end] not in index:
                raise DanglingReference(f"edge {e['id']} references missing node {e[end]}")
        g = np.array(e["geometry"], dtype=float)
        u, v = index[e["from"]], index[e["to"]]
        if (np.hypot(*(g[0] - node_xy[u])) > GEOMETRY_TOLERANCE
                or np.hypot(*(g[-1] - node_xy[v])) > GEOMETRY_TOLERANCE):
            raise GeometryMismatch(f"edge {e['id']} geometry does not meet its nodes")
        if np.hypot(*np.diff(g, axis=0).T).sum() <= 0:
            raise ZeroLengthEdge(f"edge {e['id']} has zero length")
        frm.append(u)
        to.append(v)
        geometry.append(g)
    return RoadNetwork(node_ids, node_xy, edge_ids, np.array(frm, dtype=int),
                       np.array(to, dtype=int), geometry)


def load_network(path: str | Path) -> RoadNetwork:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"not valid JSON: {exc}") from None
    return network_from_document(doc)


def save_network(net: RoadNetwork, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(net.to_document(), fh, indent=1)


def position_coords(net: RoadNetwork, pos: RoadPosition) -> np.ndarray:
    length = net.lengths[pos.edge]
    if not -GEOMETRY_TOLERANCE <= pos.offset <= length + GEOMETRY_TOLERANCE:
        raise OffsetOutOfRange(f"offset {pos.offset} outside [0, {length}] on edge {pos.edge}")
    return net.coords(pos.edge, pos.offset)


def nearest_positions(net: RoadNetwork, point, radius: float) -> list[tuple[RoadPosition, float]]:
    """Closest position on every edge lying within ``radius`` of ``point``, nearest first."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    p = np.asarray(point, dtype=float)
    ab = net._seg_b - net._seg_a
    seg_len2 = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", p - net._seg_a, ab) / seg_len2, 0.0, 1.0)
    foot = net._seg_a + t[:, None] * ab
    dist = np.hypot(*(foot - p).T)
    order = np.lexsort((dist, net._seg_edge))
    edges, first = np.unique(net._seg_edge[order], return_index=True)
    best = order[first]
    out = []
    for e, s in zip(edges, best):
        if dist[s] <= radius:
            offset = min(net._seg_off[s] + t[s] * np.sqrt(seg_len2[s]), net.lengths[e])
            out.append((RoadPosition(int(e), float(offset)), float(dist[s])))
    out.sort(key=lambda item: (item[1], item[0].edge))
    return out


def _grid(base: float, lo: float, length: float, d_max: float, resolution: float):
    """Grid distances k*resolution with base+lo < d <= min(base+length, d_max)."""
    k_min = math.floor((base + lo) / resolution + GRID_EPS) + 1
    k_max = math.floor(min(base + length, d_max) / resolution + GRID_EPS)
    if k_max < k_min:
        return np.empty(0), np.empty(0)
    dist = np.arange(k_min, k_max + 1) * resolution
    return np.minimum(dist - base, length), dist


def enumerate_routes(net: RoadNetwork, start: RoadPosition, d_max: float, resolution: float,
                     max_routes: int = 200_000) -> list[RouteOption]:
    """All edge sequences from ``start`` with grid end points within ``d_max``.

    End points sit at road distances resolution, 2*resolution, ... from the
    start.  On later edges the node point itself belongs to the preceding edge
    (offset 0 is never produced).  The stay-on-edge route is always returned;
    other routes are returned only when they carry at least one grid point.
    Cycles and U-turns are followed as long as the distance allows.
    """
    if d_max <= 0 or resolution <= 0:
        raise ValueError("d_max and resolution must be positive")
    e0, a0 = start.edge, float(start.offset)
    len0 = net.lengths[e0]
    offs, dist = _grid(-a0, a0, len0, d_max, resolution)
    routes = [RouteOption((e0,), a0, -a0, offs, dist)]
    stack = [((e0,), len0 - a0)]
    while stack:
        edges, base = stack.pop()
        # the next edge has a grid point only if base + resolution <= d_max
        if base + resolution > d_max + GRID_EPS * resolution:
            continue
        for e in reversed(net.out_edges[net.edge_to[edges[-1]]]):
            offs, dist = _grid(base, 0.0, net.lengths[e], d_max, resolution)
            if offs.size == 0:
                continue
            path = edges + (e,)
            routes.append(RouteOption(path, a0, base, offs, dist))
            if len(routes) > max_routes:
                raise ExplosionGuard(f"more than {max_routes} routes within {d_max} m")
            stack.append((path, base + net.lengths[e]))
    return routes


def shortest_road_distance(net: RoadNetwork, a: RoadPosition, b: RoadPosition, node_dist) -> float:
    """Road distance from a to b given a node-to-node distance lookup."""
    if a.edge == b.edge and b.offset >= a.offset - GEOMETRY_TOLERANCE:
        return max(b.offset - a.offset, 0.0)
    head = net.edge_to[a.edge]
    tail = net.edge_from[b.edge]
    return (net.lengths[a.edge] - a.offset) + node_dist(head, tail) + b.offset


def _two_way(nodes: dict, links: Iterable[tuple[str, str, list]]) -> RoadNetwork:
    node_ids = list(nodes)
    node_xy = np.array([nodes[n] for n in node_ids], dtype=float)
    index = {n: i for i, n in enumerate(node_ids)}
    edge_ids, frm, to, geometry = [], [], [], []
    for u, v, via in links:
        pts = [nodes[u], *via, nodes[v]]
        for a, b, g in ((u, v, pts), (v, u, pts[::-1])):
            edge_ids.append(f"{a}-{b}")
            frm.append(index[a])
            to.append(index[b])
            geometry.append(np.array(g, dtype=float))
    return RoadNetwork(node_ids, node_xy, edge_ids, np.array(frm), np.array(to), geometry)


def grid_network(rows: int, cols: int, spacing: float = 200.0) -> RoadNetwork:
    """Regular grid of two-way streets; rows*cols nodes, 4*rows*cols - 2*(rows+cols) edges."""
    nodes = {f"n{r}_{c}": (c * spacing, r * spacing) for r in range(rows) for c in range(cols)}
    links = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                links.append((f"n{r}_{c}", f"n{r}_{c + 1}", []))
            if r + 1 < rows:
                links.append((f"n{r}_{c}", f"n{r + 1}_{c}", []))
    return _two_way(nodes, links)


def fork_network() -> RoadNetwork:
    """One-way road that splits into two close parallel branches and rejoins.

    The branches run 16 m apart, so GPS noise leaves the branch ambiguous.
    """
    nodes = {"a": (0.0, 0.0), "b": (200.0, 0.0), "c": (1000.0, 0.0), "d": (1400.0, 0.0)}
    node_ids = list(nodes)
    index = {n: i for i, n in enumerate(node_ids)}
    specs = [
        ("trunk", "a", "b", [(0.0, 0.0), (200.0, 0.0)]),
        ("upper", "b", "c", [(200.0, 0.0), (300.0, 8.0), (900.0, 8.0), (1000.0, 0.0)]),
        ("lower", "b", "c", [(200.0, 0.0), (300.0, -8.0), (900.0, -8.0), (1000.0, 0.0)]),
        ("exit", "c", "d", [(1000.0, 0.0), (1400.0, 0.0)]),
    ]
    return RoadNetwork(node_ids, np.array([nodes[n] for n in node_ids]),
                       [s[0] for s in specs], np.array([index[s[1]] for s in specs]),
                       np.array([index[s[2]] for s in specs]),
                       [np.array(s[3], dtype=float) for s in specs])
