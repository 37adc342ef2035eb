"""Directed road graph with link geometry and fast radius queries.

A network is immutable after loading: adjacency tables and the spatial
index are built once and are safe for unrestricted concurrent reads.
Positions on the network are ``Location`` values, a (link, offset) pair
with the offset measured in meters from the link's entry node.
"""

from __future__ import annotations

import io
import json
import math
import os
import statistics
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from mapmatch.errors import NetworkLoadError

EARTH_RADIUS_M = 6_371_000.0
WGS84 = "WGS84"
PLANAR = "PlanarMeters"

# Tolerated relative gap between a polyline's arc length and the declared
# link length; within it offsets are rescaled, beyond it the load fails.
LENGTH_MISMATCH_TOL = 0.01


@dataclass(frozen=True)
class GeoPoint:
    """A point in the network's coordinate reference system."""

    x: float
    y: float
    crs: str = PLANAR

    def __post_init__(self):
        if self.crs not in (WGS84, PLANAR):
            raise ValueError(f"unknown crs {self.crs!r}")
        if self.crs == WGS84 and not (-90.0 <= self.y <= 90.0 and -180.0 <= self.x <= 180.0):
            raise ValueError(f"WGS84 coordinates out of range: ({self.x}, {self.y})")


@dataclass(frozen=True)
class Location:
    """A position on the road network: a link id and an offset in meters."""

    link: object
    offset: float


@dataclass
class Link:
    """A directed road link with physical attributes and a polyline geometry."""

    id: object
    from_node: object
    to_node: object
    length: float
    speed_limit: float
    lanes: int = 1
    stop_signs: int = 0
    signals: int = 0
    geometry: np.ndarray = None  # (V, 2) vertex array
    # Cumulative arc length per vertex, rescaled so cum[-1] == length.
    cum: np.ndarray = field(default=None, repr=False)

    @property
    def travel_time(self) -> float:
        return self.length / self.speed_limit


def distance(a: GeoPoint, b: GeoPoint) -> float:
    """Distance in meters between two points of the same crs.

    Planar coordinates use the Euclidean metric; WGS84 uses the haversine
    formula on a sphere of radius 6,371,000 m.
    """
    if a.crs != b.crs:
        raise ValueError(f"mixed crs: {a.crs} vs {b.crs}")
    if a.crs == PLANAR:
        return math.hypot(a.x - b.x, a.y - b.y)
    return _haversine(a.x, a.y, b.x, b.y)


def _haversine(lon1: float, lat1: float, lon2: float, lat2: float) -> float:
    phi1 = math.radians(lat1)
    phi2 = math.radians(lat2)
    dphi = phi2 - phi1
    dlam = math.radians(lon2 - lon1)
    s = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(s)))


class RoadNetwork:
    """Immutable directed road graph with a uniform-grid spatial index."""

    def __init__(self, crs: str, nodes: dict, links: Iterable[Link]):
        self.crs = crs
        self.nodes = dict(nodes)  # node id -> (x, y)
        self.links: dict = {}
        self.links_out: dict = {nid: [] for nid in self.nodes}  # node -> link ids leaving it
        self.links_in: dict = {nid: [] for nid in self.nodes}
        for link in links:
            if link.id in self.links:
                raise NetworkLoadError(f"duplicate link id {link.id!r}")
            for nid, role in ((link.from_node, "from"), (link.to_node, "to")):
                if nid not in self.nodes:
                    raise NetworkLoadError(f"link {link.id!r}: {role} node {nid!r} not defined")
            self._finish_link(link)
            self.links[link.id] = link
            self.links_out[link.from_node].append(link.id)
            self.links_in[link.to_node].append(link.id)
        for nid in self.nodes:
            self.links_out[nid].sort(key=_id_key)
            self.links_in[nid].sort(key=_id_key)
        self.max_speed_limit = max((l.speed_limit for l in self.links.values()), default=0.0)
        self._build_index()

    # -- construction -----------------------------------------------------

    def _finish_link(self, link: Link) -> None:
        if link.length <= 0:
            raise NetworkLoadError(f"link {link.id!r}: non-positive length {link.length}")
        if link.speed_limit <= 0:
            raise NetworkLoadError(f"link {link.id!r}: non-positive speed_limit")
        if link.lanes < 1 or link.stop_signs < 0 or link.signals < 0:
            raise NetworkLoadError(f"link {link.id!r}: bad attribute counts")
        geom = np.asarray(link.geometry, dtype=float)
        if geom.ndim != 2 or geom.shape[0] < 2 or geom.shape[1] != 2:
            raise NetworkLoadError(f"link {link.id!r}: geometry needs at least 2 [x, y] vertices")
        link.geometry = geom
        seg = [
            distance(GeoPoint(geom[i, 0], geom[i, 1], self.crs), GeoPoint(geom[i + 1, 0], geom[i + 1, 1], self.crs))
            for i in range(len(geom) - 1)
        ]
        arc = float(sum(seg))
        if arc <= 0:
            raise NetworkLoadError(f"link {link.id!r}: degenerate geometry")
        if abs(arc - link.length) / link.length > LENGTH_MISMATCH_TOL:
            raise NetworkLoadError(
                f"link {link.id!r}: polyline arc length {arc:.3f} differs from "
                f"declared length {link.length:.3f} by more than {LENGTH_MISMATCH_TOL:.0%}"
            )
        cum = np.concatenate([[0.0], np.cumsum(seg)]) * (link.length / arc)
        cum[-1] = link.length
        link.cum = cum

    def _chart(self, x: float, y: float) -> tuple[float, float]:
        """Map network coordinates into a meter-scaled plane for indexing."""
        if self.crs == PLANAR:
            return x, y
        return x * self._m_per_deg_x, y * self._m_per_deg_y

    def _build_index(self) -> None:
        if not self.links:
            self._cell = 50.0
            self._grid = {}
            return
        if self.crs == WGS84:
            mean_lat = statistics.fmean(y for _, y in self.nodes.values())
            self._m_per_deg_y = math.pi * EARTH_RADIUS_M / 180.0
            self._m_per_deg_x = self._m_per_deg_y * max(0.01, math.cos(math.radians(mean_lat)))
        self._cell = max(50.0, statistics.median(l.length for l in self.links.values()))
        grid: dict[tuple[int, int], list] = {}
        for link in self.links.values():
            pts = [self._chart(x, y) for x, y in link.geometry]
            xs = [p[0] for p in pts]
            ys = [p[1] for p in pts]
            for ix in range(int(min(xs) // self._cell), int(max(xs) // self._cell) + 1):
                for iy in range(int(min(ys) // self._cell), int(max(ys) // self._cell) + 1):
                    grid.setdefault((ix, iy), []).append(link.id)
        self._grid = grid

    # -- queries -----------------------------------------------------------

    def outgoing(self, link_id) -> list:
        """Link ids a vehicle can enter when exiting the given link."""
        return self.links_out[self.links[link_id].to_node]

    def incoming(self, link_id) -> list:
        return self.links_in[self.links[link_id].from_node]

    def candidate_links(self, g: GeoPoint, radius: float) -> list:
        """Superset of the links within ``radius`` of ``g`` (index cells)."""
        gx, gy = self._chart(g.x, g.y)
        pad = radius * 1.001 + 1e-9
        out: set = set()
        for ix in range(int((gx - pad) // self._cell), int((gx + pad) // self._cell) + 1):
            for iy in range(int((gy - pad) // self._cell), int((gy + pad) // self._cell) + 1):
                out.update(self._grid.get((ix, iy), ()))
        return sorted(out, key=_id_key)

    def closest_on_link(self, g: GeoPoint, link_id) -> tuple[float, float]:
        """Minimum distance from ``g`` to the link polyline and its offset.

        Returns ``(distance_m, offset_m)``; ties between segments go to the
        smaller offset.
        """
        link = self.links[link_id]
        geom = link.geometry
        if self.crs == PLANAR:
            pts = geom
            gx, gy = g.x, g.y
        else:
            # Local equirectangular chart anchored at g; accurate at the
            # sub-kilometer scales a projection radius spans.
            ky = math.pi * EARTH_RADIUS_M / 180.0
            kx = ky * max(0.01, math.cos(math.radians(g.y)))
            pts = np.column_stack([geom[:, 0] * kx, geom[:, 1] * ky])
            gx, gy = g.x * kx, g.y * ky
        ax, ay = pts[:-1, 0], pts[:-1, 1]
        dx, dy = np.diff(pts[:, 0]), np.diff(pts[:, 1])
        seg2 = dx * dx + dy * dy
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.clip(((gx - ax) * dx + (gy - ay) * dy) / seg2, 0.0, 1.0)
        t = np.where(seg2 > 0, t, 0.0)
        px = ax + t * dx
        py = ay + t * dy
        d2 = (gx - px) ** 2 + (gy - py) ** 2
        i = int(np.argmin(d2))
        offset = float(link.cum[i] + t[i] * (link.cum[i + 1] - link.cum[i]))
        return float(math.sqrt(d2[i])), min(offset, link.length)


def _id_key(link_id) -> str:
    return str(link_id)


def point_at(network: RoadNetwork, loc: Location) -> GeoPoint:
    """Interpolate the geographic point at an on-link offset."""
    link = network.links[loc.link]
    o = loc.offset
    if o < -1e-9 or o > link.length + 1e-9:
        raise ValueError(f"offset {o} out of range [0, {link.length}] on link {loc.link!r}")
    o = min(max(o, 0.0), link.length)
    cum = link.cum
    i = int(np.searchsorted(cum, o, side="right")) - 1
    i = min(max(i, 0), len(cum) - 2)
    span = cum[i + 1] - cum[i]
    t = 0.0 if span <= 0 else (o - cum[i]) / span
    x = link.geometry[i, 0] + t * (link.geometry[i + 1, 0] - link.geometry[i, 0])
    y = link.geometry[i, 1] + t * (link.geometry[i + 1, 1] - link.geometry[i, 1])
    return GeoPoint(float(x), float(y), network.crs)


def links_within_radius(network: RoadNetwork, g: GeoPoint, radius: float) -> list[tuple]:
    """All links whose minimum distance to ``g`` is at most ``radius``.

    Returns ``(link_id, closest_offset, distance)`` triples sorted by link
    id.  The spatial index provides a superset which is filtered with exact
    point-to-polyline distances.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if g.crs != network.crs:
        raise ValueError(f"point crs {g.crs} does not match network crs {network.crs}")
    out = []
    for link_id in network.candidate_links(g, radius):
        d, o = network.closest_on_link(g, link_id)
        if d <= radius:
            out.append((link_id, o, d))
    return out


# -- serialization ---------------------------------------------------------


def load_network(source, fmt: str = "json") -> RoadNetwork:
    """Load a network document.

    ``source`` may be a dict, a JSON string/bytes, a file-like object, or a
    path.  The only supported format is the JSON layout written by
    :func:`network_to_json`.
    """
    if fmt != "json":
        raise NetworkLoadError(f"unsupported network format {fmt!r}")
    doc = _read_json(source)
    try:
        crs = doc["crs"]
        raw_nodes = doc["nodes"]
        raw_links = doc["links"]
    except (KeyError, TypeError) as exc:
        raise NetworkLoadError(f"network document missing field: {exc}") from exc
    if crs not in (WGS84, PLANAR):
        raise NetworkLoadError(f"unknown crs {crs!r}")
    nodes = {}
    for i, n in enumerate(raw_nodes):
        try:
            nodes[n["id"]] = (float(n["x"]), float(n["y"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise NetworkLoadError(f"nodes[{i}]: {exc}") from exc
        if crs == WGS84:
            GeoPoint(nodes[n["id"]][0], nodes[n["id"]][1], crs)  # range check
    links = []
    for i, l in enumerate(raw_links):
        try:
            links.append(
                Link(
                    id=l["id"],
                    from_node=l["from"],
                    to_node=l["to"],
                    length=float(l["length"]),
                    speed_limit=float(l["speed_limit"]),
                    lanes=int(l.get("lanes", 1)),
                    stop_signs=int(l.get("stop_signs", 0)),
                    signals=int(l.get("signals", 0)),
                    geometry=l["geometry"],
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise NetworkLoadError(f"links[{i}]: {exc}") from exc
    return RoadNetwork(crs, nodes, links)


def network_to_json(network: RoadNetwork) -> dict:
    """The JSON document form of a network (inverse of :func:`load_network`)."""
    return {
        "crs": network.crs,
        "nodes": [{"id": nid, "x": x, "y": y} for nid, (x, y) in sorted(network.nodes.items(), key=lambda kv: _id_key(kv[0]))],
        "links": [
            {
                "id": l.id,
                "from": l.from_node,
                "to": l.to_node,
                "length": l.length,
                "speed_limit": l.speed_limit,
                "lanes": l.lanes,
                "stop_signs": l.stop_signs,
                "signals": l.signals,
                "geometry": [[float(x), float(y)] for x, y in l.geometry],
            }
            for l in sorted(network.links.values(), key=lambda l: _id_key(l.id))
        ],
    }


def _read_json(source):
    if isinstance(source, dict):
        return source
    if isinstance(source, (bytes, bytearray)):
        source = source.decode("utf-8")
    if isinstance(source, str):
        if "\n" not in source and not source.lstrip().startswith("{") and os.path.exists(source):
            with open(source, "r", encoding="utf-8") as fh:
                return _parse(fh.read())
        return _parse(source)
    if isinstance(source, os.PathLike):
        with open(source, "r", encoding="utf-8") as fh:
            return _parse(fh.read())
    if isinstance(source, io.IOBase) or hasattr(source, "read"):
        data = source.read()
        if isinstance(data, (bytes, bytearray)):
            data = data.decode("utf-8")
        return _parse(data)
    raise NetworkLoadError(f"cannot read network from {type(source).__name__}")


def _parse(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkLoadError(f"network parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
