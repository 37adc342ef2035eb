"""Candidate path discovery between consecutive candidate sets.

Between two GPS fixes separated by ``dt`` seconds a vehicle can only
reach finitely many link sequences, so admissible paths are enumerated by
a depth-first search bounded by travel time at link speed limits (with a
speeding margin, ``v_max`` over the network's top speed limit).  A path
never repeats a directed link.  The fastest-path query used for pruning
and for greedy baselines is an A* search whose heuristic is the straight
distance scaled by the top network speed, which keeps it admissible.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from mapmatch.network import GeoPoint, Location, RoadNetwork, distance, point_at
from mapmatch.projection import CandidateSet


class BackwardPolicy(Enum):
    """How to treat apparent rearward movement on a single link."""

    ALLOW_BACKWARD = "allow_backward"
    GRID_FORWARD_ONLY = "grid_forward_only"
    MONOTONE_HEURISTIC = "monotone_heuristic"


@dataclass(frozen=True)
class DiscoveryConfig:
    dt: float
    v_max: float = None  # defaults to 1.5x the network's top speed limit
    max_paths_per_pair: int = 20
    backward_policy: BackwardPolicy = BackwardPolicy.GRID_FORWARD_ONLY

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.max_paths_per_pair < 1:
            raise ValueError("max_paths_per_pair must be at least 1")

    def time_budget(self, network: RoadNetwork) -> float:
        """Travel-time budget at speed limits, with the speeding margin."""
        v_max = self.v_max if self.v_max is not None else 1.5 * network.max_speed_limit
        return self.dt * (v_max / network.max_speed_limit)


@dataclass(frozen=True)
class Path:
    """A concrete drive from one on-road location to another.

    ``links`` is the ordered traversed link sequence; consecutive links are
    adjacent, the start lies on the first link and the end on the last.
    ``length`` is signed: a backward single-link path (apparent rearward
    movement from GPS noise) has ``end.offset < start.offset`` and a
    negative length; its magnitude is used for features and travel time.
    """

    start: Location
    end: Location
    links: tuple
    length: float
    backward: bool = False


def path_length(network: RoadNetwork, links, start_offset: float, end_offset: float) -> float:
    if len(links) == 1:
        return end_offset - start_offset
    total = network.links[links[0]].length - start_offset
    for lid in links[1:-1]:
        total += network.links[lid].length
    return total + end_offset


def path_travel_time(network: RoadNetwork, path: Path) -> float:
    """Travel time at speed limits over the traversed (partial) links."""
    if len(path.links) == 1:
        return abs(path.length) / network.links[path.links[0]].speed_limit
    first = network.links[path.links[0]]
    t = (first.length - path.start.offset) / first.speed_limit
    for lid in path.links[1:-1]:
        link = network.links[lid]
        t += link.travel_time
    last = network.links[path.links[-1]]
    return t + path.end.offset / last.speed_limit


@dataclass
class TransitionLayer:
    """Candidate paths between two candidate sets with compatibility maps.

    ``start_compat[j]`` / ``end_compat[j]`` give the unique start and end
    candidate index of path ``j``, which encode the binary start/end
    compatibility relations of the trellis.
    """

    paths: list[Path]
    start_compat: np.ndarray
    end_compat: np.ndarray
    n_start: int
    n_end: int
    _feature_cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.paths)


def astar_fastest_path(network: RoadNetwork, a: Location, b: Location, budget: float):
    """Minimum expected-travel-time path from ``a`` to ``b`` within ``budget``.

    Link cost is length over speed limit.  Returns ``None`` when no path
    fits the budget.  The same-link forward case short-circuits to the
    direct within-link drive, which no detour can beat.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    if a.link == b.link and b.offset >= a.offset:
        link = network.links[a.link]
        t = (b.offset - a.offset) / link.speed_limit
        if t > budget + 1e-9:
            return None
        return Path(a, b, (a.link,), b.offset - a.offset)

    target = point_at(network, b)
    v_top = network.max_speed_limit

    def heuristic(link_id) -> float:
        link = network.links[link_id]
        p = GeoPoint(float(link.geometry[0, 0]), float(link.geometry[0, 1]), network.crs)
        return distance(p, target) / v_top

    start_link = network.links[a.link]
    g0 = (start_link.length - a.offset) / start_link.speed_limit
    goal_tail = b.offset / network.links[b.link].speed_limit

    best: dict = {}
    came: dict = {}
    frontier = []
    counter = 0
    for nxt in network.outgoing(a.link):
        if g0 + heuristic(nxt) <= budget + 1e-9:
            heapq.heappush(frontier, (g0 + heuristic(nxt), counter, nxt, g0))
            counter += 1
            best[nxt] = g0
            came[nxt] = None
    while frontier:
        _, _, lid, g = heapq.heappop(frontier)
        if g > best.get(lid, math.inf) + 1e-12:
            continue
        if lid == b.link:
            total = g + goal_tail
            if total > budget + 1e-9:
                return None
            links = [lid]
            cur = lid
            while came[cur] is not None:
                cur = came[cur]
                links.append(cur)
            links.append(a.link)
            links.reverse()
            return Path(a, b, tuple(links), path_length(network, links, a.offset, b.offset))
        link = network.links[lid]
        g_exit = g + link.travel_time
        for nxt in network.outgoing(lid):
            if g_exit < best.get(nxt, math.inf) - 1e-12:
                f = g_exit + heuristic(nxt)
                if f <= budget + 1e-9:
                    best[nxt] = g_exit
                    came[nxt] = lid
                    heapq.heappush(frontier, (f, counter, nxt, g_exit))
                    counter += 1
    return None


def _reverse_dijkstra(network: RoadNetwork, ends: list[tuple], budget: float) -> dict:
    """Minimum time from each node to any end location, searched backward."""
    dist: dict = {}
    frontier = []
    counter = 0
    for lid, offset in ends:
        link = network.links[lid]
        t0 = offset / link.speed_limit
        node = link.from_node
        if t0 < dist.get(node, math.inf):
            dist[node] = t0
            heapq.heappush(frontier, (t0, counter, node))
            counter += 1
    settled = set()
    while frontier:
        t, _, node = heapq.heappop(frontier)
        if node in settled:
            continue
        settled.add(node)
        for lid in network.links_in[node]:
            link = network.links[lid]
            t2 = t + link.travel_time
            if t2 <= budget + 1e-9 and t2 < dist.get(link.from_node, math.inf):
                dist[link.from_node] = t2
                heapq.heappush(frontier, (t2, counter, link.from_node))
                counter += 1
    return dist


def enumerate_paths(
    network: RoadNetwork, from_set: CandidateSet, to_set: CandidateSet, config: DiscoveryConfig
) -> TransitionLayer:
    """All admissible paths between two candidate sets.

    For each (start, end) candidate pair, simple link sequences within the
    travel-time budget are found by pruned depth-first search; the
    ``max_paths_per_pair`` shortest are kept, ordered by length then by the
    lexicographic link-id sequence so the layer is deterministic.
    """
    if not from_set.candidates or not to_set.candidates:
        raise ValueError("both candidate sets must be non-empty")
    budget = config.time_budget(network)

    ends_by_link: dict = {}
    for ei, cand in enumerate(to_set.candidates):
        ends_by_link.setdefault(cand.location.link, []).append((ei, cand.location.offset))
    dist_to_end = _reverse_dijkstra(
        network, [(c.location.link, c.location.offset) for c in to_set.candidates], budget
    )

    found: dict[tuple, list] = {}

    def record(si, ei, links, length):
        found.setdefault((si, ei), []).append((length, tuple(str(l) for l in links), tuple(links)))

    for si, start in enumerate(from_set.candidates):
        s_link = network.links[start.location.link]
        o_s = start.location.offset

        # Degenerate same-link pairs, subject to the backward policy.
        for ei, o_e in ends_by_link.get(start.location.link, ()):
            delta = o_e - o_s
            if delta >= 0:
                if delta / s_link.speed_limit <= budget + 1e-9:
                    record(si, ei, [start.location.link], delta)
            elif config.backward_policy is BackwardPolicy.ALLOW_BACKWARD:
                if -delta / s_link.speed_limit <= budget + 1e-9:
                    record(si, ei, [start.location.link], delta)

        t_exit = (s_link.length - o_s) / s_link.speed_limit
        if t_exit > budget + 1e-9:
            continue
        length_exit = s_link.length - o_s
        visited = {start.location.link}
        stack = []

        def dfs(link_id, t_entry, len_entry):
            link = network.links[link_id]
            stack.append(link_id)
            visited.add(link_id)
            for ei, o_e in ends_by_link.get(link_id, ()):
                t_total = t_entry + o_e / link.speed_limit
                if t_total <= budget + 1e-9:
                    record(si, ei, [start.location.link, *stack], len_entry + o_e)
            t_next = t_entry + link.travel_time
            node = link.to_node
            # dist_to_end[node] is the fastest way to finish from this node,
            # so branches that cannot meet the budget are cut here.
            if t_next + dist_to_end.get(node, math.inf) > budget + 1e-9:
                stack.pop()
                visited.discard(link_id)
                return
            for nxt in network.links_out[node]:
                if nxt not in visited:
                    dfs(nxt, t_next, len_entry + link.length)
            stack.pop()
            visited.discard(link_id)

        if t_exit + dist_to_end.get(s_link.to_node, math.inf) <= budget + 1e-9:
            for nxt in network.links_out[s_link.to_node]:
                dfs(nxt, t_exit, length_exit)

    paths: list[Path] = []
    start_idx: list[int] = []
    end_idx: list[int] = []
    for (si, ei) in sorted(found):
        entries = sorted(found[(si, ei)])[: config.max_paths_per_pair]
        s_loc = from_set.candidates[si].location
        e_loc = to_set.candidates[ei].location
        for length, _, links in entries:
            paths.append(Path(s_loc, e_loc, links, length, backward=length < 0))
            start_idx.append(si)
            end_idx.append(ei)
    return TransitionLayer(
        paths=paths,
        start_compat=np.asarray(start_idx, dtype=np.int64),
        end_compat=np.asarray(end_idx, dtype=np.int64),
        n_start=len(from_set.candidates),
        n_end=len(to_set.candidates),
    )


def check_flow(layers, first: CandidateSet, latest: CandidateSet) -> bool:
    """Whether any candidate of ``latest`` is reachable from ``first``.

    A false result mandates a trajectory break: no compatible trajectory
    exists through the chained transition layers.
    """
    if not layers:
        return len(first) > 0
    reach = np.ones(layers[0].n_start, dtype=bool)
    for layer in layers:
        nxt = np.zeros(layer.n_end, dtype=bool)
        if len(layer):
            ok = reach[layer.start_compat]
            nxt[layer.end_compat[ok]] = True
        reach = nxt
        if not reach.any():
            return False
    return True
