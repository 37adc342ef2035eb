"""Synthetic road networks, driver simulation, and GPS noise.

Grid networks with two-way streets provide a strongly connected planar
substrate.  Trajectories can be generated two ways:

- ``local``: the vehicle drives at the speed limit and, at each
  intersection, samples the next link with weight exp(mu . phi(link)).
  Cheap and plausible, but on an equal-length grid the per-node
  normalizers make the induced path distribution independent of the
  length weight.
- ``path``: every ``decision_period`` seconds the vehicle samples a whole
  continuation path with weight proportional to exp(mu . phi(path)) over
  all link sequences reachable within the period at speed limits, with
  the endpoint drawn from the matching truncated exponential.  This is
  the model the filter assumes, so generate-then-recover experiments are
  well specified.

Both are deterministic given the seed and record ground truth at the base
period.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mapmatch.errors import DataError
from mapmatch.evaluation import GroundTruth
from mapmatch.features import COMPLEX, FeatureExtractor, ModelParams, extract
from mapmatch.network import GeoPoint, Link, Location, PLANAR, RoadNetwork, point_at
from mapmatch.paths import Path

LOCAL = "local"
PATH_LEVEL = "path"


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    block_length: float = 100.0
    speed_limit: float = 10.0
    stop_sign_fraction: float = 0.0
    signal_fraction: float = 0.0
    lanes: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("grid needs at least 2 rows and 2 columns")
        if not (0 <= self.stop_sign_fraction <= 1 and 0 <= self.signal_fraction <= 1):
            raise ValueError("fractions must lie in [0, 1]")


@dataclass(frozen=True)
class SimSpec:
    driver_params: ModelParams
    extractor: FeatureExtractor
    duration: float
    base_period: float = 1.0
    seed: int = 0
    sampler: str = PATH_LEVEL
    decision_period: float = 60.0
    # Drivers may mildly exceed speed limits; keep equal to the discovery
    # margin (v_max over the top limit) so the generative path support
    # matches what the filter enumerates.
    speed_margin: float = 1.5
    start: Location = None

    def __post_init__(self):
        if self.duration <= 0 or self.base_period <= 0:
            raise ValueError("duration and base_period must be positive")
        if self.sampler not in (LOCAL, PATH_LEVEL):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.sampler == PATH_LEVEL:
            ratio = self.decision_period / self.base_period
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError("decision_period must be a multiple of base_period")


def generate_grid(spec: GridSpec) -> RoadNetwork:
    """A rows x cols grid with two directed links per street segment."""
    nodes = {}
    for r in range(spec.rows):
        for c in range(spec.cols):
            nodes[r * spec.cols + c] = (c * spec.block_length, r * spec.block_length)
    rng = np.random.default_rng(spec.seed)
    links = []

    def add(a, b):
        ax, ay = nodes[a]
        bx, by = nodes[b]
        links.append(
            Link(
                id=len(links),
                from_node=a,
                to_node=b,
                length=spec.block_length,
                speed_limit=spec.speed_limit,
                lanes=spec.lanes,
                stop_signs=int(rng.random() < spec.stop_sign_fraction),
                signals=int(rng.random() < spec.signal_fraction),
                geometry=[[ax, ay], [bx, by]],
            )
        )

    for r in range(spec.rows):
        for c in range(spec.cols):
            n = r * spec.cols + c
            if c + 1 < spec.cols:
                add(n, n + 1)
                add(n + 1, n)
            if r + 1 < spec.rows:
                add(n, n + spec.cols)
                add(n + spec.cols, n)
    return RoadNetwork(PLANAR, nodes, links)


def _continuation_weight(params: ModelParams, extractor: FeatureExtractor, network, link_id) -> float:
    link = network.links[link_id]
    path = Path(Location(link_id, 0.0), Location(link_id, link.length), (link_id,), link.length)
    return float(params.mu @ extract(extractor, path, network))


def add_gps_noise(truth: GroundTruth, sigma: float, seed: int) -> list:
    """Observations from truth positions plus isotropic Gaussian noise.

    Noise is sigma per planar axis; with sigma = 0 the observations are
    the exact true points.  Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    out = []
    for p, t in zip(truth.points, truth.timestamps):
        if p.crs != PLANAR:
            raise DataError("GPS noise generation expects planar coordinates")
        dx, dy = (rng.standard_normal(2) * sigma) if sigma > 0 else (0.0, 0.0)
        out.append((GeoPoint(p.x + dx, p.y + dy, p.crs), t))
    return out


class _Drive:
    """Accumulates ground truth ticks along a piecewise-linear drive."""

    def __init__(self, network: RoadNetwork, base_period: float, start: Location):
        self.network = network
        self.base_period = base_period
        self.timestamps = [0.0]
        self.states = [start]
        self.paths = []

    def advance(self, links: list, end_offset: float, duration: float) -> Location:
        """Drive the link sequence at constant progress for ``duration``.

        ``links`` starts at the current location's link; the drive ends at
        ``end_offset`` on the last link.  Emits one state per base period
        and the micro-path between consecutive ticks.
        """
        start = self.states[-1]
        net = self.network
        # Distance from the start position to the end of each sequence link.
        ends = []
        acc = 0.0
        for i, lid in enumerate(links):
            acc += net.links[lid].length - (start.offset if i == 0 else 0.0)
            ends.append(acc)
        total = ends[-1] - (net.links[links[-1]].length - end_offset)
        n_ticks = int(round(duration / self.base_period))
        i_prev = 0
        prev_dist = 0.0
        for k in range(1, n_ticks + 1):
            dist = total if k == n_ticks else total * (k / n_ticks)
            i_cur = i_prev
            while i_cur < len(links) - 1 and dist > ends[i_cur] + 1e-12:
                i_cur += 1
            length_i = net.links[links[i_cur]].length
            off = min(max(length_i - (ends[i_cur] - dist), 0.0), length_i)
            loc = Location(links[i_cur], off)
            self.paths.append(Path(self.states[-1], loc, tuple(links[i_prev : i_cur + 1]), dist - prev_dist))
            self.states.append(loc)
            self.timestamps.append(self.timestamps[-1] + self.base_period)
            i_prev, prev_dist = i_cur, dist
        return self.states[-1]

    def truth(self, network: RoadNetwork) -> GroundTruth:
        points = [point_at(network, s) for s in self.states]
        return GroundTruth(self.timestamps, self.states, points, self.paths, self.base_period)


def _simulate_local(network: RoadNetwork, sim: SimSpec, rng, start: Location) -> GroundTruth:
    drive = _Drive(network, sim.base_period, start)
    loc = start
    n_ticks = int(round(sim.duration / sim.base_period))
    for _ in range(n_ticks):
        budget = sim.base_period
        links = [loc.link]
        offset = loc.offset
        while budget > 1e-12:
            link = network.links[links[-1]]
            room = link.length - offset
            t_room = room / link.speed_limit
            if t_room >= budget:
                offset += link.speed_limit * budget
                budget = 0.0
            else:
                budget -= t_room
                choices = network.links_out[link.to_node]
                if not choices:
                    raise DataError(f"vehicle trapped at dead end node {link.to_node!r}")
                weights = np.array(
                    [_continuation_weight(sim.driver_params, sim.extractor, network, c) for c in choices]
                )
                weights = np.exp(weights - weights.max())
                nxt = choices[rng.choice(len(choices), p=weights / weights.sum())]
                links.append(nxt)
                offset = 0.0
        drive.advance(links, offset, sim.base_period)
        loc = drive.states[-1]
    return drive.truth(network)


def _enumerate_continuations(network: RoadNetwork, loc: Location, horizon: float):
    """Link sequences reachable from ``loc`` within ``horizon`` seconds.

    Yields ``(links, lo, hi, base_len, entry_time)``: the endpoint may lie
    anywhere in offset interval (lo, hi] of the final link; ``base_len``
    is the path length when the endpoint sits at ``lo``.
    """
    out = []
    start_link = network.links[loc.link]
    hi0 = min(start_link.length, loc.offset + start_link.speed_limit * horizon)
    out.append(((loc.link,), loc.offset, hi0, 0.0, 0.0))
    t_exit = (start_link.length - loc.offset) / start_link.speed_limit
    base0 = start_link.length - loc.offset

    def walk(links, t_entry, base_len):
        lid = links[-1]
        link = network.links[lid]
        hi = min(link.length, link.speed_limit * (horizon - t_entry))
        if hi > 0:
            out.append((tuple(links), 0.0, hi, base_len, t_entry))
        t_next = t_entry + link.travel_time
        if t_next >= horizon - 1e-12:
            return
        for nxt in network.links_out[link.to_node]:
            if nxt not in links:
                walk(links + [nxt], t_next, base_len + link.length)

    if t_exit < horizon - 1e-12:
        for nxt in network.links_out[start_link.to_node]:
            walk([loc.link, nxt], t_exit, base0)
    return out


def _simulate_path_level(network: RoadNetwork, sim: SimSpec, rng, start: Location) -> GroundTruth:
    drive = _Drive(network, sim.base_period, start)
    loc = start
    mu = sim.driver_params.mu
    remaining = sim.duration
    while remaining > 1e-9:
        window = min(sim.decision_period, remaining)
        options = _enumerate_continuations(network, loc, window * sim.speed_margin)
        logs = []
        metas = []
        for links, lo, hi, base_len, _ in options:
            if hi <= lo + 1e-12:
                continue
            final = network.links[links[-1]]
            ref = Path(Location(links[0], loc.offset), Location(links[-1], lo), links, base_len)
            a = float(mu @ extract(sim.extractor, ref, network))
            b = mu[0]
            if sim.extractor.kind == COMPLEX:
                b = mu[0] + mu[5] / final.speed_limit
            span = hi - lo
            # log integral of exp(a + b*x) over x in (0, span]
            if abs(b * span) < 1e-12:
                log_w = a + math.log(span)
            elif b > 0:
                log_w = a + b * span + math.log1p(-math.exp(-b * span)) - math.log(b)
            else:
                log_w = a + math.log1p(-math.exp(b * span)) - math.log(-b)
            logs.append(log_w)
            metas.append((links, lo, hi, base_len, b))
        if not metas:
            raise DataError(f"vehicle trapped: no continuation from {loc}")
        logs = np.asarray(logs)
        probs = np.exp(logs - logs.max())
        probs /= probs.sum()
        links, lo, hi, base_len, b = metas[rng.choice(len(metas), p=probs)]
        span = hi - lo
        u = rng.random()
        if abs(b * span) < 1e-12:
            x = u * span
        else:
            # inverse CDF of the exponential tilt restricted to (0, span]
            x = math.log1p(u * math.expm1(b * span)) / b
        end_offset = lo + x
        drive.advance(list(links), end_offset, window)
        loc = drive.states[-1]
        remaining -= window
    return drive.truth(network)


def simulate_trajectory(network: RoadNetwork, sim: SimSpec) -> GroundTruth:
    """Ground truth for one vehicle, deterministic under the seed."""
    rng = np.random.default_rng(sim.seed)
    if sim.start is not None:
        start = sim.start
    else:
        link_ids = sorted(network.links, key=str)
        lid = link_ids[rng.integers(len(link_ids))]
        start = Location(lid, float(rng.random()) * network.links[lid].length)
    if sim.sampler == LOCAL:
        return _simulate_local(network, sim, rng, start)
    return _simulate_path_level(network, sim, rng, start)
