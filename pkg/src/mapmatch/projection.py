"""Projection of one GPS fix onto a finite set of candidate road states.

Each candidate carries the log-density of the observation under an
isoradial Gaussian noise model with standard deviation sigma.  Two
candidate placement strategies are supported: the single most likely
offset per link (the argmax of the observation density under a uniform
offset prior), and a regular grid of offsets along each in-radius link.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

from mapmatch.network import GeoPoint, Location, RoadNetwork, distance, links_within_radius, point_at

MOST_LIKELY = "most_likely"
GRID = "grid"

LOG_2PI = math.log(2.0 * math.pi)


class EmptyProjection(Exception):
    """No link lies within the projection radius of an observation."""


@dataclass(frozen=True)
class ProjectionConfig:
    sigma: float
    radius: float = None  # default 4 * sigma: tail mass beyond it is negligible
    strategy: str = MOST_LIKELY
    grid_step: float = None
    prior: str = "uniform"

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.radius is None:
            object.__setattr__(self, "radius", 4.0 * self.sigma)
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.radius < self.sigma:
            warnings.warn(f"projection radius {self.radius} is below sigma {self.sigma}", stacklevel=2)
        if self.strategy not in (MOST_LIKELY, GRID):
            raise ValueError(f"unknown projection strategy {self.strategy!r}")
        if self.strategy == GRID and (self.grid_step is None or self.grid_step <= 0):
            raise ValueError("grid strategy requires a positive grid_step")
        if self.prior != "uniform":
            raise ValueError(f"unsupported prior {self.prior!r}")


@dataclass(frozen=True)
class CandidateState:
    """One on-road hypothesis for a GPS fix."""

    location: Location
    gps_distance: float
    obs_log_density: float


@dataclass(frozen=True)
class CandidateSet:
    """All candidate states for one observation, in (link, offset) order."""

    observation: GeoPoint
    timestamp: float
    candidates: tuple[CandidateState, ...]

    def __len__(self):
        return len(self.candidates)


def observation_log_density(g: GeoPoint, x: Location, sigma: float, network: RoadNetwork) -> float:
    """Log-density of observing ``g`` from state ``x`` under Gaussian noise."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = distance(g, point_at(network, x))
    return log_density_at(d, sigma)


def log_density_at(d: float, sigma: float) -> float:
    """log(1/(sqrt(2 pi) sigma)) - d^2 / (2 sigma^2)."""
    return -0.5 * LOG_2PI - math.log(sigma) - (d * d) / (2.0 * sigma * sigma)


def project(network: RoadNetwork, g: GeoPoint, t: float, config: ProjectionConfig) -> CandidateSet:
    """Map a GPS fix to its candidate states.

    Raises :class:`EmptyProjection` when no link is within the radius; the
    caller decides whether to widen the radius or break the trajectory.
    """
    hits = links_within_radius(network, g, config.radius)
    candidates = []
    if config.strategy == MOST_LIKELY:
        for link_id, offset, d in hits:
            candidates.append(
                CandidateState(Location(link_id, offset), d, log_density_at(d, config.sigma))
            )
    else:
        for link_id, _, _ in hits:
            length = network.links[link_id].length
            offsets = [i * config.grid_step for i in range(int(length / config.grid_step) + 1)]
            if length - offsets[-1] > 1e-9:
                offsets.append(length)
            for o in offsets:
                d = distance(g, point_at(network, Location(link_id, o)))
                if d <= config.radius:
                    candidates.append(
                        CandidateState(Location(link_id, o), d, log_density_at(d, config.sigma))
                    )
    if not candidates:
        raise EmptyProjection(f"no link within {config.radius} m of ({g.x}, {g.y})")
    candidates.sort(key=_candidate_key)
    return CandidateSet(g, t, tuple(candidates))


def monotone_adjust(
    network: RoadNetwork, config: ProjectionConfig, prev: CandidateSet, next: CandidateSet
) -> CandidateSet:
    """Forward-only offset heuristic for sparse per-link candidates.

    Any candidate of ``next`` whose link also carries a candidate in
    ``prev`` is moved to ``max(prev_offset, next_offset)``; its distance and
    log-density are recomputed.  Candidates on fresh links are untouched.
    """
    prev_offsets: dict = {}
    for c in prev.candidates:
        key = c.location.link
        prev_offsets[key] = max(prev_offsets.get(key, -math.inf), c.location.offset)
    moved = []
    for c in next.candidates:
        before = prev_offsets.get(c.location.link)
        if before is not None and before > c.location.offset:
            loc = Location(c.location.link, before)
            d = distance(next.observation, point_at(network, loc))
            c = CandidateState(loc, d, log_density_at(d, config.sigma))
        moved.append(c)
    moved.sort(key=_candidate_key)
    return replace(next, candidates=tuple(moved))


def _candidate_key(c: CandidateState):
    return (str(c.location.link), c.location.offset)
