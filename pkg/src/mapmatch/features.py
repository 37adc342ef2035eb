"""Path feature extraction and the driver/observation model parameters.

The driver model assigns each path an unnormalized log-weight that is
linear in its features (an exponential-family model): mu . phi(path).
The observation side is a single precision parameter epsilon = 1/sigma^2
applied to the -d^2/2 point feature, so the full parameter vector is
theta = (epsilon, mu).

Two feature sets are provided.  ``simple`` has one path feature, the
length.  ``complex`` has nine, in this fixed order: length, stop signs,
signals, left turns, right turns, minimum travel time at speed limits,
maximum speed limit, maximum lanes, minimum lanes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from mapmatch.network import RoadNetwork
from mapmatch.paths import Path

SIMPLE = "simple"
COMPLEX = "complex"

COMPLEX_FEATURES = (
    "length",
    "stop_signs",
    "signals",
    "left_turns",
    "right_turns",
    "min_travel_time",
    "max_speed",
    "max_lanes",
    "min_lanes",
)


@dataclass(frozen=True)
class FeatureExtractor:
    kind: str = SIMPLE
    # Signed heading changes inside (lo, hi) degrees count as turns; the
    # lower bound excludes lane-change wiggles, the upper bound U-turns.
    turn_angle_bounds: tuple = (30.0, 170.0)

    def __post_init__(self):
        if self.kind not in (SIMPLE, COMPLEX):
            raise ValueError(f"unknown feature set {self.kind!r}")
        lo, hi = self.turn_angle_bounds
        if not (0 < lo < hi <= 180):
            raise ValueError("turn_angle_bounds must satisfy 0 < lo < hi <= 180")

    @property
    def dim(self) -> int:
        return 1 if self.kind == SIMPLE else len(COMPLEX_FEATURES)

    def cache_key(self):
        return (self.kind, self.turn_angle_bounds)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Observation precision and driver feature weights, theta = (eps, mu)."""

    epsilon: float
    mu: np.ndarray

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))

    @property
    def sigma(self) -> float:
        return self.epsilon ** -0.5

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([[self.epsilon], self.mu])

    @staticmethod
    def from_sigma(sigma: float, mu) -> "ModelParams":
        return ModelParams(sigma ** -2.0, np.asarray(mu, dtype=float))


def _bearing(dx: float, dy: float) -> float:
    return math.degrees(math.atan2(dy, dx))


def _link_bearings(network: RoadNetwork, link_id) -> tuple[float, float]:
    """Heading of the first and last geometry segment, in degrees."""
    geom = network.links[link_id].geometry
    if network.crs == "WGS84":
        # Local longitude scaling; adequate for bearing classification.
        k = math.cos(math.radians(float(np.mean(geom[:, 1]))))
    else:
        k = 1.0
    b0 = _bearing((geom[1, 0] - geom[0, 0]) * k, geom[1, 1] - geom[0, 1])
    b1 = _bearing((geom[-1, 0] - geom[-2, 0]) * k, geom[-1, 1] - geom[-2, 1])
    return b0, b1


def count_turns(path: Path, network: RoadNetwork, bounds: tuple = (30.0, 170.0)) -> tuple[int, int]:
    """Left and right turn counts at the path's link-to-link transitions.

    The signed heading change is the start bearing of the next link minus
    the end bearing of the previous one, normalized to (-180, 180];
    positive changes within the bounds are left turns, negative are right.
    """
    lo, hi = bounds
    left = right = 0
    for prev, nxt in zip(path.links[:-1], path.links[1:]):
        _, out_bearing = _link_bearings(network, prev)
        in_bearing, _ = _link_bearings(network, nxt)
        delta = (in_bearing - out_bearing + 180.0) % 360.0 - 180.0
        if delta == -180.0:
            delta = 180.0
        if lo < delta < hi:
            left += 1
        elif -hi < delta < -lo:
            right += 1
    return left, right


def extract(extractor: FeatureExtractor, path: Path, network: RoadNetwork) -> np.ndarray:
    """Feature vector of one path.

    Backward paths use their magnitude length and count no turns.  Stop
    signs and signals are paid when exiting a link, so the end link's are
    not included.
    """
    links = [network.links[lid] for lid in path.links]
    length = abs(path.length)
    if extractor.kind == SIMPLE:
        return np.array([length])
    stop_signs = sum(l.stop_signs for l in links[:-1])
    signals = sum(l.signals for l in links[:-1])
    if path.backward or len(links) < 2:
        left = right = 0
    else:
        left, right = count_turns(path, network, extractor.turn_angle_bounds)
    if len(links) == 1:
        travel_time = length / links[0].speed_limit
    else:
        travel_time = (links[0].length - path.start.offset) / links[0].speed_limit
        travel_time += sum(l.travel_time for l in links[1:-1])
        travel_time += path.end.offset / links[-1].speed_limit
    return np.array(
        [
            length,
            float(stop_signs),
            float(signals),
            float(left),
            float(right),
            travel_time,
            max(l.speed_limit for l in links),
            float(max(l.lanes for l in links)),
            float(min(l.lanes for l in links)),
        ]
    )


def layer_features(layer, extractor: FeatureExtractor, network: RoadNetwork) -> np.ndarray:
    """The (J, K) feature matrix of a transition layer, cached per extractor."""
    key = extractor.cache_key()
    mat = layer._feature_cache.get(key)
    if mat is None:
        if layer.paths:
            mat = np.vstack([extract(extractor, p, network) for p in layer.paths])
        else:
            mat = np.zeros((0, extractor.dim))
        layer._feature_cache[key] = mat
    return mat


def path_log_weight(params: ModelParams, features: np.ndarray) -> float:
    """Unnormalized log-weight mu . phi(path)."""
    features = np.asarray(features, dtype=float)
    if features.shape != params.mu.shape:
        raise ValueError(f"feature dimension {features.shape} does not match mu {params.mu.shape}")
    return float(params.mu @ features)


def baseline_params(kind: str) -> tuple[ModelParams, str]:
    """Classic matchers expressed as extreme parameter choices.

    ``shortest-path`` overwhelms the point term with a huge length penalty;
    ``closest-point`` does the reverse; ``hard-closest-point`` is the
    closest-point model meant to run under the online filtering strategy.
    """
    if kind == "shortest-path":
        return ModelParams(epsilon=0.001, mu=np.array([-1000.0])), "any"
    if kind == "closest-point":
        return ModelParams(epsilon=1000.0, mu=np.array([-0.001])), "any"
    if kind == "hard-closest-point":
        return ModelParams(epsilon=1000.0, mu=np.array([-0.001])), "online"
    raise ValueError(f"unknown baseline {kind!r}")


def save_model(params: ModelParams, extractor: FeatureExtractor, path) -> None:
    doc = {
        "sigma": params.sigma,
        "mu": [float(v) for v in params.mu],
        "feature_set": extractor.kind,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_model(path) -> tuple[ModelParams, FeatureExtractor]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    extractor = FeatureExtractor(kind=doc["feature_set"])
    params = ModelParams.from_sigma(float(doc["sigma"]), doc["mu"])
    if params.mu.shape != (extractor.dim,):
        raise ValueError(f"model file has {params.mu.shape[0]} weights for feature set {extractor.kind!r}")
    return params, extractor
