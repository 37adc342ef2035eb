"""Shared fixtures: synthetic trellis builders and brute-force oracles."""

import itertools

import numpy as np
import pytest

from mapmatch.features import FeatureExtractor
from mapmatch.inference import Trellis
from mapmatch.network import GeoPoint, Link, Location, RoadNetwork
from mapmatch.paths import Path, TransitionLayer
from mapmatch.projection import CandidateSet, CandidateState

SIMPLE = FeatureExtractor(kind="simple")


def make_state_layer(log_densities, t=0.0, d=None, link_prefix="s"):
    """A fabricated candidate set with given observation log-densities."""
    log_densities = np.asarray(log_densities, dtype=float)
    if d is None:
        d = np.zeros(len(log_densities))
    cands = tuple(
        CandidateState(Location(f"{link_prefix}{t}_{i}", 0.0), float(d[i]), float(log_densities[i]))
        for i in range(len(log_densities))
    )
    return CandidateSet(GeoPoint(0.0, 0.0), t, cands)


def make_transition(start_idx, end_idx, lengths, n_start, n_end, extractor=SIMPLE):
    """A fabricated transition layer whose single feature is the length."""
    lengths = np.asarray(lengths, dtype=float)
    paths = [
        Path(Location(f"a{j}", 0.0), Location(f"b{j}", 0.0), (f"l{j}",), float(lengths[j]))
        for j in range(len(lengths))
    ]
    layer = TransitionLayer(
        paths=paths,
        start_compat=np.asarray(start_idx, dtype=np.int64),
        end_compat=np.asarray(end_idx, dtype=np.int64),
        n_start=n_start,
        n_end=n_end,
    )
    feats = np.zeros((len(lengths), extractor.dim))
    feats[:, 0] = lengths
    layer._feature_cache[extractor.cache_key()] = feats
    return layer


def make_trellis(obs_layers, transitions):
    """Trellis from fabricated layers (no network needed)."""
    return Trellis(list(obs_layers), list(transitions), network=None)


def random_trellis(rng, max_T=4, max_I=3, max_J=4):
    """A random flow-connected trellis with finite random log-weights."""
    while True:
        T = int(rng.integers(1, max_T + 1))
        sizes = [int(rng.integers(1, max_I + 1)) for _ in range(T)]
        obs_layers = [make_state_layer(rng.normal(size=sizes[t]), t=float(t)) for t in range(T)]
        transitions = []
        ok = True
        reach = np.ones(sizes[0], dtype=bool)
        for t in range(T - 1):
            J = int(rng.integers(1, max_J + 1))
            start = rng.integers(0, sizes[t], size=J)
            end = rng.integers(0, sizes[t + 1], size=J)
            lengths = rng.normal(size=J)
            transitions.append(make_transition(start, end, lengths, sizes[t], sizes[t + 1]))
            new_reach = np.zeros(sizes[t + 1], dtype=bool)
            for j in range(J):
                if reach[start[j]]:
                    new_reach[end[j]] = True
            reach = new_reach
            if not reach.any():
                ok = False
                break
        if ok:
            return make_trellis(obs_layers, transitions)


def enumerate_trajectories(trellis, params, extractor=SIMPLE):
    """All compatible (states, paths, log_potential) triples by brute force."""
    T = trellis.T
    etas = [trellis.path_log_weights(t, params, extractor) for t in range(T - 1)]
    obs = [trellis.obs_log_densities(t) for t in range(T)]
    out = []
    state_ranges = [range(len(o)) for o in obs]
    path_ranges = [range(len(layer)) for layer in trellis.transition_layers]
    for states in itertools.product(*state_ranges):
        for paths in itertools.product(*path_ranges):
            total = sum(obs[t][states[t]] for t in range(T))
            compatible = True
            for t, layer in enumerate(trellis.transition_layers):
                j = paths[t]
                if layer.start_compat[j] != states[t] or layer.end_compat[j] != states[t + 1]:
                    compatible = False
                    break
                total += etas[t][j]
            if compatible:
                out.append((states, paths, total))
    return out


def enumerated_marginals(trellis, params, extractor=SIMPLE):
    """Posterior state/path marginals by exhaustive enumeration."""
    trajs = enumerate_trajectories(trellis, params, extractor)
    weights = np.array([w for _, _, w in trajs])
    weights = np.exp(weights - weights.max())
    weights /= weights.sum()
    q = [np.zeros(len(trellis.state_layers[t])) for t in range(trellis.T)]
    r = [np.zeros(len(layer)) for layer in trellis.transition_layers]
    for (states, paths, _), w in zip(trajs, weights):
        for t, i in enumerate(states):
            q[t][i] += w
        for t, j in enumerate(paths):
            r[t][j] += w
    return q, r


def line_network(n_links=3, length=100.0, speed=10.0, two_way=False):
    """A straight chain of links along the x axis."""
    nodes = {i: (i * length, 0.0) for i in range(n_links + 1)}
    links = []
    for i in range(n_links):
        links.append(
            Link(
                id=f"f{i}",
                from_node=i,
                to_node=i + 1,
                length=length,
                speed_limit=speed,
                geometry=[[i * length, 0.0], [(i + 1) * length, 0.0]],
            )
        )
        if two_way:
            links.append(
                Link(
                    id=f"r{i}",
                    from_node=i + 1,
                    to_node=i,
                    length=length,
                    speed_limit=speed,
                    geometry=[[(i + 1) * length, 0.0], [i * length, 0.0]],
                )
            )
    return RoadNetwork("PlanarMeters", nodes, links)


@pytest.fixture(scope="session")
def grid4():
    from mapmatch.synthetic import GridSpec, generate_grid

    return generate_grid(GridSpec(rows=4, cols=4, block_length=100.0, speed_limit=10.0))
