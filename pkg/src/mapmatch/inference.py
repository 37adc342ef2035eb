"""Globally normalized trellis inference over candidate states and paths.

A trellis alternates layers of candidate states (one per GPS fix) with
layers of candidate paths.  The unnormalized score of a trajectory is the
product of per-state observation densities and per-path driver weights,
restricted to compatible state/path choices; normalization happens once
over whole trajectories rather than per transition, which avoids the
selection bias of locally normalized chain models.

Everything runs in the log domain with per-layer normalization; a layer
that normalizes to zero mass indicates a builder bug and raises
:class:`~mapmatch.errors.InvariantError`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from mapmatch.errors import InvariantError
from mapmatch.features import FeatureExtractor, ModelParams, layer_features
from mapmatch.network import RoadNetwork
from mapmatch.paths import BackwardPolicy, DiscoveryConfig, TransitionLayer, enumerate_paths
from mapmatch.projection import CandidateSet, EmptyProjection, ProjectionConfig, monotone_adjust, project


@dataclass
class Trellis:
    """Alternating candidate-state and candidate-path layers for one track."""

    state_layers: list[CandidateSet]
    transition_layers: list[TransitionLayer]
    network: RoadNetwork = None
    _obs: list = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.transition_layers) != max(len(self.state_layers) - 1, 0):
            raise InvariantError("transition layer count must be state layer count minus one")

    @property
    def T(self) -> int:
        return len(self.state_layers)

    def obs_log_densities(self, t: int) -> np.ndarray:
        if self._obs is None:
            self._obs = [
                np.array([c.obs_log_density for c in layer.candidates]) for layer in self.state_layers
            ]
        return self._obs[t]

    def squared_distances(self, t: int) -> np.ndarray:
        return np.array([c.gps_distance ** 2 for c in self.state_layers[t].candidates])

    def path_log_weights(self, t: int, params: ModelParams, extractor: FeatureExtractor) -> np.ndarray:
        feats = layer_features(self.transition_layers[t], extractor, self.network)
        return feats @ params.mu


@dataclass(frozen=True)
class Trajectory:
    """One choice of state index per layer and path index per transition."""

    states: tuple
    paths: tuple


@dataclass
class PosteriorMarginals:
    """Per-layer log-probability vectors for states (q) and paths (r).

    ``q_bar``/``r_bar`` are the combined marginals; the forward and
    backward halves are kept when the strategy computes them.
    """

    q_bar: list
    r_bar: list
    fwd_q: list = None
    fwd_r: list = None
    bwd_q: list = None
    bwd_r: list = None


def _normalize(lw: np.ndarray, what: str) -> np.ndarray:
    z = logsumexp(lw)
    if not np.isfinite(z):
        raise InvariantError(f"{what} has zero probability mass")
    return lw - z


def _group_logsumexp(values: np.ndarray, groups: np.ndarray, size: int) -> np.ndarray:
    acc = np.full(size, -np.inf)
    np.logaddexp.at(acc, groups, values)
    return acc


def log_potential(
    trellis: Trellis, traj: Trajectory, params: ModelParams, extractor: FeatureExtractor
) -> float:
    """Log unnormalized score of one trajectory; -inf when incompatible."""
    if len(traj.states) != trellis.T or len(traj.paths) != trellis.T - 1:
        raise ValueError("trajectory shape does not match trellis")
    total = 0.0
    for t in range(trellis.T):
        obs = trellis.obs_log_densities(t)
        if not 0 <= traj.states[t] < len(obs):
            raise ValueError(f"state index out of range at step {t}")
        total += obs[traj.states[t]]
    for t, layer in enumerate(trellis.transition_layers):
        j = traj.paths[t]
        if not 0 <= j < len(layer):
            raise ValueError(f"path index out of range at step {t}")
        if layer.start_compat[j] != traj.states[t] or layer.end_compat[j] != traj.states[t + 1]:
            return -np.inf
        total += trellis.path_log_weights(t, params, extractor)[j]
    return float(total)


def viterbi(
    trellis: Trellis, params: ModelParams, extractor: FeatureExtractor
) -> tuple[Trajectory, float]:
    """Most likely trajectory and its log-potential.

    Ties are broken toward the smallest candidate (and path) index so the
    decode is deterministic.
    """
    delta = trellis.obs_log_densities(0).astype(float).copy()
    backptr = []
    for t, layer in enumerate(trellis.transition_layers):
        if len(layer) == 0:
            raise InvariantError(f"empty transition layer at step {t}; trellis should have been split")
        eta = trellis.path_log_weights(t, params, extractor)
        pscore = delta[layer.start_compat] + eta
        n_end = layer.n_end
        # Group argmax per end state; lexsort keeps the smallest path index
        # among exact ties.
        order = np.lexsort((np.arange(len(layer)), -pscore, layer.end_compat))
        ends_sorted = layer.end_compat[order]
        firsts = np.unique(ends_sorted, return_index=True)[1]
        best = np.full(n_end, -np.inf)
        argbest = np.full(n_end, -1, dtype=np.int64)
        winners = order[firsts]
        best[layer.end_compat[winners]] = pscore[winners]
        argbest[layer.end_compat[winners]] = winners
        backptr.append(argbest)
        delta = best + trellis.obs_log_densities(t + 1)
    value = float(np.max(delta))
    if not np.isfinite(value):
        raise InvariantError("no compatible trajectory through the trellis")
    state = int(np.argmax(delta))
    states = [state]
    paths = []
    for t in range(trellis.T - 2, -1, -1):
        j = int(backptr[t][states[0]])
        paths.insert(0, j)
        states.insert(0, int(trellis.transition_layers[t].start_compat[j]))
    return Trajectory(tuple(states), tuple(paths)), value


def forward(
    trellis: Trellis, params: ModelParams, extractor: FeatureExtractor
) -> tuple[list, list]:
    """Forward state and path distributions (log-probabilities per layer)."""
    lq = _normalize(trellis.obs_log_densities(0).astype(float), "forward state layer 0")
    qs = [lq]
    rs = []
    for t, layer in enumerate(trellis.transition_layers):
        eta = trellis.path_log_weights(t, params, extractor)
        lr = _normalize(eta + lq[layer.start_compat], f"forward path layer {t}")
        rs.append(lr)
        mass = _group_logsumexp(lr, layer.end_compat, layer.n_end)
        lq = _normalize(trellis.obs_log_densities(t + 1) + mass, f"forward state layer {t + 1}")
        qs.append(lq)
    return qs, rs


def backward(
    trellis: Trellis, params: ModelParams, extractor: FeatureExtractor
) -> tuple[list, list]:
    """Backward suffix messages, initialized uniform at t = T.

    ``bq[t]`` is proportional to the posterior of the state at ``t`` given
    only the later observations; ``br[t]`` carries the suffix evidence for
    each path with the next state's observation absorbed.  The driver
    weight of the path itself is left out of ``br`` (the forward message
    already carries it), so the elementwise products with the forward
    messages give the exact smoothed marginals.
    """
    bq, br = _backward_window(trellis, params, extractor, 0, trellis.T - 1)
    return bq, br


def _backward_window(
    trellis: Trellis, params: ModelParams, extractor: FeatureExtractor, s: int, e: int
) -> tuple[list, list]:
    """Backward recursion over state layers s..e inclusive."""
    n_last = len(trellis.state_layers[e])
    lq = np.full(n_last, -np.log(n_last))
    qs = [lq]
    rs = []
    for t in range(e - 1, s - 1, -1):
        layer = trellis.transition_layers[t]
        eta = trellis.path_log_weights(t, params, extractor)
        absorbed = trellis.obs_log_densities(t + 1) + lq
        lr = _normalize(absorbed[layer.end_compat], f"backward path layer {t}")
        rs.insert(0, lr)
        mass = _group_logsumexp(eta + lr, layer.start_compat, layer.n_start)
        lq = _normalize(mass, f"backward state layer {t}")
        qs.insert(0, lq)
    return qs, rs


def smooth(
    trellis: Trellis, params: ModelParams, extractor: FeatureExtractor
) -> PosteriorMarginals:
    """Posterior marginals given all observations (offline smoothing)."""
    fq, fr = forward(trellis, params, extractor)
    bq, br = backward(trellis, params, extractor)
    q_bar = [_normalize(f + b, f"smoothed state layer {t}") for t, (f, b) in enumerate(zip(fq, bq))]
    r_bar = [_normalize(f + b, f"smoothed path layer {t}") for t, (f, b) in enumerate(zip(fr, br))]
    return PosteriorMarginals(q_bar, r_bar, fwd_q=fq, fwd_r=fr, bwd_q=bq, bwd_r=br)


def lagged_smooth(
    trellis: Trellis, params: ModelParams, extractor: FeatureExtractor, k: int
) -> PosteriorMarginals:
    """Marginals with a fixed lag of ``k`` observations.

    The output at step ``t`` is the posterior given observations up to
    ``t + k`` (clipped to the end of the track), produced by re-running the
    backward recursion over the ``k+1``-deep window on each arrival.  With
    ``k = 0`` this is the online filter; with ``k >= T - 1`` it reproduces
    offline smoothing exactly.
    """
    if k < 0:
        raise ValueError("lag must be non-negative")
    fq, fr = forward(trellis, params, extractor)
    T = trellis.T
    q_out: list = [None] * T
    r_out: list = [None] * max(T - 1, 0)
    for s in range(T):
        e = min(s + k, T - 1)
        bq, br = _backward_window(trellis, params, extractor, s, e)
        q_out[s] = _normalize(fq[s] + bq[0], f"lagged state layer {s}")
        if s < T - 1:
            if br:
                r_out[s] = _normalize(fr[s] + br[0], f"lagged path layer {s}")
            else:
                r_out[s] = fr[s]
    return PosteriorMarginals(q_out, r_out, fwd_q=fq, fwd_r=fr)


def build_trellis(
    observations: list,
    network: RoadNetwork,
    proj_config: ProjectionConfig,
    disc_config: DiscoveryConfig,
) -> list[Trellis]:
    """Project observations, enumerate transitions, and split on dead ends.

    ``observations`` is a time-ordered list of ``(GeoPoint, timestamp)``
    pairs for one vehicle.  An observation with no candidates (after one
    retry at twice the radius) or a transition that disconnects the
    trajectory graph breaks the track into separate trellises.
    """
    projected: list = []
    for g, t in observations:
        try:
            cand = project(network, g, t, proj_config)
        except EmptyProjection:
            try:
                cand = project(network, g, t, replace(proj_config, radius=2 * proj_config.radius))
            except EmptyProjection:
                cand = None
        projected.append(cand)

    trellises: list[Trellis] = []
    states: list[CandidateSet] = []
    layers: list[TransitionLayer] = []
    reach: np.ndarray = None

    def close():
        nonlocal states, layers, reach
        if states:
            trellises.append(Trellis(list(states), list(layers), network))
        states, layers, reach = [], [], None

    for cand in projected:
        if cand is None:
            close()
            continue
        if not states:
            states.append(cand)
            reach = np.ones(len(cand), dtype=bool)
            continue
        prev = states[-1]
        dt = cand.timestamp - prev.timestamp
        if dt <= 0:
            continue  # duplicate or non-monotone timestamp: drop the fix
        if disc_config.backward_policy is BackwardPolicy.MONOTONE_HEURISTIC:
            cand = monotone_adjust(network, proj_config, prev, cand)
        layer = enumerate_paths(network, prev, cand, replace(disc_config, dt=dt))
        new_reach = np.zeros(layer.n_end, dtype=bool)
        if len(layer):
            ok = reach[layer.start_compat]
            new_reach[layer.end_compat[ok]] = True
        if not new_reach.any():
            close()
            states = [cand]
            layers = []
            reach = np.ones(len(cand), dtype=bool)
            continue
        states.append(cand)
        layers.append(layer)
        reach = new_reach
    close()
    return trellises


def entropy(log_probs: np.ndarray) -> float:
    """Shannon entropy in nats of a normalized log-probability vector."""
    p = np.exp(log_probs)
    mask = p > 0
    return float(-np.sum(p[mask] * log_probs[mask]))


def retarget_sigma(trellis: Trellis, sigma: float) -> Trellis:
    """The same trellis with observation densities recomputed for ``sigma``.

    Candidate sets and transition layers depend only on the projection
    radius, so evaluating several models over one trellis only needs the
    per-candidate densities refreshed; layers (and their cached feature
    matrices) are shared.
    """
    from dataclasses import replace as _dc_replace

    from mapmatch.projection import CandidateState, log_density_at

    new_layers = []
    for layer in trellis.state_layers:
        cands = tuple(
            CandidateState(c.location, c.gps_distance, log_density_at(c.gps_distance, sigma))
            for c in layer.candidates
        )
        new_layers.append(_dc_replace(layer, candidates=cands))
    return Trellis(new_layers, trellis.transition_layers, trellis.network)
