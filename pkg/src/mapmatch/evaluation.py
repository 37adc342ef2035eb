"""Benchmark protocol: decimation, k-fold splits, and accuracy metrics.

Ground truth is a high-frequency trajectory (states, their geographic
points, and the micro-paths between consecutive fixes).  Decimating it to
a probe period keeps every n-th fix and concatenates the intermediate
paths, which gives labeled data at any sampling rate for training and
scoring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mapmatch.errors import DataError
from mapmatch.features import FeatureExtractor, ModelParams
from mapmatch.inference import Trellis, build_trellis, entropy, lagged_smooth, smooth, viterbi
from mapmatch.network import RoadNetwork
from mapmatch.paths import DiscoveryConfig, Path, path_length
from mapmatch.projection import ProjectionConfig

STRATEGIES = ("online", "lag1", "lag2", "offline", "viterbi")


@dataclass
class GroundTruth:
    """True trajectory at the base sampling period."""

    timestamps: list
    states: list  # Location per fix
    points: list  # GeoPoint per fix
    paths: list  # Path between consecutive fixes (len(states) - 1)
    base_period: float

    def __post_init__(self):
        if len(self.paths) != max(len(self.states) - 1, 0) or len(self.points) != len(self.states):
            raise DataError("ground truth arrays are inconsistent")


def concatenate_paths(network: RoadNetwork, segments: list) -> Path:
    """Join consecutive micro-paths into one path."""
    if not segments:
        raise ValueError("nothing to concatenate")
    links = list(segments[0].links)
    for seg in segments[1:]:
        if seg.links[0] == links[-1]:
            links.extend(seg.links[1:])
        else:
            links.extend(seg.links)
    start = segments[0].start
    end = segments[-1].end
    return Path(start, end, tuple(links), path_length(network, links, start.offset, end.offset))


def align_truth(truth: GroundTruth, kept_indices: list, network: RoadNetwork, period: float) -> GroundTruth:
    """Truth restricted to a subset of fixes, with paths concatenated."""
    states = [truth.states[i] for i in kept_indices]
    points = [truth.points[i] for i in kept_indices]
    timestamps = [truth.timestamps[i] for i in kept_indices]
    paths = []
    for a, b in zip(kept_indices[:-1], kept_indices[1:]):
        paths.append(concatenate_paths(network, truth.paths[a:b]) if network else None)
    return GroundTruth(timestamps, states, points, paths, period)


def decimate(truth: GroundTruth, period: float, observations: list = None, network: RoadNetwork = None):
    """Subsample truth (and optionally aligned observations) to a period.

    ``period`` must be an integer multiple of the base period.  Returns
    ``(observations, aligned_truth)``; without explicit observations, the
    exact true points are used (a zero-noise probe).
    """
    ratio = period / truth.base_period
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise DataError(f"period {period} is not a multiple of the base period {truth.base_period}")
    q = int(round(ratio))
    keep = list(range(0, len(truth.states), q))
    aligned = align_truth(truth, keep, network, period)
    if observations is None:
        obs = [(p, t) for p, t in zip(aligned.points, aligned.timestamps)]
    else:
        if len(observations) != len(truth.states):
            raise DataError("observations do not align with ground truth")
        obs = [observations[i] for i in keep]
    return obs, aligned


def _link_intervals(network: RoadNetwork, path: Path) -> dict:
    """Traversed offset intervals per link id."""
    out: dict = {}

    def add(lid, a, b):
        if b > a:
            out.setdefault(lid, []).append((a, b))

    if len(path.links) == 1:
        o1, o2 = path.start.offset, path.end.offset
        add(path.links[0], min(o1, o2), max(o1, o2))
        return out
    first = network.links[path.links[0]]
    add(path.links[0], path.start.offset, first.length)
    for lid in path.links[1:-1]:
        add(lid, 0.0, network.links[lid].length)
    add(path.links[-1], 0.0, path.end.offset)
    return out


def _merge(intervals: list) -> list:
    merged = []
    for a, b in sorted(intervals):
        if merged and a <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], b))
        else:
            merged.append((a, b))
    return merged


def coverage(network: RoadNetwork, p_true: Path, p_est: Path) -> float:
    """Length of ``p_true`` shared with ``p_est`` (asymmetric, in meters)."""
    true_iv = _link_intervals(network, p_true)
    est_iv = {lid: _merge(iv) for lid, iv in _link_intervals(network, p_est).items()}
    total = 0.0
    for lid, ivs in true_iv.items():
        for a, b in _merge(ivs):
            for c, d in est_iv.get(lid, ()):
                total += max(0.0, min(b, d) - max(a, c))
    return total


def miscoverage(network: RoadNetwork, p_true: Path, p_est: Path) -> float:
    """1 - cov(p_true, p_est) / |p_true|; zero-length true paths score 0."""
    denom = abs(p_true.length)
    if denom <= 0:
        return 0.0
    return 1.0 - coverage(network, p_true, p_est) / denom


def kfold_split(dataset: list, folds: int, seed: int) -> list:
    """Deterministic disjoint covering train/test partitions."""
    if folds < 2 or folds > len(dataset):
        raise ValueError("folds must be between 2 and the dataset size")
    order = np.random.default_rng(seed).permutation(len(dataset))
    chunks = np.array_split(order, folds)
    out = []
    for k in range(folds):
        test = sorted(chunks[k].tolist())
        train = sorted(int(i) for c in chunks[:k] + chunks[k + 1 :] for i in c)
        out.append(([dataset[i] for i in train], [dataset[i] for i in test]))
    return out


def _summary(values: list) -> dict:
    if not values:
        return {"mean": None, "p25": None, "p50": None, "p75": None}
    arr = np.asarray(values, dtype=float)
    return {
        "mean": float(arr.mean()),
        "p25": float(np.percentile(arr, 25)),
        "p50": float(np.percentile(arr, 50)),
        "p75": float(np.percentile(arr, 75)),
    }


@dataclass
class MetricsReport:
    strategy: str
    n_steps: int = 0
    n_transitions: int = 0
    point_misses: int = 0
    path_misses: int = 0
    unlabeled_states: int = 0
    unlabeled_paths: int = 0
    breaks: int = 0
    dropped_observations: int = 0
    point_ll: list = field(default_factory=list)
    path_ll: list = field(default_factory=list)
    point_entropy: list = field(default_factory=list)
    path_entropy: list = field(default_factory=list)
    miscoverages: list = field(default_factory=list)
    per_trajectory_point_miss: list = field(default_factory=list)
    per_trajectory_path_miss: list = field(default_factory=list)

    @property
    def point_miss_rate(self) -> float:
        return self.point_misses / self.n_steps if self.n_steps else 0.0

    @property
    def path_miss_rate(self) -> float:
        return self.path_misses / self.n_transitions if self.n_transitions else 0.0

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "n_steps": self.n_steps,
            "n_transitions": self.n_transitions,
            "point_miss_rate": self.point_miss_rate,
            "path_miss_rate": self.path_miss_rate,
            "point_miss_rate_mean_of_trajectories": (
                float(np.mean(self.per_trajectory_point_miss)) if self.per_trajectory_point_miss else None
            ),
            "path_miss_rate_mean_of_trajectories": (
                float(np.mean(self.per_trajectory_path_miss)) if self.per_trajectory_path_miss else None
            ),
            "unlabeled_states": self.unlabeled_states,
            "unlabeled_paths": self.unlabeled_paths,
            "breaks": self.breaks,
            "dropped_observations": self.dropped_observations,
            "true_point_log_likelihood": _summary(self.point_ll),
            "true_path_log_likelihood": _summary(self.path_ll),
            "point_entropy": _summary(self.point_entropy),
            "path_entropy": _summary(self.path_entropy),
            "miscoverage": _summary(self.miscoverages),
        }


def run_strategy(trellis: Trellis, params: ModelParams, extractor: FeatureExtractor, strategy: str):
    """Per-step state/path estimates (and marginals when probabilistic)."""
    if strategy == "viterbi":
        traj, _ = viterbi(trellis, params, extractor)
        return list(traj.states), list(traj.paths), None, None
    if strategy == "online":
        pm = lagged_smooth(trellis, params, extractor, 0)
    elif strategy.startswith("lag"):
        pm = lagged_smooth(trellis, params, extractor, int(strategy[3:]))
    elif strategy == "offline":
        pm = smooth(trellis, params, extractor)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    states = [int(np.argmax(q)) for q in pm.q_bar]
    paths = [int(np.argmax(r)) for r in pm.r_bar]
    return states, paths, pm.q_bar, pm.r_bar


def match_labels(trellis: Trellis, truth: GroundTruth, time_index: dict):
    """Label candidate indices for each trellis layer from aligned truth.

    A state label is the candidate on the true link closest in offset
    (``None`` when the true link carries no candidate).  A path label is
    the candidate path with the true link sequence between the two state
    labels.
    """
    state_labels = []
    truth_idx = []
    for layer in trellis.state_layers:
        ti = time_index.get(round(layer.timestamp, 6))
        truth_idx.append(ti)
        if ti is None:
            state_labels.append(None)
            continue
        true_loc = truth.states[ti]
        best = None
        best_gap = math.inf
        for i, c in enumerate(layer.candidates):
            if c.location.link == true_loc.link:
                gap = abs(c.location.offset - true_loc.offset)
                if gap < best_gap:
                    best, best_gap = i, gap
        state_labels.append(best)
    path_labels = []
    for t, layer in enumerate(trellis.transition_layers):
        ti = truth_idx[t]
        label = None
        if ti is not None and truth_idx[t + 1] == ti + 1 and ti < len(truth.paths):
            true_path = truth.paths[ti]
            si, ei = state_labels[t], state_labels[t + 1]
            if true_path is not None and si is not None and ei is not None:
                for j, p in enumerate(layer.paths):
                    if (
                        layer.start_compat[j] == si
                        and layer.end_compat[j] == ei
                        and tuple(p.links) == tuple(true_path.links)
                    ):
                        label = j
                        break
        path_labels.append(label)
    return state_labels, path_labels, truth_idx


def evaluate(
    params: ModelParams,
    extractor: FeatureExtractor,
    strategy: str,
    dataset: list,
    network: RoadNetwork,
    proj_config: ProjectionConfig,
    disc_config: DiscoveryConfig,
    state_tol: float = 1.0,
    prebuilt: list = None,
) -> MetricsReport:
    """Score a model/strategy pair against labeled trajectories.

    ``dataset`` holds ``(observations, aligned GroundTruth)`` pairs at the
    evaluation period.  A step whose truth is absent from the candidates
    counts as a miss and is tallied separately; so do trajectory breaks
    and dropped observations.  ``prebuilt`` optionally supplies the
    trellis lists per trajectory (built once with the same radius); their
    observation densities are retargeted to the model's sigma.
    """
    from mapmatch.inference import retarget_sigma

    report = MetricsReport(strategy=strategy)
    for idx, (observations, truth) in enumerate(dataset):
        time_index = {round(t, 6): i for i, t in enumerate(truth.timestamps)}
        if prebuilt is None:
            trellises = build_trellis(observations, network, proj_config, disc_config)
        else:
            trellises = [retarget_sigma(tr, params.sigma) for tr in prebuilt[idx]]
        report.breaks += max(len(trellises) - 1, 0)
        covered_steps = sum(tr.T for tr in trellises)
        report.dropped_observations += len(observations) - covered_steps
        report.point_misses += len(observations) - covered_steps
        report.n_steps += len(observations)
        report.n_transitions += max(len(observations) - 1, 0)
        # Transitions that span a break (or a dropped fix) are misses.
        broken = max(len(observations) - 1, 0) - sum(max(tr.T - 1, 0) for tr in trellises)
        report.path_misses += broken
        traj_points = [len(observations) - covered_steps, len(observations)]
        traj_paths = [broken, max(len(observations) - 1, 0)]
        for trellis in trellises:
            state_labels, path_labels, truth_idx = match_labels(trellis, truth, time_index)
            est_states, est_paths, q_bar, r_bar = run_strategy(trellis, params, extractor, strategy)
            for t in range(trellis.T):
                label = state_labels[t]
                if label is None:
                    report.unlabeled_states += 1
                    report.point_misses += 1
                    traj_points[0] += 1
                else:
                    est = trellis.state_layers[t].candidates[est_states[t]]
                    want = trellis.state_layers[t].candidates[label]
                    hit = est.location.link == want.location.link and abs(
                        est.location.offset - want.location.offset
                    ) <= state_tol
                    if not hit:
                        report.point_misses += 1
                        traj_points[0] += 1
                    if q_bar is not None:
                        report.point_ll.append(float(q_bar[t][label]))
                if q_bar is not None:
                    report.point_entropy.append(entropy(q_bar[t]))
            for t, layer in enumerate(trellis.transition_layers):
                ti = truth_idx[t]
                true_path = truth.paths[ti] if ti is not None and ti < len(truth.paths) else None
                est_path = layer.paths[est_paths[t]]
                if true_path is None or tuple(est_path.links) != tuple(true_path.links):
                    report.path_misses += 1
                    traj_paths[0] += 1
                if path_labels[t] is None:
                    report.unlabeled_paths += 1
                elif r_bar is not None:
                    report.path_ll.append(float(r_bar[t][path_labels[t]]))
                if r_bar is not None:
                    report.path_entropy.append(entropy(r_bar[t]))
                if true_path is not None:
                    report.miscoverages.append(miscoverage(network, true_path, est_path))
        if traj_points[1]:
            report.per_trajectory_point_miss.append(traj_points[0] / traj_points[1])
        if traj_paths[1]:
            report.per_trajectory_path_miss.append(traj_paths[0] / traj_paths[1])
    return report
