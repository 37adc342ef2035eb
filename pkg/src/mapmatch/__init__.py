"""Probabilistic map matching of sparse GPS probe data.

The pipeline projects each GPS fix onto nearby road links, enumerates the
paths a vehicle could have driven between consecutive fixes, and runs
globally normalized trellis inference (Viterbi decoding, forward filtering,
smoothing, lagged smoothing) over the resulting state/path layers.  Model
parameters (GPS noise precision and driver preference weights) can be fit
from labeled trajectories or with EM from raw probes.
"""

from mapmatch.network import (
    GeoPoint,
    Link,
    Location,
    RoadNetwork,
    distance,
    links_within_radius,
    load_network,
    point_at,
)
from mapmatch.projection import (
    CandidateSet,
    CandidateState,
    EmptyProjection,
    ProjectionConfig,
    monotone_adjust,
    observation_log_density,
    project,
)
from mapmatch.paths import (
    BackwardPolicy,
    DiscoveryConfig,
    Path,
    TransitionLayer,
    astar_fastest_path,
    check_flow,
    enumerate_paths,
)
from mapmatch.features import (
    FeatureExtractor,
    ModelParams,
    baseline_params,
    count_turns,
    extract,
    path_log_weight,
)
from mapmatch.inference import (
    PosteriorMarginals,
    Trajectory,
    Trellis,
    build_trellis,
    forward,
    backward,
    lagged_smooth,
    log_potential,
    smooth,
    viterbi,
)

__all__ = [
    "GeoPoint",
    "Link",
    "Location",
    "RoadNetwork",
    "distance",
    "links_within_radius",
    "load_network",
    "point_at",
    "CandidateSet",
    "CandidateState",
    "EmptyProjection",
    "ProjectionConfig",
    "monotone_adjust",
    "observation_log_density",
    "project",
    "BackwardPolicy",
    "DiscoveryConfig",
    "Path",
    "TransitionLayer",
    "astar_fastest_path",
    "check_flow",
    "enumerate_paths",
    "FeatureExtractor",
    "ModelParams",
    "baseline_params",
    "count_turns",
    "extract",
    "path_log_weight",
    "PosteriorMarginals",
    "Trajectory",
    "Trellis",
    "build_trellis",
    "forward",
    "backward",
    "lagged_smooth",
    "log_potential",
    "smooth",
    "viterbi",
]
