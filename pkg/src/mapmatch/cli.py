"""Command-line front end: generate, match, train, eval.

Batch only; per-vehicle probe streams are processed independently and
output ordering is fixed by (vehicle_id, timestamp), so identical flags
and seeds give byte-identical outputs.  Exit codes: 0 success, 1 usage,
2 data error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import replace

import numpy as np

from mapmatch.errors import DataError, InvariantError
from mapmatch.evaluation import (
    GroundTruth,
    align_truth,
    decimate,
    evaluate,
    kfold_split,
    match_labels,
)
from mapmatch.features import (
    FeatureExtractor,
    ModelParams,
    baseline_params,
    load_model,
    save_model,
)
from mapmatch.inference import build_trellis, lagged_smooth, smooth, viterbi
from mapmatch.network import GeoPoint, Location, load_network, network_to_json
from mapmatch.paths import BackwardPolicy, DiscoveryConfig, Path
from mapmatch.projection import ProjectionConfig
from mapmatch.synthetic import GridSpec, SimSpec, add_gps_noise, generate_grid, simulate_trajectory
from mapmatch.training import Label, TrainingConfig, em_train, supervised_mle, to_generalized

BASELINES = ("shortest-path", "closest-point", "hard-closest-point")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- file formats -----------------------------------------------------------


def write_probes(path, rows):
    """rows: iterable of (vehicle_id, timestamp, x, y)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("vehicle_id,timestamp,x,y\n")
        for vid, t, x, y in rows:
            fh.write(f"{vid},{float(t)!r},{float(x)!r},{float(y)!r}\n")


def read_probes(path, crs: str) -> dict:
    """Probe records grouped by vehicle and sorted by timestamp."""
    vehicles: dict = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for i, row in enumerate(reader):
                try:
                    vid = row["vehicle_id"]
                    t = float(row["timestamp"])
                    g = GeoPoint(float(row["x"]), float(row["y"]), crs)
                except (KeyError, TypeError, ValueError) as exc:
                    raise DataError(f"{path}: bad probe record on data row {i + 1}: {exc}") from exc
                vehicles.setdefault(vid, []).append((g, t))
    except OSError as exc:
        raise DataError(f"cannot read probes: {exc}") from exc
    for obs in vehicles.values():
        obs.sort(key=lambda p: p[1])
    return dict(sorted(vehicles.items()))


def write_truth(path, truths: dict, crs: str):
    doc = {
        "crs": crs,
        "base_period": next(iter(truths.values())).base_period if truths else 1.0,
        "vehicles": [
            {
                "vehicle_id": vid,
                "timestamps": list(truth.timestamps),
                "states": [{"link": s.link, "offset": s.offset} for s in truth.states],
                "points": [[p.x, p.y] for p in truth.points],
                "paths": [
                    {
                        "links": list(p.links),
                        "start_offset": p.start.offset,
                        "end_offset": p.end.offset,
                        "length": p.length,
                    }
                    for p in truth.paths
                ],
            }
            for vid, truth in sorted(truths.items())
        ],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def read_truth(path) -> tuple[dict, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read truth: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"truth parse error at line {exc.lineno}: {exc.msg}") from exc
    crs = doc.get("crs", "PlanarMeters")
    out = {}
    for v in doc["vehicles"]:
        states = [Location(s["link"], float(s["offset"])) for s in v["states"]]
        points = [GeoPoint(float(x), float(y), crs) for x, y in v["points"]]
        paths = []
        for p, a, b in zip(v["paths"], states[:-1], states[1:]):
            paths.append(Path(a, b, tuple(p["links"]), float(p["length"])))
        out[v["vehicle_id"]] = GroundTruth(
            [float(t) for t in v["timestamps"]], states, points, paths, float(doc["base_period"])
        )
    return out, crs


# -- shared plumbing ---------------------------------------------------------


def _merge_config(args: argparse.Namespace, argv: list) -> argparse.Namespace:
    """Apply --config values for flags not given on the command line."""
    cfg_path = getattr(args, "config", None)
    if not cfg_path:
        return args
    try:
        with open(cfg_path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config parse error: {exc.msg}") from exc
    given = {a.split("=", 1)[0] for a in argv if a.startswith("--")}
    for key, value in cfg.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise DataError(f"config key {key!r} does not match any flag")
        if f"--{key}" not in given:
            setattr(args, attr, value)
    return args


def _discovery(args, policy=None) -> DiscoveryConfig:
    return DiscoveryConfig(
        dt=60.0,  # replaced per transition from the actual timestamps
        v_max=args.v_max,
        max_paths_per_pair=args.max_paths,
        backward_policy=policy or BackwardPolicy(args.backward_policy),
    )


def _strategy_name(value: str) -> str:
    if value in ("viterbi", "online", "offline"):
        return value
    if value.startswith("lag") and value[3:].isdigit():
        return value
    raise argparse.ArgumentTypeError(f"unknown strategy {value!r}")


def _strategy_marginals(trellis, params, extractor, strategy):
    if strategy == "online":
        return lagged_smooth(trellis, params, extractor, 0)
    if strategy.startswith("lag"):
        return lagged_smooth(trellis, params, extractor, int(strategy[3:]))
    if strategy == "offline":
        return smooth(trellis, params, extractor)
    raise DataError(f"unknown strategy {strategy!r}")


# -- generate ----------------------------------------------------------------


def cmd_generate(args) -> int:
    grid = GridSpec(
        rows=args.rows,
        cols=args.cols,
        block_length=args.block_length,
        speed_limit=args.speed_limit,
        stop_sign_fraction=args.stop_sign_fraction,
        signal_fraction=args.signal_fraction,
        lanes=args.lanes,
        seed=args.seed,
    )
    network = generate_grid(grid)
    mu = np.array([float(v) for v in args.mu.split(",")])
    extractor = FeatureExtractor(kind=args.features)
    if mu.shape != (extractor.dim,):
        raise DataError(f"--mu needs {extractor.dim} weights for feature set {args.features!r}")
    params = ModelParams.from_sigma(args.sigma if args.sigma > 0 else 10.0, mu)

    truths = {}
    probe_rows = []
    for i in range(args.vehicles):
        vid = f"v{i}"
        sim = SimSpec(
            driver_params=params,
            extractor=extractor,
            duration=args.duration,
            base_period=args.base_period,
            seed=args.seed * 100003 + 2 * i,
            sampler=args.sampler,
            decision_period=args.decision_period,
        )
        truth = simulate_trajectory(network, sim)
        truths[vid] = truth
        obs = add_gps_noise(truth, args.sigma, args.seed * 100003 + 2 * i + 1)
        stride = int(round(args.period / args.base_period))
        if abs(stride * args.base_period - args.period) > 1e-9 or stride < 1:
            raise DataError("--period must be a multiple of the base period")
        for g, t in obs[::stride]:
            probe_rows.append((vid, t, g.x, g.y))

    with open(f"{args.out_dir}/network.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(network_to_json(network), fh)
        fh.write("\n")
    write_probes(f"{args.out_dir}/probes.csv", probe_rows)
    write_truth(f"{args.out_dir}/truth.json", truths, network.crs)
    print(
        f"wrote network.json ({len(network.links)} links), probes.csv "
        f"({len(probe_rows)} records), truth.json ({len(truths)} vehicles)"
    )
    return 0


# -- match -------------------------------------------------------------------


def _load_match_model(args) -> tuple[ModelParams, FeatureExtractor, str]:
    if args.model and args.baseline:
        raise DataError("give either --model or --baseline, not both")
    if args.baseline:
        params, hint = baseline_params(args.baseline)
        return params, FeatureExtractor(kind="simple"), hint
    if args.model:
        params, extractor = load_model(args.model)
        return params, extractor, "any"
    raise DataError("a model is required: --model FILE or --baseline NAME")


def cmd_match(args) -> int:
    network = load_network(args.network)
    params, extractor, hint = _load_match_model(args)
    strategy = args.strategy
    if hint == "online" and args.strategy != "online":
        print(f"note: {args.baseline} is intended for the online strategy", file=sys.stderr)
    proj = ProjectionConfig(
        sigma=params.sigma, radius=args.radius, strategy=args.proj_strategy, grid_step=args.grid_step
    )
    disc = _discovery(args)
    vehicles = read_probes(args.probes, network.crs)
    out = open(args.out, "w", encoding="utf-8", newline="\n") if args.out else sys.stdout
    t0 = time.perf_counter()
    n_obs = 0
    try:
        for vid, observations in vehicles.items():
            n_obs += len(observations)
            trellises = build_trellis(observations, network, proj, disc)
            print(f"{vid}: {max(len(trellises) - 1, 0)} breaks", file=sys.stderr)
            matched = {}
            for trellis in trellises:
                if strategy == "viterbi":
                    traj, _ = viterbi(trellis, params, extractor)
                    for t in range(trellis.T):
                        layer = trellis.state_layers[t]
                        best = layer.candidates[traj.states[t]]
                        rec = {
                            "vehicle_id": vid,
                            "t": layer.timestamp,
                            "best_state": {"link": best.location.link, "offset": best.location.offset},
                            "state_marginals": [],
                            "best_path": (
                                list(trellis.transition_layers[t].paths[traj.paths[t]].links)
                                if t < trellis.T - 1
                                else None
                            ),
                            "path_marginals": [],
                        }
                        matched[round(layer.timestamp, 6)] = rec
                else:
                    pm = _strategy_marginals(trellis, params, extractor, strategy)
                    for t in range(trellis.T):
                        layer = trellis.state_layers[t]
                        probs = np.exp(pm.q_bar[t])
                        best = layer.candidates[int(np.argmax(pm.q_bar[t]))]
                        rec = {
                            "vehicle_id": vid,
                            "t": layer.timestamp,
                            "best_state": {"link": best.location.link, "offset": best.location.offset},
                            "state_marginals": [
                                {"link": c.location.link, "offset": c.location.offset, "p": float(p)}
                                for c, p in zip(layer.candidates, probs)
                            ],
                            "best_path": None,
                            "path_marginals": [],
                        }
                        if t < trellis.T - 1:
                            tl = trellis.transition_layers[t]
                            rp = np.exp(pm.r_bar[t])
                            rec["best_path"] = list(tl.paths[int(np.argmax(pm.r_bar[t]))].links)
                            rec["path_marginals"] = [
                                {"links": list(p.links), "p": float(pr)} for p, pr in zip(tl.paths, rp)
                            ]
                        matched[round(layer.timestamp, 6)] = rec
            for g, t in observations:
                rec = matched.get(round(t, 6))
                if rec is None:
                    rec = {"vehicle_id": vid, "t": t, "skipped": True}
                out.write(json.dumps(rec) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    elapsed = time.perf_counter() - t0
    print(f"matched {n_obs} observations in {elapsed:.2f}s ({n_obs / max(elapsed, 1e-9):.0f} obs/s)", file=sys.stderr)
    return 0


# -- train -------------------------------------------------------------------


def _labeled_sequences(network, vehicles, truths, extractor, proj, disc):
    sequences = []
    skipped = 0
    for vid, observations in vehicles.items():
        if vid not in truths:
            raise DataError(f"vehicle {vid!r} missing from truth file")
        truth = truths[vid]
        tindex = {round(t, 6): i for i, t in enumerate(truth.timestamps)}
        kept = []
        for _, t in observations:
            i = tindex.get(round(t, 6))
            if i is None:
                raise DataError(f"vehicle {vid!r}: probe timestamp {t} is not in the truth track")
            kept.append(i)
        period = (truth.timestamps[kept[1]] - truth.timestamps[kept[0]]) if len(kept) > 1 else truth.base_period
        aligned = align_truth(truth, kept, network, period)
        for trellis in build_trellis(observations, network, proj, disc):
            time_index = {round(t, 6): i for i, t in enumerate(aligned.timestamps)}
            state_labels, path_labels, _ = match_labels(trellis, aligned, time_index)
            if any(v is None for v in state_labels) or any(v is None for v in path_labels):
                skipped += 1
                continue
            label = Label(tuple(state_labels), tuple(path_labels))
            sequences.append(to_generalized(trellis, extractor, labels=label))
    return sequences, skipped


def _default_em_init(vehicles, extractor) -> ModelParams:
    # Hand-tuned heuristic: sigma 20 m and a characteristic length from the
    # mean displacement between consecutive fixes; other weights zero.
    gaps = []
    for observations in vehicles.values():
        for (g1, _), (g2, _) in zip(observations[:-1], observations[1:]):
            gaps.append(math.hypot(g2.x - g1.x, g2.y - g1.y))
    mean_gap = max(float(np.mean(gaps)) if gaps else 500.0, 1.0)
    mu = np.zeros(extractor.dim)
    mu[0] = -1.0 / mean_gap
    return ModelParams.from_sigma(20.0, mu)


def _projection(args) -> ProjectionConfig:
    return ProjectionConfig(
        sigma=args.proj_sigma,
        radius=args.radius,
        strategy=args.proj_strategy,
        grid_step=args.grid_step,
    )


def cmd_train(args) -> int:
    network = load_network(args.network)
    extractor = FeatureExtractor(kind=args.features)
    proj = _projection(args)
    disc = _discovery(args)
    vehicles = read_probes(args.probes, network.crs)
    config = TrainingConfig(quadratic_penalty=args.penalty, em_iters=args.em_iters)
    if args.mode == "supervised":
        if not args.truth:
            raise DataError("supervised training requires --truth")
        truths, _ = read_truth(args.truth)
        sequences, skipped = _labeled_sequences(network, vehicles, truths, extractor, proj, disc)
        if skipped:
            print(f"skipped {skipped} trellises with incomplete labels", file=sys.stderr)
        if not sequences:
            raise DataError("no fully labeled trajectories to train on")
        result = supervised_mle(sequences, config)
    else:
        trellises = []
        for observations in vehicles.values():
            trellises.extend(build_trellis(observations, network, proj, disc))
        if not trellises:
            raise DataError("no usable trellises for EM")
        init = _default_em_init(vehicles, extractor)
        result = em_train(trellises, extractor, init, config)
    save_model(result.params, extractor, args.out)
    if args.report:
        with open(args.report, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(result.iterations, fh, indent=2)
            fh.write("\n")
    print(f"sigma={result.params.sigma:.4f} mu={[round(float(v), 6) for v in result.params.mu]}")
    return 0


# -- eval --------------------------------------------------------------------


def _eval_models(args, network, train_set, extractor, proj, disc, config):
    """Trained and baseline models for one fold: name -> (params, extractor)."""
    models = {}
    for name in args.baselines.split(",") if args.baselines else []:
        params, _ = baseline_params(name)
        models[name] = (params, FeatureExtractor(kind="simple"))
    for mode in args.train.split(",") if args.train else []:
        if mode == "mle":
            sequences = []
            for observations, truth in train_set:
                for trellis in build_trellis(observations, network, proj, disc):
                    tindex = {round(t, 6): i for i, t in enumerate(truth.timestamps)}
                    st, pt, _ = match_labels(trellis, truth, tindex)
                    if any(v is None for v in st) or any(v is None for v in pt):
                        continue
                    sequences.append(to_generalized(trellis, extractor, labels=Label(tuple(st), tuple(pt))))
            if not sequences:
                raise DataError("eval: no labeled sequences to train the mle model")
            models["mle"] = (supervised_mle(sequences, config).params, extractor)
        elif mode == "em":
            trellises = []
            for observations, _ in train_set:
                trellises.extend(build_trellis(observations, network, proj, disc))
            init = _default_em_init({i: obs for i, (obs, _) in enumerate(train_set)}, extractor)
            models["em"] = (em_train(trellises, extractor, init, config).params, extractor)
        else:
            raise DataError(f"unknown training mode {mode!r} in --train")
    if args.model:
        params, ex = load_model(args.model)
        models["file"] = (params, ex)
    return models


def cmd_eval(args) -> int:
    network = load_network(args.network)
    truths, _ = read_truth(args.truth)
    vehicles = read_probes(args.probes, network.crs) if args.probes else None
    extractor = FeatureExtractor(kind=args.features)
    proj = _projection(args)
    disc = _discovery(args)
    config = TrainingConfig(quadratic_penalty=args.penalty, em_iters=args.em_iters)
    periods = [float(p) for p in args.periods.split(",")]
    strategies = args.strategies.split(",")

    rows = []
    reports = []
    for period in periods:
        dataset = []
        for vid, truth in sorted(truths.items()):
            obs = vehicles.get(vid) if vehicles else None
            dataset.append(decimate(truth, period, obs, network))
        folds = kfold_split(dataset, args.kfold, args.seed) if args.kfold > 1 else [(dataset, dataset)]
        for fold_id, (train_set, test_set) in enumerate(folds):
            models = _eval_models(args, network, train_set, extractor, proj, disc, config)
            for name, (params, ex) in sorted(models.items()):
                eval_proj = replace(proj, sigma=params.sigma, radius=proj.radius)
                for strategy in strategies:
                    report = evaluate(params, ex, strategy, test_set, network, eval_proj, disc)
                    doc = report.to_dict()
                    doc.update({"period": period, "fold": fold_id, "model": name})
                    reports.append(doc)
                    # One CSV row per trajectory for external plotting.
                    for i, (pt, pa) in enumerate(
                        zip(report.per_trajectory_point_miss, report.per_trajectory_path_miss)
                    ):
                        rows.append(
                            {
                                "period": period,
                                "fold": fold_id,
                                "model": name,
                                "strategy": strategy,
                                "trajectory": i,
                                "point_miss_rate": pt,
                                "path_miss_rate": pa,
                            }
                        )
    if args.out_json:
        with open(args.out_json, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(reports, fh, indent=2)
            fh.write("\n")
    if args.out_csv:
        with open(args.out_csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    for doc in reports:
        print(
            f"period={doc['period']:g} fold={doc['fold']} model={doc['model']} "
            f"strategy={doc['strategy']} path_miss={doc['path_miss_rate']:.4f} "
            f"point_miss={doc['point_miss_rate']:.4f}"
        )
    return 0


# -- entry point ---------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="JSON file whose keys mirror flag names")
    p.add_argument("--radius", type=float, default=40.0, help="projection radius in meters")
    p.add_argument("--proj-strategy", default="most_likely", choices=["most_likely", "grid"])
    p.add_argument("--grid-step", type=float, default=None, help="offset step for --proj-strategy grid")
    p.add_argument("--v-max", dest="v_max", type=float, default=None, help="speeding bound, m/s")
    p.add_argument("--max-paths", type=int, default=20, help="paths kept per candidate pair")
    p.add_argument(
        "--backward-policy",
        default="allow_backward",
        choices=[p.value for p in BackwardPolicy],
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="mapmatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic network, probes, and truth")
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--cols", type=int, required=True)
    g.add_argument("--block-length", type=float, default=100.0)
    g.add_argument("--speed-limit", type=float, default=10.0)
    g.add_argument("--stop-sign-fraction", type=float, default=0.0)
    g.add_argument("--signal-fraction", type=float, default=0.0)
    g.add_argument("--lanes", type=int, default=1)
    g.add_argument("--sigma", type=float, required=True, help="GPS noise std dev, meters")
    g.add_argument("--period", type=float, default=1.0, help="probe output period, seconds")
    g.add_argument("--base-period", type=float, default=1.0)
    g.add_argument("--duration", type=float, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--vehicles", type=int, default=1)
    g.add_argument("--mu", default="-0.005", help="comma-separated driver weights")
    g.add_argument("--features", default="simple", choices=["simple", "complex"])
    g.add_argument("--sampler", default="path", choices=["path", "local"])
    g.add_argument("--decision-period", type=float, default=60.0)
    g.add_argument("--out-dir", default=".")
    g.add_argument("--config", help="JSON file whose keys mirror flag names")
    g.set_defaults(func=cmd_generate)

    m = sub.add_parser("match", help="reconstruct trajectories from probes")
    m.add_argument("--network", required=True)
    m.add_argument("--probes", required=True)
    m.add_argument("--model", help="model JSON file")
    m.add_argument("--baseline", choices=BASELINES)
    m.add_argument(
        "--strategy",
        default="offline",
        type=_strategy_name,
        help="viterbi, online, offline, or lagK (e.g. lag1, lag2)",
    )
    m.add_argument("--out", help="output JSON-lines path (default stdout)")
    _add_common(m)
    m.set_defaults(func=cmd_match)

    t = sub.add_parser("train", help="fit model parameters")
    t.add_argument("--network", required=True)
    t.add_argument("--probes", required=True)
    t.add_argument("--truth", help="truth JSON (required for supervised mode)")
    t.add_argument("--mode", default="supervised", choices=["supervised", "em"])
    t.add_argument("--features", default="simple", choices=["simple", "complex"])
    t.add_argument("--em-iters", type=int, default=3)
    t.add_argument("--penalty", type=float, default=1e-2)
    t.add_argument("--proj-sigma", type=float, default=10.0, help="sigma used when projecting")
    t.add_argument("--out", required=True, help="model JSON output path")
    t.add_argument("--report", help="per-iteration training report path")
    _add_common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="benchmark models and strategies")
    e.add_argument("--network", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--probes", help="base-rate probe CSV; defaults to noise-free truth points")
    e.add_argument("--periods", default="60", help="comma-separated decimation periods")
    e.add_argument("--strategies", default="offline", help="comma-separated strategies")
    e.add_argument("--kfold", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--baselines", default="", help="comma-separated baseline names")
    e.add_argument("--train", default="", help="comma-separated: mle, em")
    e.add_argument("--model", help="also evaluate a stored model file")
    e.add_argument("--features", default="simple", choices=["simple", "complex"])
    e.add_argument("--em-iters", type=int, default=3)
    e.add_argument("--penalty", type=float, default=1e-2)
    e.add_argument("--proj-sigma", type=float, default=10.0)
    e.add_argument("--out-json", help="full report output path")
    e.add_argument("--out-csv", help="per-row CSV output path")
    _add_common(e)
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        args = _merge_config(args, list(argv))
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
