"""Command-line entry point: simulate, match, evaluate, benchmark."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Iterator

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from .core import AllWeightsZero, ess, initialise, make_rng, marginal_fixed_lag_update
from .core import multinomial_indices, pf_update
from .evaluation import EmptySample, bench_update, per_block_tv, unique_count, unweighted
from .mapmatch import (DeadEnd, Disconnected, MapMatchingModel, MapMatchParams, NoRoadNearby,
                       Observation, RouteState, synth_route, viterbi_match)
from .roadnet import ExplosionGuard, NetworkError, RoadNetwork, grid_network, load_network
from .stitch import (HybridStats, backward_simulation, online_smoother_bsi_init,
                     online_smoother_bsi_update, online_smoother_init, online_smoother_update,
                     run_filter_marginals)

ALGORITHMS = ("pf", "marginal-fixed-lag", "online", "online-bsi", "ffbsi-offline", "viterbi")

EXIT_OK, EXIT_CONFIG, EXIT_MODEL = 0, 2, 3

TRAJECTORY_SCHEMA = {
    "type": "object",
    "required": ["times", "trajectories"],
    "properties": {
        "times": {"type": "array", "items": {"type": "number"}},
        "trajectories": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["edges", "offset", "distance"],
                    "properties": {
                        "edges": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                        "start_offset": {"type": "number"},
                        "offset": {"type": "number"},
                        "distance": {"type": "number", "minimum": 0},
                    },
                },
            },
        },
    },
}


class ConfigError(ValueError):
    """Bad arguments or input files."""


# -- trace and trajectory files ---------------------------------------------

class TraceReader:
    """Streams observations from a ``t,x,y`` CSV, one row at a time.

    ``rows_read`` counts rows handed out, so callers can verify that nothing
    is read twice.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.rows_read = 0

    def __iter__(self) -> Iterator[Observation]:
        with open(self.path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["t", "x", "y"]:
                raise ConfigError(f"{self.path}: expected header t,x,y")
            last = -math.inf
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    t, x, y = (float(v) for v in row)
                except ValueError:
                    raise ConfigError(f"{self.path}:{lineno}: expected three numbers") from None
                if not t > last:
                    raise ConfigError(f"{self.path}:{lineno}: times must increase")
                last = t
                self.rows_read += 1
                yield Observation(t, (x, y))


def write_trace(path, trace) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y"])
        for obs in trace:
            w.writerow([repr(float(obs.time)), repr(float(obs.point[0])), repr(float(obs.point[1]))])


def state_record(net: RoadNetwork, s: RouteState) -> dict:
    return {"edges": [net.edge_ids[e] for e in s.edges], "start_offset": s.start_offset,
            "offset": s.offset, "distance": s.distance}


def trajectory_document(net: RoadNetwork, trajectories, times, params: MapMatchParams, seed,
                        **extra) -> dict:
    doc = {"params": asdict(params), "seed": seed, **extra, "times": [float(t) for t in times]}
    doc["trajectories"] = [[state_record(net, s) for s in row] for row in trajectories]
    return doc


class _Step:
    """Minimal per-step record used when reading trajectory files."""

    __slots__ = ("distance",)

    def __init__(self, distance):
        self.distance = distance


def load_trajectories(path) -> tuple[list[float], np.ndarray]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        jsonschema.validate(doc, TRAJECTORY_SCHEMA)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"{path}: {exc.message}") from None
    times = doc["times"]
    rows = doc["trajectories"]
    if any(len(r) != len(times) for r in rows):
        raise ConfigError(f"{path}: trajectory length differs from the number of times")
    arr = np.empty((len(rows), len(times)), dtype=object)
    for i, r in enumerate(rows):
        for t, rec in enumerate(r):
            arr[i, t] = _Step(float(rec["distance"]))
    return times, arr


def write_csv(path, header, rows) -> None:
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="", encoding="utf-8")
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()


# -- configuration -----------------------------------------------------------

def _params(args) -> MapMatchParams:
    overrides = {"p0": args.p0, "lam": args.lam, "beta": args.beta, "sigma_gps": args.sigma_gps,
                 "d_max": args.d_max, "resolution": args.resolution}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    try:
        return replace(MapMatchParams(), **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _network(path) -> RoadNetwork:
    if path is None:
        raise ConfigError("--network is required")
    try:
        return load_network(path)
    except OSError as exc:
        raise ConfigError(f"cannot read network: {exc}") from None
    except NetworkError as exc:
        raise ConfigError(f"invalid network: {exc}") from None


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    seed = int(np.random.SeedSequence().entropy)
    print(f"seed: {seed}", file=sys.stderr)
    return seed


def _check_counts(args) -> None:
    if args.n_particles < 1:
        raise ConfigError("--n-particles must be at least 1")
    if args.lag < 0:
        raise ConfigError("--lag must be nonnegative")
    if args.max_rejections < 0:
        raise ConfigError("--max-rejections must be nonnegative")
    if not 0 <= args.ess_threshold <= 1:
        raise ConfigError("--ess-threshold must lie in [0, 1]")


# -- commands ----------------------------------------------------------------

def run_simulate(args) -> int:
    if args.out is None:
        raise ConfigError("--out is required")
    net = _network(args.network)
    params = _params(args)
    seed = _seed(args)
    truth, trace = synth_route(net, params, args.steps, make_rng(seed), gap=args.gap)
    write_trace(args.out, trace)
    truth_path = args.truth or str(Path(args.out).with_suffix(".truth.json"))
    doc = trajectory_document(net, [truth], [s.time for s in truth], params, seed)
    Path(truth_path).write_text(json.dumps(doc, indent=1), encoding="utf-8")
    return EXIT_OK


def _match(model: MapMatchingModel, reader: TraceReader, args, rng, stats: HybridStats):
    """Run the chosen algorithm; returns (trajectories, times, diagnostics)."""
    algo = args.algorithm
    n, lag, r = args.n_particles, args.lag, args.max_rejections
    diag = []

    def record(t, e, traj):
        diag.append({"t": t, "ess": float(e), "unique": unique_count(traj, traj.length - 1)})

    if algo == "viterbi":
        states = viterbi_match(model.net, list(reader), model.params)
        return [states], [s.time for s in states], diag
    if algo == "ffbsi-offline":
        marginals = run_filter_marginals(model, list(reader), n, rng, args.ess_threshold)
        for t, m in enumerate(marginals):
            diag.append({"t": t, "ess": ess(m), "unique": len(set(m.particles.tolist()))})
        out = backward_simulation(marginals, model, r, rng, stats=stats)
        return out.to_array(), [c[0].time for c in out.columns], diag

    it = iter(reader)
    y0 = next(it, None)
    if y0 is None:
        raise ConfigError("trace is empty")
    if algo in ("online", "online-bsi"):
        init = online_smoother_bsi_init if algo == "online-bsi" else online_smoother_init
        update = online_smoother_bsi_update if algo == "online-bsi" else online_smoother_update
        state = init(model, y0, n, lag, r, rng, args.ess_threshold)
        state.on_dead_head = "resample" if args.on_stitch_failure == "resample" else "raise"
        record(0, state.last_ess, state.trajectories)
        for t, y in enumerate(it, start=1):
            state = update(state, y, stats=stats)
            record(t, state.last_ess, state.trajectories)
        sample = state.trajectories
    else:
        sample = initialise(model, y0, n, rng)
        if algo == "marginal-fixed-lag":
            sample = sample.take(multinomial_indices(sample.log_weights, n, rng))
        record(0, ess(sample.marginal(0)), sample)
        for t, y in enumerate(it, start=1):
            if algo == "pf":
                sample = pf_update(sample, y, model, args.ess_threshold, rng, time=t)
            else:
                sample = marginal_fixed_lag_update(sample, y, lag, model, rng, time=t,
                                                   ess_threshold=args.ess_threshold)
            record(t, ess(sample.marginal(t)), sample)
        sample = unweighted(sample, rng)
    return sample.to_array(), [c[0].time for c in sample.columns], diag


def run_match(args) -> int:
    if args.out is None or args.trace is None:
        raise ConfigError("--trace and --out are required")
    if not Path(args.trace).is_file():
        raise ConfigError(f"trace file not found: {args.trace}")
    _check_counts(args)
    net = _network(args.network)
    params = _params(args)
    seed = _seed(args)
    model = MapMatchingModel(net, params)
    reader = TraceReader(args.trace)
    stats = HybridStats()
    trajectories, times, diag = _match(model, reader, args, make_rng(seed), stats)
    run = {"algorithm": args.algorithm, "n_particles": args.n_particles, "lag": args.lag,
           "max_rejections": args.max_rejections, "ess_threshold": args.ess_threshold,
           "dead_heads": stats.dead}
    doc = trajectory_document(net, trajectories, times, params, seed, run=run, diagnostics=diag)
    Path(args.out).write_text(json.dumps(doc), encoding="utf-8")
    return EXIT_OK


def run_eval(args) -> int:
    times_a, a = load_trajectories(args.first)
    times_b, b = load_trajectories(args.second)
    if len(times_a) != len(times_b) or not np.allclose(times_a, times_b):
        raise ConfigError("trajectory files cover different times")
    try:
        tv = per_block_tv(a, b, times_a, args.bin_width, args.block_seconds)
    except EmptySample as exc:
        raise ConfigError(str(exc)) from None
    write_csv(args.out, ["metric", "t", "value"], [["binned_tv", k, repr(float(v))] for k, v in enumerate(tv)])
    return EXIT_OK


def run_bench(args) -> int:
    _check_counts(args)
    if args.algorithm not in ("online", "online-bsi"):
        raise ConfigError("benchmark supports the online and online-bsi algorithms")
    net = _network(args.network) if args.network else grid_network(8, 8, 200.0)
    params = _params(args)
    seed = _seed(args)
    if args.trace:
        trace = list(TraceReader(args.trace))
    else:
        trace = synth_route(net, params, args.steps, make_rng(seed, 1))[1]
    model = MapMatchingModel(net, params, cache_size=100_000)
    backward = args.algorithm == "online-bsi"
    init = online_smoother_bsi_init if backward else online_smoother_init
    update = online_smoother_bsi_update if backward else online_smoother_update

    def make_state(n, r, s):
        state = init(model, trace[0], n, args.lag, r, make_rng(seed, 2 + s), args.ess_threshold)
        state.on_dead_head = "resample"
        return state

    # one untimed pass at the largest N fills the route cache, so timings reflect N rather than enumeration
    state = init(model, trace[0], max(args.n_values), args.lag, max(args.r_values), make_rng(seed, 0),
                 args.ess_threshold)
    state.on_dead_head = "resample"
    for y in trace[1:]:
        state = update(state, y)
    rows = bench_update(make_state, update, trace, args.n_values, args.r_values, range(args.seeds))
    write_csv(args.out, ["n", "r", "mean_s", "sd_s"],
              [[row.n, row.r, repr(row.mean_s), repr(row.sd_s)] for row in rows])
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed; drawn from entropy and printed if absent")
    common.add_argument("--threads", type=int, default=None, help="cap on numeric library threads")
    common.add_argument("--out", help="output path")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--network", help="road network JSON document")
    model.add_argument("--p0", type=float, help="stationary probability")
    model.add_argument("--lambda", dest="lam", type=float, help="exponential rate per metre at a 15 s gap")
    model.add_argument("--beta", type=float, help="winding penalty rate")
    model.add_argument("--sigma-gps", type=float, help="GPS noise standard deviation (m)")
    model.add_argument("--d-max", type=float, help="maximum route distance per step (m)")
    model.add_argument("--resolution", type=float, help="discretisation step along roads (m)")

    smc = argparse.ArgumentParser(add_help=False)
    smc.add_argument("--n-particles", type=int, default=200)
    smc.add_argument("--lag", type=int, default=3)
    smc.add_argument("--max-rejections", type=int, default=20)
    smc.add_argument("--ess-threshold", type=float, default=0.5)
    smc.add_argument("--on-stitch-failure", choices=("abort", "resample"), default="abort",
                     help="heads with no compatible tail abort the run or are replaced")

    parser = argparse.ArgumentParser(prog="stitchsmc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common, model], help="simulate a vehicle and its GPS trace")
    p.add_argument("--steps", type=int, default=20, help="number of transitions")
    p.add_argument("--gap", type=float, default=15.0, help="seconds between observations")
    p.add_argument("--truth", help="truth trajectory path (default: <out>.truth.json)")
    p.set_defaults(func=run_simulate)

    p = sub.add_parser("match", parents=[common, model, smc], help="infer trajectories from a trace")
    p.add_argument("--trace", help="GPS trace CSV with header t,x,y")
    p.add_argument("--algorithm", choices=ALGORITHMS, default="online-bsi")
    p.set_defaults(func=run_match)

    p = sub.add_parser("evaluate", parents=[common], help="per-block binned TV between two outputs")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--bin-width", type=float, default=5.0)
    p.add_argument("--block-seconds", type=float, default=60.0)
    p.set_defaults(func=run_eval)

    p = sub.add_parser("benchmark", parents=[common, model, smc], help="time smoother updates")
    p.add_argument("--trace", help="trace to replay (default: simulated on the network)")
    p.add_argument("--algorithm", choices=("online", "online-bsi"), default="online")
    p.add_argument("--n-values", type=_int_list, default=[250, 500, 1000])
    p.add_argument("--r-values", type=_int_list, default=[0, 20])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--steps", type=int, default=25)
    p.set_defaults(func=run_bench, threads=1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AllWeightsZero, DeadEnd, Disconnected, NoRoadNearby, ExplosionGuard) as exc:
        print(f"model failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
