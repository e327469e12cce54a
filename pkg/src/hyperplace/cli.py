"""
Command Line
`hyperplace` subcommands: synth, build, query, viz, bench, ablate, verify
"""

import argparse
import json
import sys
from pathlib import Path
from typing import NoReturn, Sequence

from loguru import logger
from pydantic import ValidationError

from hyperplace.benchmark import (
    compare_geometries,
    embed_queries,
    grid_search_weights,
    load_query_set,
    pooling_for_index,
    run_benchmark,
)
from hyperplace.errors import ConfigurationError, HyperplaceError, InvalidInputError
from hyperplace.hierarchy import DEFAULT_GEM_P, PoolingSpec, embed_query, window_layout
from hyperplace.hypgeo import BallConfig
from hyperplace.index import Preset, RetrievalConfig, build_index, exhaustive_search, retrieve
from hyperplace.storage import (
    index_storage_bytes,
    load_index,
    persist_index,
    read_panorama_dir,
    read_query_grid,
    write_pooling_spec,
)
from hyperplace.synth import SceneSpec, generate_dataset, write_dataset
from hyperplace.verify import CHECKS, run_checks
from hyperplace.viz import export_coordinates, write_coordinates, write_figure

PROG = "hyperplace"
DEFAULT_TOP_K = 20
LOG_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}"


class Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors are a single stderr line with status 2"""

    def error(self, message: str) -> NoReturn:
        self.exit(2, f"{PROG}: error: {message}\n")


def _levels(text: str) -> tuple[int, ...]:
    """'4,5' -> (4, 5); '' -> ()"""
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated levels, got {text!r}") from None


def _weights(text: str) -> dict[int, float]:
    """'1:0.5,5:0.5' -> {1: 0.5, 5: 0.5}"""
    weights = {}
    try:
        for part in text.split(","):
            level, _, weight = part.partition(":")
            weights[int(level)] = float(weight)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected level:weight pairs, got {text!r}") from None
    return weights


def _grid(text: str) -> tuple[int, int]:
    """'4x4' -> (4, 4)"""
    height, sep, width = text.lower().partition("x")
    if not sep or not height.isdigit() or not width.isdigit():
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return int(height), int(width)


def _write_json(payload: str, path: Path | None) -> None:
    if path is None:
        print(payload)
    else:
        path.write_text(payload + "\n")
        logger.success(f"Report written | path={path}")


def _retrieval_config(args: argparse.Namespace, depth: int) -> tuple[RetrievalConfig, dict[str, str]]:
    """Retrieval config from --preset or the explicit --levels/--weights flags"""
    exhaustive = args.exhaustive or getattr(args, "mode", "hier") == "exhaustive"
    top_k = args.topk if args.topk is not None else min(DEFAULT_TOP_K, args.kprime)
    if args.preset is not None:
        preset = Preset(args.preset)
        if exhaustive and preset is not Preset.SW:
            raise ConfigurationError(f"preset {preset.value} is not exhaustive; drop the exhaustive mode or use preset SW")
        config = RetrievalConfig.for_preset(preset, depth, k_prime=args.kprime, top_k=top_k, weights=args.weights)
        return config, {"mode": "exhaustive" if config.exhaustive else "hier", "preset": preset.value}
    config = RetrievalConfig(
        k_prime=args.kprime,
        levels=args.levels,
        weights=args.weights,
        top_k=top_k,
        exhaustive=exhaustive,
    )
    return config, {"mode": "exhaustive" if exhaustive else "hier"}


def cmd_synth(args: argparse.Namespace) -> int:
    height, width = args.grid
    spec = SceneSpec(
        n_panoramas=args.panoramas,
        channels=args.dim,
        grid_height=height,
        grid_width=width,
        levels=args.levels,
        noise=args.noise,
        queries_per_panorama=args.queries,
        query_limit=args.query_limit,
        seed=args.seed,
    )
    write_dataset(generate_dataset(spec, workers=args.workers), args.out)
    return 0


def cmd_build(args: argparse.Namespace) -> int:
    sources = read_panorama_dir(args.features)
    if not sources:
        raise InvalidInputError(f"no panorama_<id>.hfgr files in {args.features}")
    channels = sources[0].leaf_grids[0].channels
    spec = PoolingSpec(
        levels=args.levels,
        channels=channels,
        dim=args.dim or channels,
        gem_p=args.gem_p,
        seed=args.seed,
    )
    if args.store_levels:
        stored = args.store_levels
    elif args.preset is not None:
        stored = Preset(args.preset).stored_levels(args.levels)
    else:
        stored = None
    config = BallConfig(curvature=args.curvature, dim=spec.dim)
    index = build_index(sources, spec.to_config(), config, window_layout(args.levels), stored, workers=args.workers)
    persist_index(index, args.out)
    write_pooling_spec(spec, args.out)
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    index = load_index(args.index)
    pooling = pooling_for_index(args.index, index)
    h_q = embed_query(read_query_grid(args.query), pooling, index.config)
    config, _ = _retrieval_config(args, index.depth)
    if config.exhaustive:
        results = exhaustive_search(h_q, index, config.top_k)
    else:
        results = retrieve(h_q, index, config)
    if args.json:
        print(json.dumps([result.model_dump(mode="json") for result in results], indent=2))
    else:
        for result in results:
            print(f"{result.rank}\t{result.id}\t{result.score:.6f}")
    return 0


def cmd_viz(args: argparse.Namespace) -> int:
    frame = export_coordinates(load_index(args.index))
    write_coordinates(frame, args.out)
    if args.figure is not None:
        write_figure(frame, args.figure)
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    index = load_index(args.index)
    pooling = pooling_for_index(args.index, index)
    query_set = load_query_set(args.queries)
    queries = embed_queries(query_set.grids, pooling, index.config)
    config, labels = _retrieval_config(args, index.depth)
    if args.grid_search:
        config, _ = grid_search_weights(index, queries, query_set.panorama_ids, config, workers=args.workers)
        labels["grid_search"] = "true"
    report, table = run_benchmark(
        index,
        queries,
        query_set.panorama_ids,
        config,
        index_storage_bytes(index),
        workers=args.workers,
        labels=labels,
    )
    _write_json(report.model_dump_json(indent=2), args.report)
    if args.table is not None:
        table.to_csv(args.table, index=False)
        logger.success(f"Per-query table written | path={args.table}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    sources = read_panorama_dir(args.features)
    if not sources:
        raise InvalidInputError(f"no panorama_<id>.hfgr files in {args.features}")
    if args.index is not None:
        index = load_index(args.index)
        pooling = pooling_for_index(args.index, index)
        config = index.config
    else:
        channels = sources[0].leaf_grids[0].channels
        spec = PoolingSpec(levels=args.levels, channels=channels, dim=args.dim or channels, gem_p=args.gem_p, seed=args.seed)
        pooling = spec.to_config()
        config = BallConfig(curvature=args.curvature, dim=spec.dim)
    query_set = load_query_set(args.queries)
    comparison = compare_geometries(sources, query_set.grids, query_set.panorama_ids, pooling, config)
    _write_json(comparison.model_dump_json(indent=2), args.report)
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    results = run_checks(quick=args.quick, names=args.check or None)
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status}  {result.name:<22} {result.seconds:7.2f}s  {result.detail}")
    failed = [result.name for result in results if not result.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _add_pooling_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--levels", type=int, default=5, help="Hierarchy depth L (default: 5)")
    parser.add_argument("--curvature", type=float, default=1.0, help="Ball curvature c (default: 1.0)")
    parser.add_argument("--dim", type=int, default=None, help="Descriptor dimension D (default: channel count)")
    parser.add_argument("--gem-p", type=float, default=DEFAULT_GEM_P, help="GeM exponent (default: 3)")
    parser.add_argument("--seed", type=int, default=0, help="Projection seed (default: 0)")


def _add_retrieval_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=[p.value for p in Preset], default=None, help="Named retrieval variant")
    parser.add_argument("--kprime", type=int, default=100, help="Shortlist size K' (default: 100)")
    parser.add_argument("--levels", type=_levels, default=(), help="Rescoring levels, e.g. 5 or 4,5")
    parser.add_argument("--weights", type=_weights, default=None, help="Fusion weights, e.g. 1:0.3,5:0.7")
    parser.add_argument("--topk", type=int, default=None, help="Results returned (default: 20, at most K')")
    parser.add_argument("--exhaustive", action="store_true", help="Sliding-window search over leaf descriptors")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog=PROG, description="Hierarchical hyperbolic place retrieval over panorama feature grids")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    synth = commands.add_parser("synth", help="Generate a synthetic dataset")
    synth.add_argument("--panoramas", type=int, required=True, help="Number of panoramas")
    synth.add_argument("--levels", type=int, default=5, help="Hierarchy depth L (default: 5)")
    synth.add_argument("--dim", type=int, default=16, help="Feature channels C (default: 16)")
    synth.add_argument("--grid", type=_grid, default=(4, 4), help="Query grid HxW (default: 4x4)")
    synth.add_argument("--noise", type=float, default=0.1, help="Query noise scale (default: 0.1)")
    synth.add_argument("--queries", type=int, default=1, help="Queries per panorama (default: 1)")
    synth.add_argument("--query-limit", type=int, default=None, help="Subsample the queries to this many")
    synth.add_argument("--seed", type=int, default=0, help="Scene seed (default: 0)")
    synth.add_argument("--workers", type=int, default=1, help="Generator threads (default: 1)")
    synth.add_argument("--out", type=Path, required=True, help="Output directory")
    synth.set_defaults(handler=cmd_synth)

    build = commands.add_parser("build", help="Build and persist an index from panorama feature grids")
    build.add_argument("--features", type=Path, required=True, help="Directory of panorama_<id>.hfgr files")
    _add_pooling_flags(build)
    build.add_argument("--store-levels", type=_levels, default=(), help="Levels kept in the index (default: all)")
    build.add_argument("--preset", choices=[p.value for p in Preset], default=None, help="Store the levels a preset needs")
    build.add_argument("--workers", type=int, default=1, help="Build threads (default: 1)")
    build.add_argument("--out", type=Path, required=True, help="Index file")
    build.set_defaults(handler=cmd_build)

    query = commands.add_parser("query", help="Retrieve the best matches for one query grid")
    query.add_argument("--index", type=Path, required=True, help="Index file")
    query.add_argument("--query", type=Path, required=True, help="Query grid file")
    _add_retrieval_flags(query)
    query.add_argument("--json", action="store_true", help="Print results as JSON")
    query.set_defaults(handler=cmd_query)

    viz = commands.add_parser("viz", help="Export descriptor norms and angles")
    viz.add_argument("--index", type=Path, required=True, help="Index file")
    viz.add_argument("--out", type=Path, required=True, help="CSV output")
    viz.add_argument("--figure", type=Path, default=None, help="Also write a polar HTML figure")
    viz.set_defaults(handler=cmd_viz)

    bench = commands.add_parser("bench", help="Recall, evaluation count and latency over a query set")
    bench.add_argument("--index", type=Path, required=True, help="Index file")
    bench.add_argument("--queries", type=Path, required=True, help="Directory with ground_truth.csv and query grids")
    bench.add_argument("--mode", choices=["hier", "exhaustive"], default="hier", help="Retrieval mode (default: hier)")
    _add_retrieval_flags(bench)
    bench.add_argument("--grid-search", action="store_true", help="Grid-search the fusion weights first")
    bench.add_argument("--workers", type=int, default=1, help="Query threads (default: 1)")
    bench.add_argument("--report", type=Path, default=None, help="JSON report path (default: stdout)")
    bench.add_argument("--table", type=Path, default=None, help="Per-query CSV path")
    bench.set_defaults(handler=cmd_bench)

    ablate = commands.add_parser("ablate", help="Compare Euclidean and hyperbolic global descriptors")
    ablate.add_argument("--features", type=Path, required=True, help="Directory of panorama_<id>.hfgr files")
    ablate.add_argument("--queries", type=Path, required=True, help="Directory with ground_truth.csv and query grids")
    ablate.add_argument("--index", type=Path, default=None, help="Take pooling and ball config from this index")
    _add_pooling_flags(ablate)
    ablate.add_argument("--report", type=Path, default=None, help="JSON report path (default: stdout)")
    ablate.set_defaults(handler=cmd_ablate)

    verify = commands.add_parser("verify", help="Run the verification checks")
    verify.add_argument("--quick", action="store_true", help="Skip the large-scene checks")
    verify.add_argument("--check", action="append", choices=list(CHECKS), help="Run only this check (repeatable)")
    verify.set_defaults(handler=cmd_verify)
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = "DEBUG" if verbose else "WARNING" if quiet else "INFO"
    logger.remove()
    logger.add(sys.stderr, level=level, format=LOG_FORMAT)
    logger.enable("hyperplace")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        return args.handler(args)
    except (HyperplaceError, ValidationError, OSError) as exc:
        message = " ".join(str(exc).split())
        print(f"{PROG}: error: {message}", file=sys.stderr)
        return 2
