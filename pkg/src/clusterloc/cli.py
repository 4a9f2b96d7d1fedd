"""Command-line entry points: ``build``, ``localize``, ``evaluate``, ``synth``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 no query localized.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .ann import AnnIndex, SearchBudget, StaleIndexError, build_index
from .bench import evaluate
from .formats import file_sha256, import_text_model, load_model, save_model
from .matching import MatchConfig
from .model import ModelError
from .pipeline import FAST_VOTING, MODES, dumps_record, localize, pose_record
from .pose import PoseConfig
from .query import load_queries
from .synth import SynthConfig, generate_world, load_preset, load_world, preset_names, save_world

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NONE = 0, 1, 2, 3

INDEX_FILE = "index.bin"
TEXT_MODEL = "model.txt"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    model_dir: Path
    queries: Path
    output: Path | None = None
    trace: Path | None = None
    mode: str = FAST_VOTING
    threads: int = 1
    seed: int = 0
    match: MatchConfig = field(default_factory=MatchConfig)
    pose: PoseConfig = field(default_factory=PoseConfig)
    budget: SearchBudget = field(default_factory=SearchBudget)

    def __post_init__(self):
        if self.mode not in MODES:
            raise UsageError(f"unknown mode {self.mode!r}")
        if self.threads < 1:
            raise UsageError("--threads must be at least 1")
        for p in (self.model_dir, self.queries):
            if not Path(p).exists():
                raise DataError(f"no such file or directory: {p}")
        self.match = replace(self.match, seed=self.seed, k=self.budget.k)
        self.pose = replace(self.pose, seed=self.seed)

    @classmethod
    def from_args(cls, a) -> RunConfig:
        try:
            match = MatchConfig(k=a.k, tau=a.tau, n_forward=a.nf, n_back=a.nb, max_backmatch=a.max_backmatch)
            pose = PoseConfig(epsilon=a.epsilon, min_inliers=a.min_inliers)
            budget = SearchBudget(max_leaves_checked=a.leaves, k=a.k)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        return cls(Path(a.model), Path(a.queries), Path(a.out) if a.out else None,
                   Path(a.trace) if a.trace else None, a.mode, a.threads, a.seed, match, pose, budget)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    m, p, b = MatchConfig(), PoseConfig(), SearchBudget()
    ap = _Parser(prog="clusterloc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("build", help="precompute the neighbor table and search index of a model")
    sp.add_argument("model", help="model directory (model.json, or model.txt to import)")
    sp.add_argument("--leaf-size", type=_positive_int, default=16)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("localize", help="localize every query image against a built model")
    sp.add_argument("model")
    sp.add_argument("queries", help="queries.bin")
    sp.add_argument("--out", help="JSON-lines pose records (default: standard output)")
    sp.add_argument("--trace", help="JSON-lines back-matching traces")
    sp.add_argument("--mode", choices=MODES, default=FAST_VOTING)
    sp.add_argument("--k", type=_positive_int, default=b.k)
    sp.add_argument("--leaves", type=_positive_int, default=b.max_leaves_checked)
    sp.add_argument("--tau", type=float, default=m.tau)
    sp.add_argument("--nf", type=_positive_int, default=m.n_forward)
    sp.add_argument("--nb", type=_positive_int, default=m.n_back)
    sp.add_argument("--epsilon", type=float, default=p.epsilon)
    sp.add_argument("--min-inliers", type=int, default=p.min_inliers)
    sp.add_argument("--max-backmatch", type=_positive_int, default=m.max_backmatch)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=_positive_int, default=1)

    sp = sub.add_parser("evaluate", help="score pose records against a synthetic world")
    sp.add_argument("results", help="JSON-lines pose records from localize")
    sp.add_argument("world", help="world directory written by synth")
    sp.add_argument("--trace", help="JSON-lines traces for the location-recognition table")
    sp.add_argument("--out", help="prefix for <prefix>.json and <prefix>.txt reports")
    sp.add_argument("--min-inliers", type=int, default=p.min_inliers)

    sp = sub.add_parser("synth", help="generate a synthetic world")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=preset_names())
    src.add_argument("--config", help="JSON file of SynthConfig fields")
    sp.add_argument("--seed", type=int, help="override the configured seed")
    sp.add_argument("--out", required=True, help="output world directory")
    return ap


def _load_index(model_dir: Path, model) -> AnnIndex:
    path = model_dir / INDEX_FILE
    if not path.exists():
        raise DataError(f"{path} missing; run 'clusterloc build {model_dir}' first")
    try:
        return AnnIndex.load(path, model.descriptors, file_sha256(model_dir / "views.bin"))
    except StaleIndexError as exc:
        raise DataError(f"{exc}; rebuild the model") from None


def cmd_build(args, out=None) -> int:
    out = out or sys.stdout
    model_dir = Path(args.model)
    if not (model_dir / "model.json").exists():
        text = model_dir / TEXT_MODEL
        if not text.exists():
            raise DataError(f"{model_dir}: neither model.json nor {TEXT_MODEL} found")
        save_model(import_text_model(text), model_dir)
        print(f"imported {text}", file=out)
    model = load_model(model_dir)
    views_hash = file_sha256(model_dir / "views.bin")
    index_path = model_dir / INDEX_FILE
    if index_path.exists():
        try:
            idx = AnnIndex.load(index_path, model.descriptors, views_hash)
            if idx.leaf_size == args.leaf_size and idx.seed == args.seed:
                print(f"{model_dir}: up to date", file=out)
                return EXIT_OK
        except (StaleIndexError, ValueError, KeyError, OSError):
            pass
    index = build_index(model, leaf_size=args.leaf_size, seed=args.seed)
    index.save(index_path, views_hash)
    print(f"{model_dir}: built index over {model.num_views} views ({index.num_leaves} leaves)", file=out)
    return EXIT_OK


def run_localization(run: RunConfig):
    """Localizations for every query, in input order."""
    model = load_model(run.model_dir)
    index = _load_index(run.model_dir, model)
    queries = load_queries(run.queries)

    def one(q):
        return localize(q, model, index, run.match, run.pose, run.budget, run.mode)

    if run.threads > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=run.threads) as pool:
            return list(pool.map(one, queries))
    return [one(q) for q in queries]


def cmd_localize(args, out=None) -> int:
    out = out or sys.stdout
    run = RunConfig.from_args(args)
    locs = run_localization(run)
    if not locs:
        print("no queries", file=sys.stderr)
        return EXIT_NONE
    lines = [dumps_record(pose_record(loc)) for loc in locs]
    if run.output is not None:
        run.output.write_text("".join(line + "\n" for line in lines))
    else:
        for line in lines:
            print(line, file=out)
    if run.trace is not None:
        run.trace.write_text("".join((loc.trace.to_json() if loc.trace else "null") + "\n" for loc in locs))
    ok = sum(loc.success for loc in locs)
    dest = out if run.output is not None else sys.stderr
    print(f"localized {ok}/{len(locs)} queries ({run.mode})", file=dest)
    return EXIT_OK if ok else EXIT_NONE


def _read_jsonl(path) -> list:
    try:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_evaluate(args, out=None) -> int:
    out = out or sys.stdout
    records = _read_jsonl(args.results)
    world = load_world(args.world)
    traces = None
    if args.trace:
        traces = _read_jsonl(args.trace)
        if any(t is None for t in traces):
            raise DataError("traces are only available for fast-voting runs")
    try:
        report = evaluate(records, world, traces=traces, min_inliers=args.min_inliers)
    except (ValueError, KeyError) as exc:
        raise DataError(str(exc)) from None
    if args.out:
        Path(f"{args.out}.json").write_text(report.to_json())
        Path(f"{args.out}.txt").write_text(report.to_text())
    print(report.to_text(), end="", file=out)
    return EXIT_OK


def cmd_synth(args, out=None) -> int:
    out = out or sys.stdout
    try:
        if args.preset:
            cfg = load_preset(args.preset)
        else:
            cfg = SynthConfig.from_dict(json.loads(Path(args.config).read_text()))
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise DataError(f"invalid synth config: {exc}") from None
    world = generate_world(cfg)
    save_world(world, args.out)
    print(f"wrote {args.out}: {world.model.num_points} points, {world.model.num_images} images, "
          f"{len(world.queries)} queries", file=out)
    return EXIT_OK


COMMANDS = {"build": cmd_build, "localize": cmd_localize, "evaluate": cmd_evaluate, "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"clusterloc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ModelError, OSError) as exc:
        print(f"clusterloc: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
