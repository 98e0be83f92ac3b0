"""Command-line entry point: ``driverval <stage> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 partial
failure (some demos failed to train or roll out; results were written).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .errors import (
    ConfigError,
    ContractError,
    DataIntegrityError,
    DrivervalError,
    GeometryError,
    SchemaError,
)
from .pipeline import PipelineConfig, cmd_extract, cmd_gridsearch, cmd_train, cmd_validate
from .reward import FeatureConstants
from .synthgen import CorpusSpec, synthetic_corpus

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_PARTIAL = 4

log = logging.getLogger("driverval")


def _pair(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="driverval", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline configuration")
    common.add_argument("--data", help="directory with HighD-schema CSV files")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("--seed", type=int)
    common.add_argument("--max-demos", type=int, help="only use the first N demonstrations")
    g = common.add_argument_group("overrides")
    g.add_argument("--c", type=float, help="lane/bounds Gaussian shape constant")
    g.add_argument("--sigma-x", type=float)
    g.add_argument("--sigma-y", type=float)
    g.add_argument("--horizon", type=int, help="planning horizon and segment length N")
    g.add_argument("--ax-bounds", type=_pair, metavar="LO,HI")
    g.add_argument("--ay-bounds", type=_pair, metavar="LO,HI")
    g.add_argument("--replan-stride", type=int)

    sub.add_parser("extract", parents=[common], help="extract lane-change demonstrations")
    sub.add_parser("train", parents=[common], help="fit reward weights per demonstration")
    sub.add_parser("validate", parents=[common], help="roll out agents, tactical and operational validation")
    gs = sub.add_parser("gridsearch", parents=[common], help="rank feature constants")
    gs.add_argument("--grid-demos", type=int)
    run = sub.add_parser("run", parents=[common], help="extract, train and validate")
    run.add_argument("--gridsearch", action="store_true", help="also run the grid search")

    sy = sub.add_parser("synth", help="write a synthetic HighD-schema corpus")
    sy.add_argument("--out", required=True)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--recordings", type=int, default=CorpusSpec.n_recordings)
    sy.add_argument("--demos-per-recording", type=int, default=CorpusSpec.demos_per_recording)
    sy.add_argument("--duration", type=int, default=CorpusSpec.duration, help="frames per demonstration")
    sy.add_argument("--no-merge-recording", action="store_true")
    return p


def config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    simple = {"data_dir": args.data, "out_dir": args.out, "jobs": args.jobs, "seed": args.seed,
              "max_demos": args.max_demos, "grid_demos": getattr(args, "grid_demos", None)}
    cfg = replace(cfg, **{k: v for k, v in simple.items() if v is not None})
    try:
        k = cfg.constants
        cfg = replace(cfg, constants=FeatureConstants(
            args.c if args.c is not None else k.c,
            args.sigma_x if args.sigma_x is not None else k.sigma_x,
            args.sigma_y if args.sigma_y is not None else k.sigma_y))
        agent = {"N": args.horizon, "ax_bounds": args.ax_bounds, "ay_bounds": args.ay_bounds,
                 "replan_stride": args.replan_stride}
        cfg = replace(cfg, agent=replace(cfg.agent, **{k: v for k, v in agent.items() if v is not None}))
        if args.horizon is not None:
            cfg = replace(cfg, optimizer=replace(cfg.optimizer, horizon=args.horizon))
    except (ContractError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def _run(args) -> int:
    if args.command == "synth":
        spec = CorpusSpec(args.recordings, args.demos_per_recording, args.duration,
                          not args.no_merge_recording)
        doc = synthetic_corpus(args.out, args.seed, spec)
        print(f"wrote {len(doc['theta_star'])} generated demonstrations to {args.out}")
        return EXIT_OK

    cfg = config_from_args(args)
    status = EXIT_OK
    if args.command in ("extract", "run"):
        s = cmd_extract(cfg)
        print(f"extract: {s.n_demos} demonstrations, excluded recordings: {len(s.excluded)} -> {s.manifest_path}")
    if args.command in ("train", "run"):
        s = cmd_train(cfg)
        print(f"train: {s.n_converged}/{s.n_total} converged -> {s.results_path}")
        if s.partial_failure:
            status = EXIT_PARTIAL
    if args.command in ("validate", "run"):
        r = cmd_validate(cfg)
        tac = r.report.get("tactical")
        share = f"{tac['desirable_pct']:.1f}% desirable" if tac else "no rollouts"
        print(f"validate: {r.report['n_rollouts']} rollouts, {share} -> {r.path}")
        if r.partial_failure:
            status = EXIT_PARTIAL
    if args.command == "gridsearch" or (args.command == "run" and args.gridsearch):
        ranked = cmd_gridsearch(cfg)
        best = ranked[0]
        tie = " (tied)" if best.tied_for_best else ""
        print(f"gridsearch: best {best.constants.as_tuple()} with score {best.score}{tie}")
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, DataIntegrityError, GeometryError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DrivervalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
