import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from pythonjsonlogger import jsonlogger

from bev_closure.config import load_config
from bev_closure.database import storage
from bev_closure.errors import ConfigError, DatabaseError, EvaluationError, InputFormatError, StageError
from bev_closure.handlers import session
from bev_closure.io.manifest import SessionManifest, load_manifest
from bev_closure.io.synthetic import WorldSpec, generate_synthetic_world, load_world_spec

EXIT_OK = 0
EXIT_STAGE_FAILURE = 1
EXIT_INPUT_ERROR = 2


def setup_logging():
    log_level = os.getenv("LOG_LEVEL", "INFO").upper()

    logger = logging.getLogger()
    logger.setLevel(log_level)
    logger.handlers = []

    handler = logging.StreamHandler(sys.stdout)
    handler.setLevel(log_level)

    formatter = jsonlogger.JsonFormatter(
        "%(asctime)s %(name)s %(levelname)s %(message)s",
        rename_fields={
            "asctime": "timestamp",
            "levelname": "level",
            "name": "logger"
        }
    )
    handler.setFormatter(formatter)
    logger.addHandler(handler)

    logging.info("Logging configured", extra={"log_level": log_level})


def _session_arguments(parser: argparse.ArgumentParser, prefix: str = ""):
    group = parser.add_argument_group(f"{prefix or 'session'} input")
    group.add_argument(f"--{prefix}manifest", help="session.yaml")
    group.add_argument(f"--{prefix}scans", help="directory of *.bin scans")
    group.add_argument(f"--{prefix}poses", help="odometry pose file")
    group.add_argument(f"--{prefix}ground-truth", help="ground-truth pose file")
    group.add_argument(f"--{prefix}session-id", help="session name")


def _manifest_from(args: argparse.Namespace, prefix: str = "", required: bool = True) -> Optional[SessionManifest]:
    dest = prefix.replace("-", "_")
    manifest_path = getattr(args, f"{dest}manifest")
    scans = getattr(args, f"{dest}scans")
    poses = getattr(args, f"{dest}poses")
    if manifest_path:
        manifest = load_manifest(manifest_path)
        ground_truth = getattr(args, f"{dest}ground_truth")
        if ground_truth:
            manifest.ground_truth_pose_file = Path(ground_truth)
        return manifest
    if scans or poses:
        if not (scans and poses):
            raise ConfigError(f"--{prefix}scans and --{prefix}poses must be given together")
        return SessionManifest(
            scan_directory=scans,
            pose_file=poses,
            ground_truth_pose_file=getattr(args, f"{dest}ground_truth"),
            session_id=getattr(args, f"{dest}session_id") or Path(scans).resolve().parent.name,
        )
    if required:
        raise ConfigError(f"a session is required: --{prefix}manifest or --{prefix}scans/--{prefix}poses")
    return None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bev_closure", description="BEV loop-closure detection for LiDAR sessions")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file (default: $BEV_CLOSURE_CONFIG)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    verbs = parser.add_subparsers(dest="verb", required=True)

    run = verbs.add_parser("run", parents=[common], help="detect loop closures in a session")
    _session_arguments(run)
    run.add_argument("--output", required=True, help="directory for closures.csv and reports")
    run.add_argument("--db", help="query this saved database instead of the session's own")
    run.add_argument("--save-db", help="also write the session's database to this file")
    _session_arguments(run, prefix="reference-")
    run.add_argument("--dump-bev", help="write map_XXXX.pgm density images to this directory")

    build_db = verbs.add_parser("build-db", parents=[common], help="process a reference session into a database file")
    _session_arguments(build_db)
    build_db.add_argument("--db", required=True, help="database file to write")

    evaluate = verbs.add_parser("eval", parents=[common], help="metrics from a finished run against ground truth")
    _session_arguments(evaluate)
    evaluate.add_argument("--output", required=True, help="directory written by 'run'")
    evaluate.add_argument("--db", help="reference database for cross-session evaluation")
    _session_arguments(evaluate, prefix="reference-")

    stress = verbs.add_parser("stress-ground", parents=[common], help="ground-alignment stress test")
    _session_arguments(stress)
    stress.add_argument("--planar", type=int, default=0, help="number of synthetic planar maps to add")
    stress.add_argument("--magnitudes", type=float, nargs="+", default=list(session.DEFAULT_MAGNITUDES))
    stress.add_argument("--trials", type=int, default=session.DEFAULT_TRIALS)
    stress.add_argument("--output", required=True)

    synth = verbs.add_parser("synth", help="generate a synthetic session")
    synth.add_argument("--world", help="world spec YAML (default: corridor)")
    synth.add_argument("--seed", type=int, help="override the world seed")
    synth.add_argument("--session-id")
    synth.add_argument("--output", required=True)

    dump = verbs.add_parser("dump-bev", parents=[common], help="write BEV density images as PGM")
    _session_arguments(dump)
    dump.add_argument("--output", required=True)
    return parser


def run(args: argparse.Namespace) -> int:
    if args.verb == "synth":
        spec = load_world_spec(args.world) if args.world else WorldSpec()
        if args.seed is not None:
            spec.seed = args.seed
        generate_synthetic_world(spec.validate(), args.output, session_id=args.session_id)
        return EXIT_OK

    config = load_config(args.config, args.overrides)

    if args.verb == "run":
        manifest = _manifest_from(args)
        reference_manifest = _manifest_from(args, "reference-", required=False)
        loaded_db = storage.load(args.db) if args.db else None
        if reference_manifest is not None and loaded_db is None:
            raise ConfigError("--reference-manifest needs --db")
        session.run_session(
            manifest,
            config,
            output_dir=args.output,
            loaded_db=loaded_db,
            save_db=args.save_db,
            reference_manifest=reference_manifest,
            bev_dir=args.dump_bev,
        )
    elif args.verb == "build-db":
        session.build_database(_manifest_from(args), config, args.db)
    elif args.verb == "eval":
        reference_db = storage.load(args.db) if args.db else None
        session.evaluate_outputs(
            _manifest_from(args),
            config,
            args.output,
            reference_manifest=_manifest_from(args, "reference-", required=False),
            reference_db=reference_db,
        )
    elif args.verb == "stress-ground":
        session.run_ground_stress(
            config,
            manifest=_manifest_from(args, required=args.planar == 0),
            planar_maps=args.planar,
            magnitudes=args.magnitudes,
            trials=args.trials,
            output_dir=args.output,
        )
    elif args.verb == "dump-bev":
        session.dump_density_images(_manifest_from(args), config, args.output)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        code = run(args)
    except (ConfigError, InputFormatError, EvaluationError, DatabaseError) as e:
        logging.error("Invalid input", extra={"verb": args.verb, "error": str(e), "error_type": type(e).__name__})
        return EXIT_INPUT_ERROR
    except StageError as e:
        logging.error("Stage failed", extra={
            "verb": args.verb,
            "map_index": e.map_index,
            "stage": e.stage,
            "error": str(e),
        })
        return EXIT_STAGE_FAILURE

    logging.info("Command finished", extra={"verb": args.verb, "event": "command_finished"})
    return code


if __name__ == "__main__":
    sys.exit(main())
