import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

# Load environment variables before the settings module reads them
load_dotenv()

from pydantic import ValidationError  # noqa: E402

from wemp.configs import settings  # noqa: E402
from wemp.configs.presets import EXPERIMENT_PRESETS, preset_config  # noqa: E402
from wemp.exceptions import WempError  # noqa: E402
from wemp.models.experiment import ExperimentConfig  # noqa: E402
from wemp.services.coefficient import field_from_spec  # noqa: E402
from wemp.services.experiment import projection_study, run_experiment  # noqa: E402
from wemp.utils.logger import close_logger, setup_logger  # noqa: E402

PROJECTION_PAIRS = ((4, 16), (8, 8))
PROJECTION_LEVELS = (0, 1, 2, 3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wemp",
        description="Parareal with a wavelet-based edge multiscale space for high-contrast parabolic problems",
    )
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--config", type=Path, help="JSON file mirroring ExperimentConfig")
    source.add_argument("--preset", choices=sorted(EXPERIMENT_PRESETS), help="named experiment")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--eps", type=float, help="parareal tolerance")
    parser.add_argument("--kmax", type=int, help="maximum parareal iterations")
    parser.add_argument("--threads", type=int, help="worker threads for local and fine solves")
    parser.add_argument("--study", choices=["projection"], help="run a study instead of an experiment")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides: Dict[str, Any] = {}
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    if args.eps is not None:
        overrides["tolerance"] = args.eps
    if args.kmax is not None:
        overrides["kmax"] = args.kmax
    if args.threads is not None:
        overrides["threads"] = args.threads

    if args.config is not None:
        raw = json.loads(args.config.read_text(encoding="utf-8"))
        raw.update(overrides)
        return ExperimentConfig.model_validate(raw)
    return preset_config(args.preset or "exp1", **overrides)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ValidationError, WempError, OSError, json.JSONDecodeError) as e:
        setup_logger("wemp", settings.LOG_LEVEL).error(f"Invalid configuration: {e}")
        close_logger("wemp")
        return 2

    out_dir = Path(cfg.output_dir)
    logger = setup_logger("wemp", settings.LOG_LEVEL, out_dir / "run.log" if args.study else None)
    try:
        if args.study == "projection":
            rows = projection_study(
                PROJECTION_PAIRS, PROJECTION_LEVELS, lambda grid: field_from_spec(grid, cfg.coefficient),
                out_dir, cfg.resolved_threads(),
            )
            logger.info(f"Projection study: {len(rows)} rows written to {out_dir / 'projection_study.csv'}")
        else:
            outcome = run_experiment(cfg)
            report = outcome.report
            logger.info(
                f"Run '{cfg.name}' finished: {report.iterations} parareal iterations, "
                f"converged={report.converged}, outputs in {outcome.run_dir}"
            )
    except WempError as e:
        logger.error(f"Run failed: {e}")
        return 1
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return 1
    finally:
        close_logger("wemp")
    return 0


if __name__ == "__main__":
    sys.exit(main())
