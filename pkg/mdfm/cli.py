import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError

from .models.errors import ConfigError, MdfmError
from .models.schemas import FittedModelRecord, ModelConfig, RunConfig, SimulationDesign
from .services.decomposition import Decomposer
from .services.ecm_estimator import EcmEstimator, FittedModel
from .services.nowcaster import Nowcaster, read_calendar
from .services.panel_builder import PanelBuilder
from .services.simulator import Simulator, default_parameters
from .services.state_space import StateSpaceBuilder, state_names
from .utils.file_utils import (
    ensure_output_dir,
    frame_to_csv,
    read_calendar_csv,
    read_macro_csv,
    read_micro_csv,
    read_record,
    validate_input_paths,
    write_record,
)

load_dotenv()

MODULE = "cli"
LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdfm", description="Multidimensional dynamic factor models")
    parser.add_argument("--log-level", default=os.getenv("MDFM_LOG_LEVEL", "INFO"), help="Logging level")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def output(p):
        p.add_argument("--out", dest="output_dir", default=os.getenv("MDFM_OUTPUT_DIR", "output"),
                       help="Output directory")

    simulate = sub.add_parser("simulate", help="Draw a synthetic panel from a known model")
    simulate.add_argument("--config", dest="config_path", help="Model configuration JSON")
    simulate.add_argument("--design", dest="design_path", help="Simulation design JSON")
    simulate.add_argument("--model", dest="model_path", help="Fitted model JSON supplying the true parameters")
    simulate.add_argument("--seed", type=int, default=None)
    simulate.add_argument("--periods", type=int, default=120)
    simulate.add_argument("--group-sizes", type=int, nargs="*", default=None)
    simulate.add_argument("--rotation-length", type=int, default=4)
    simulate.add_argument("--missing-rate", type=float, default=0.0)
    output(simulate)

    estimate = sub.add_parser("estimate", help="Fit a model by penalized ECM")
    estimate.add_argument("--config", dest="config_path", help="Model configuration JSON")
    estimate.add_argument("--macro", dest="macro_path", help="Macro CSV: time,series,value")
    estimate.add_argument("--micro", dest="micro_path", help="Micro CSV: subject_id,group_id,time,value")
    estimate.add_argument("--max-iterations", type=int, default=None)
    estimate.add_argument("--sample-end", type=int, default=None)
    output(estimate)

    decompose = sub.add_parser("decompose", help="Trend / cycle decomposition of a panel")
    decompose.add_argument("--model", dest="model_path", help="Fitted model JSON")
    decompose.add_argument("--macro", dest="macro_path")
    decompose.add_argument("--micro", dest="micro_path")
    output(decompose)

    nowcast = sub.add_parser("nowcast", help="Replay a release calendar with frozen coefficients")
    nowcast.add_argument("--model", dest="model_path", help="Fitted model JSON")
    nowcast.add_argument("--calendar", dest="calendar_path", help="Calendar CSV: release_date,series,ref_period,value[,group_id]")
    nowcast.add_argument("--macro", dest="macro_path", help="Macro values known before the first release")
    nowcast.add_argument("--micro", dest="micro_path", help="Micro values known before the first release")
    nowcast.add_argument("--targets", type=int, nargs="*", default=[])
    nowcast.add_argument("--core-only", action="store_true", help="Report core drivers without idiosyncratic cycles")
    output(nowcast)
    return parser


def _validated(model, payload, operation: str):
    try:
        return model.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"Invalid {model.__name__}: {e.errors()[0]['msg']}", MODULE, operation) from e


def load_config(path: str) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as handle:
        try:
            payload = json.load(handle)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Malformed configuration {path}: {str(e)}", MODULE, "load_config") from e
    return _validated(ModelConfig, payload, "load_config")


def load_model(path: str) -> FittedModel:
    try:
        record = read_record(path, FittedModelRecord)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Malformed model file {path}: {str(e)}", MODULE, "load_model") from e
    except ValidationError as e:
        raise ConfigError(f"Invalid model file {path}: {e.errors()[0]['msg']}", MODULE, "load_model") from e
    return FittedModel.from_record(record)


def _trace_frame(fitted: FittedModel) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in fitted.trace],
                        columns=["iteration", "objective", "median_delta", "q95_delta"])


def run_simulate(cfg: RunConfig, args: argparse.Namespace) -> None:
    config = load_config(cfg.config_path)
    if cfg.design_path:
        with open(cfg.design_path, "r", encoding="utf-8") as handle:
            design = _validated(SimulationDesign, json.load(handle), "simulate")
    else:
        sizes = args.group_sizes if args.group_sizes is not None else [60] * config.G
        design = _validated(SimulationDesign, {
            "periods": args.periods,
            "group_sizes": sizes,
            "rotation_length": args.rotation_length,
            "missing_rate": args.missing_rate,
        }, "simulate")
    if cfg.seed is not None:
        design = design.model_copy(update={"seed": cfg.seed})
    params = load_model(cfg.model_path).parameters if cfg.model_path else default_parameters(config)

    try:
        sizes = design.resolved_group_sizes(config.G)
    except ValueError as e:
        raise ConfigError(str(e), MODULE, "simulate") from e
    ss = StateSpaceBuilder().build_state_space(config, params, sizes)
    result = Simulator().simulate(ss, design)
    truth = FittedModel(config=result.config, parameters=result.parameters, layout=result.panel.layout(),
                        sample_end=result.panel.T)
    frame_to_csv(result.macro, os.path.join(cfg.output_dir, "macro.csv"))
    frame_to_csv(result.micro, os.path.join(cfg.output_dir, "micro.csv"))
    frame_to_csv(result.states_frame(state_names(config)), os.path.join(cfg.output_dir, "states.csv"))
    write_record(truth.to_record(), os.path.join(cfg.output_dir, "truth.json"))


def run_estimate(cfg: RunConfig, args: argparse.Namespace) -> None:
    config = load_config(cfg.config_path)
    panel = PanelBuilder().build(read_micro_csv(cfg.micro_path), read_macro_csv(cfg.macro_path), config)
    fitted = EcmEstimator().estimate(panel, config, sample_end=cfg.sample_end, max_iterations=cfg.max_iterations)
    write_record(fitted.to_record(), os.path.join(cfg.output_dir, "model.json"))
    frame_to_csv(_trace_frame(fitted), os.path.join(cfg.output_dir, "trace.csv"))
    parameters = pd.DataFrame({
        "name": list(fitted.parameters.describe(fitted.config).keys()),
        "value": fitted.parameters.pack(),
    })
    frame_to_csv(parameters, os.path.join(cfg.output_dir, "parameters.csv"))


def run_decompose(cfg: RunConfig, args: argparse.Namespace) -> None:
    fitted = load_model(cfg.model_path)
    layout_free = fitted.config.model_copy(update={"group_sizes": None})
    panel = PanelBuilder().build(read_micro_csv(cfg.micro_path), read_macro_csv(cfg.macro_path), layout_free)
    decomposer = Decomposer()
    decomposition = decomposer.decompose(fitted, panel)
    summary = decomposer.group_summary(fitted, panel, decomposition.smoothed)
    frame_to_csv(decomposition.frame, os.path.join(cfg.output_dir, "decomposition.csv"))
    frame_to_csv(summary, os.path.join(cfg.output_dir, "group_summary.csv"))


def run_nowcast(cfg: RunConfig, args: argparse.Namespace) -> None:
    fitted = load_model(cfg.model_path)
    releases = read_calendar(read_calendar_csv(cfg.calendar_path))
    nowcaster = Nowcaster()
    base = None
    if cfg.macro_path or cfg.micro_path:
        macro = read_macro_csv(cfg.macro_path) if cfg.macro_path else pd.DataFrame(columns=["time", "series", "value"])
        base = nowcaster.base_information_set(fitted, macro, read_micro_csv(cfg.micro_path))
    batches = nowcaster.replay(fitted, releases, targets=cfg.targets or None, core_only=cfg.core_only, base=base)
    rows = [estimate.model_dump() for _, estimates in batches for estimate in estimates]
    frame = pd.DataFrame(rows, columns=["release_date", "group", "ref_period", "estimate"])
    frame_to_csv(frame, os.path.join(cfg.output_dir, "early_estimates.csv"))


HANDLERS = {
    "simulate": run_simulate,
    "estimate": run_estimate,
    "decompose": run_decompose,
    "nowcast": run_nowcast,
}


def run(argv: Optional[List[str]] = None) -> int:
    """Execute one subcommand; 0 on success, 2 on model or argument errors, 3 on I/O failures"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=str(args.log_level).upper(), format=LOG_FORMAT)

    try:
        cfg = _validated(RunConfig, {
            "subcommand": args.subcommand,
            "config_path": getattr(args, "config_path", None),
            "design_path": getattr(args, "design_path", None),
            "model_path": getattr(args, "model_path", None),
            "macro_path": getattr(args, "macro_path", None),
            "micro_path": getattr(args, "micro_path", None),
            "calendar_path": getattr(args, "calendar_path", None),
            "output_dir": args.output_dir,
            "seed": getattr(args, "seed", None),
            "max_iterations": getattr(args, "max_iterations", None),
            "sample_end": getattr(args, "sample_end", None),
            "targets": getattr(args, "targets", []),
            "core_only": getattr(args, "core_only", False),
        }, "run")
        validate_input_paths(cfg.input_paths())
        ensure_output_dir(cfg.output_dir)
        logger.info("Running %s into %s", cfg.subcommand, cfg.output_dir)
        HANDLERS[cfg.subcommand](cfg, args)
    except MdfmError as e:
        logger.error("%s failed in %s: %s", args.subcommand, e.where, e.message)
        print(f"error [{e.where}]: {e.message}", file=sys.stderr)
        return 2
    except OSError as e:
        logger.error("I/O failure: %s", str(e))
        print(f"error [io]: {str(e)}", file=sys.stderr)
        return 3
    logger.info("Finished %s", cfg.subcommand)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
