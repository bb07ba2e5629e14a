"""Command-line entry point: dataset generation, mechanistic simulation,
staged pipeline runs, and the regional case study, all driven by JSON
config files."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .datagen import write_dataset
from .expert_models import (
    ExpertOdeSpec,
    PkpdParams,
    SeirhdParams,
    SeirmParams,
    TreatmentSchedule,
    simulate_expert,
)
from .harness import (
    CaseStudyConfig,
    ExperimentConfig,
    StageError,
    _load_or_generate,
    case_study,
    run_experiment,
    write_case_study_csv,
)
from .ode_core import TimeGrid

# Subcommands that run the experiment pipeline, mapped to their last stage.
_PIPELINE_STOPS = {
    "train-hybrid": "hybrid",
    "train-diff": "diffusion",
    "select-eta": "select-eta",
    "sample": "sample",
    "evaluate": None,
    "run": None,
}

_PARAM_CLASSES = {"SEIRM": SeirmParams, "SEIRHD": SeirhdParams, "PKPD": PkpdParams}


def _resolve_seed(args, config_seed: int) -> int:
    """Config seed < --seed flag < ODEGUIDE_SEED environment variable."""
    seed = config_seed
    if args.seed is not None:
        seed = args.seed
    env = os.environ.get("ODEGUIDE_SEED")
    if env is not None:
        seed = int(env)
    return seed


def _experiment_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_file(args.config)
    config.seed = _resolve_seed(args, config.seed)
    if args.out is not None:
        config.out_dir = args.out
    return config


def _cmd_datagen(args) -> None:
    config = _experiment_config(args)
    dataset = _load_or_generate(config)
    write_dataset(dataset, config.out_dir)


def _cmd_simulate(args) -> None:
    with open(args.config) as fh:
        spec = json.load(fh)
    family = spec["family"]
    if family not in _PARAM_CLASSES:
        raise ValueError(f"unknown family {family!r}")
    params = _PARAM_CLASSES[family].from_dict(spec.get("params", {}))
    treatment = TreatmentSchedule(
        kind=spec["treatment"]["kind"],
        mandate_start=spec["treatment"].get("mandate_start"),
        doses=tuple(tuple(d) for d in spec["treatment"].get("doses", [])),
        k_d=spec["treatment"].get("k_d", 5.0),
    )
    grid = TimeGrid(
        t0=spec.get("t0", 0.0), dt=spec["dt"], n_steps=spec["n_steps"]
    )
    ode = ExpertOdeSpec(
        family=family, params=params, init=np.asarray(spec["init"], float), treatment=treatment
    )
    traj = simulate_expert(ode, grid)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "simulation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        dim = traj.states.shape[1]
        writer.writerow(["t"] + [f"z_{j+1}" for j in range(dim)])
        for t, row in zip(grid.times, traj.states):
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def _cmd_pipeline(args) -> None:
    config = _experiment_config(args)
    run_experiment(config, stop_after=_PIPELINE_STOPS[args.command])


def _cmd_case_study(args) -> None:
    config = CaseStudyConfig.from_file(args.config)
    config.seed = _resolve_seed(args, config.seed)
    rows = case_study(config)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_case_study_csv(rows, out / "case_study.csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="odeguide",
        description="Expert-ODE-guided counterfactual diffusion pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = [
        ("datagen", "generate a dataset and write it to --out"),
        ("simulate", "integrate a mechanistic model from a simulation config"),
        ("train-hybrid", "run the pipeline through hybrid-predictor training"),
        ("train-diff", "run the pipeline through diffusion training"),
        ("select-eta", "run the pipeline through guidance-strength selection"),
        ("sample", "run the pipeline through counterfactual sampling"),
        ("evaluate", "run the full pipeline and write the metric report"),
        ("case-study", "run the regional neighbor-matching protocol"),
        ("run", "run the full pipeline"),
    ]
    for name, help_text in commands:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default=None, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "datagen":
            _cmd_datagen(args)
        elif args.command == "simulate":
            _cmd_simulate(args)
        elif args.command == "case-study":
            _cmd_case_study(args)
        else:
            _cmd_pipeline(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
