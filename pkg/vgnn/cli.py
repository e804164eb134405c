"""Command-line interface for vgnn.

Copyright (C) 2025 vgnn-inverse contributors

This program is free software; you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation; either version 2 of the License, or
(at your option) any later version.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from vgnn.config import DEFAULT_SEED, PRESETS, RunConfig
from vgnn.datagen import BeamConfig, PlateConfig, generate_beam_dataset, generate_plate_dataset
from vgnn.dataset import import_external_dataset, load_dataset, save_dataset
from vgnn.errors import MeshError, NumericalError, SchemaError, ShapeError
from vgnn.gradcheck import default_cases, empty_case, run_gradcheck, run_op_checks, summarize
from vgnn.graph import assemble_features, build_graph
from vgnn.inference import (
    MetricReport,
    coverage,
    load_localization,
    predict,
    rrmse,
    write_prediction_csv,
)
from vgnn.model import count_parameters, init_model, load_checkpoint, save_checkpoint
from vgnn.training import train, write_history_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 2
EXIT_NUMERICAL = 3
EXIT_SCHEMA = 4

# Keys whose default is None, with the type their flag parses to.
OPTIONAL_TYPES: Dict[str, Callable[[str], Any]] = {
    "seed": int,
    "n_train": int,
    "decoder_width": int,
    "preset": str,
    "dataset": str,
    "checkpoint": str,
}

FLAG_ALIASES = {"n_sims": ["--sims"]}


def setup_logging(level: str):
    """Route vgnn log records to stderr with timestamps at ``level`` (e.g. "INFO")."""
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def _parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per RunConfig key; absent flags leave the key untouched."""
    parser.add_argument("--config", type=str, help="Path to YAML configuration file")
    for key, default in RunConfig.keys().items():
        if key == "log_level":
            kind: Callable[[str], Any] = str
        elif isinstance(default, bool):
            kind = _parse_bool
        elif default is None:
            kind = OPTIONAL_TYPES[key]
        else:
            kind = type(default)
        flags = [f"--{key.replace('_', '-')}", *FLAG_ALIASES.get(key, [])]
        extra: Dict[str, Any] = {}
        if key == "preset":
            extra["choices"] = sorted(PRESETS)
        elif key == "log_level":
            extra["choices"] = ["DEBUG", "INFO", "WARNING", "ERROR"]
        parser.add_argument(
            *flags,
            dest=key,
            type=kind,
            default=argparse.SUPPRESS,
            help=f"(default: {default})",
            **extra,
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vgnn",
        description="Variational graph neural network for inverse problems on meshes",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Desk-scale plate dataset
  vgnn generate plate --grid 12 --sims 100 --seed 7 --out data/plate.json

  # Train with the plate preset hyperparameters
  vgnn train --preset plate-desk --dataset data/plate.json --seed 7 --out runs/plate

  # Predict with uncertainty on the test split
  vgnn infer --dataset data/plate.json --checkpoint runs/plate/checkpoint.json --out runs/pred

  # Finite-difference check of every gradient rule
  vgnn gradcheck
        """,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="Generate a synthetic dataset")
    generate.add_argument("kind", choices=["plate", "beam", "import"])
    _add_config_flags(generate)

    for name, help_text in (
        ("train", "Train a model on a dataset"),
        ("infer", "Predict with uncertainty and report metrics"),
        ("gradcheck", "Verify gradients by finite differences"),
    ):
        _add_config_flags(commands.add_parser(name, help=help_text))
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults and environment, then preset, then file, then flags."""
    flags = {key: value for key, value in vars(args).items() if key in RunConfig.keys()}
    config = RunConfig.from_env()
    preset = flags.pop("preset", None)
    if preset:
        config.apply_preset(preset)
    if args.config:
        config = RunConfig.from_file(args.config, base=config)
    return config.update(flags, source="command line")


def _output_dir(config: RunConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(kind: str, config: RunConfig) -> int:
    out = Path(config.out)
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"{kind}.json"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)

    if kind == "plate":
        n_train = config.n_train
        if n_train is None:
            n_train = int(round(0.8 * config.n_sims))
        plate = PlateConfig(grid=config.grid, traction=config.traction, nu=config.nu)
        dataset = generate_plate_dataset(plate, config.n_sims, config.seed, n_train=n_train)
    elif kind == "import":
        if not config.dataset:
            raise FileNotFoundError("generate import needs --dataset")
        dataset = import_external_dataset(config.dataset, n_train=config.n_train)
    else:
        dataset = generate_beam_dataset(BeamConfig(), config.seed)
        if config.n_train is not None:
            dataset = dataset.subset(range(len(dataset)), n_train=config.n_train)

    save_dataset(dataset, out)
    print(f"Wrote {len(dataset)} simulations to {out}")
    return EXIT_OK


def cmd_train(config: RunConfig) -> int:
    if not config.dataset:
        raise FileNotFoundError("train needs --dataset")
    dataset = load_dataset(config.dataset)
    out = _output_dir(config)

    config.output_dim = dataset.output_dim
    model_config = config.model_config(spatial_dim=dataset.mesh.dim)
    model = init_model(model_config, np.random.default_rng(config.seed))
    logger.info(f"Model has {count_parameters(model)} trainable parameters")

    state = train(dataset, model, config.train_config())
    save_checkpoint(state.model, out / "checkpoint.json")
    write_history_csv(state.history, out / "history.csv")
    config.save(str(out / "run_config.yaml"))
    if state.history:
        last = state.history[-1]
        print(f"Trained {last.epoch} epochs: total={last.total:.6g} nll={last.nll:.6g}")
    print(f"Wrote checkpoint and history to {out}")
    return EXIT_OK


def cmd_infer(config: RunConfig) -> int:
    if not config.dataset or not config.checkpoint:
        raise FileNotFoundError("infer needs --dataset and --checkpoint")
    dataset = load_dataset(config.dataset)
    state = load_checkpoint(config.checkpoint)
    if dataset.output_dim != state.config.output_dim:
        raise ShapeError(
            f"dataset targets have width {dataset.output_dim} but the checkpoint "
            f"predicts width {state.config.output_dim}"
        )
    out = _output_dir(config)

    rng = np.random.default_rng(config.seed)
    graph = build_graph(dataset.mesh)
    fields = []
    truths: List[np.ndarray] = []
    errors: List[float] = []
    localizations = []
    for k in dataset.indices(config.subset):
        sim = dataset.simulations[k]
        features = assemble_features(dataset.mesh, sim, graph)
        pf = predict(features, state, config.n_samples, rng, config.z)
        write_prediction_csv(out / f"pred_{k:04d}.csv", dataset.mesh.coords, pf, sim.y)
        fields.append(pf)
        truths.append(sim.y)
        if np.linalg.norm(sim.y) > 0:
            errors.append(rrmse(pf.mean, sim.y))
        if dataset.kind == "beam" and np.linalg.norm(sim.y) > 0:
            localizations.append(load_localization(pf.mean, sim.y, graph))

    extra: Dict[str, Any] = {"subset": config.subset, "n_simulations": len(fields)}
    if localizations:
        extra["localization_rate"] = float(np.mean([loc.hit for loc in localizations]))
        extra["magnitude_rate"] = float(
            np.mean([loc.hit and loc.magnitude_ok for loc in localizations])
        )
    report = MetricReport(
        rrmse=errors, coverage=coverage(fields, truths) if fields else 0.0, z=config.z, extra=extra
    )
    with open(out / "metrics.json", "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    print(
        f"Predicted {len(fields)} simulations: mean RRMSE {report.mean_rrmse:.4g}, "
        f"coverage {report.coverage:.3f}"
    )
    return EXIT_OK


def cmd_gradcheck(config: RunConfig) -> int:
    seed = DEFAULT_SEED if config.seed is None else config.seed
    results = run_gradcheck([*default_cases(seed), empty_case()])
    results += run_op_checks(seed=seed)
    summary = summarize(results)
    for result in results:
        status = "ok" if result.passed else "FAILED"
        print(f"  {result.name:<24} {result.max_error:.3e}  {status}")
    print(f"max relative error: {summary['max_error']:.3e}")
    if not summary["passed"]:
        print("Error: gradient check failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run the command and return its exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = resolve_config(args)
    except FileNotFoundError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_SCHEMA

    setup_logging(config.log_level)
    if args.command in ("generate", "train", "infer"):
        config.ensure_seed()
    logger.debug(f"Configuration: {config.to_dict()}")

    try:
        if args.command == "generate":
            return cmd_generate(args.kind, config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "infer":
            return cmd_infer(config)
        return cmd_gradcheck(config)
    except NumericalError as e:
        where = f" (epoch {e.epoch})" if e.epoch is not None else ""
        print(f"Error: numerical failure{where}: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SchemaError, ShapeError, MeshError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except KeyboardInterrupt:
        logger.info("Received interrupt signal, stopping")
        return 130


def main():
    """Main CLI entry point."""
    sys.exit(run())


if __name__ == "__main__":
    main()
