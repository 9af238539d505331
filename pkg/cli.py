#!/usr/bin/env python3
"""
Command-line verbs: simulate, train, eval, sweep, heatmap and run.

Exit code 0 when everything requested succeeded, 1 on a failed run or cell,
2 for invalid arguments or configuration.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

import pandas as pd
from dotenv import load_dotenv

from config import ENV_LOG_LEVEL, ExperimentConfig, load_config
from errors import ConfigurationError, MavrlError
from evaluation import REPORT_COLUMNS, EvalReport, export_heatmap, robustness_sweep
from experiment import (
    REPORT_FILE,
    build_environment,
    derive_seed,
    evaluate_model,
    limit_torch_threads,
    run_experiment,
    run_sweep,
    simulate_feedback,
    stop_lambda_for,
    train_config_for,
)
from feedback import load_dataset, save_dataset
from mavrl import MavrlModel, train
from mdp import render_layout
from storage import write_csv_atomic

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _load(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {
        "output_dir": getattr(args, "output", None),
        "master_seed": getattr(args, "seed", None),
        "workers": getattr(args, "workers", None),
    }
    return load_config(args.config, overrides)


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _load(args)
    mdp, q = build_environment(config)
    for seed_index in range(config.n_seeds):
        simulated = simulate_feedback(mdp, q, config, seed_index)
        save_dataset(simulated.dataset, os.path.join(config.output_dir, f"feedback_seed{seed_index}.txt"))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _load(args)
    dataset = load_dataset(args.dataset)
    mdp, q = build_environment(config)
    seed = derive_seed(config.master_seed, 0, "train")
    model = train(dataset, train_config_for(config, stop_lambda_for(dataset, q, config), seed), mdp=mdp)
    path = model.save(config.output_dir)
    logging.info(f"Model written to {path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load(args)
    model = MavrlModel.load(args.checkpoint)
    mdp, _ = build_environment(config)
    inferred, raw, normalized, epic = evaluate_model(model, mdp, config.evaluation.epic)
    report = EvalReport(
        normalized_returns=[normalized],
        raw_returns=[raw],
        epics=[] if epic is None else [epic],
    )
    if config.evaluation.robustness_levels:
        report.robustness = robustness_sweep([inferred], mdp, config.evaluation.robustness_levels)
    rows = report.to_rows(mdp.name, config.budget.label, config.modalities, [model.config.seed])
    write_csv_atomic(pd.DataFrame(rows, columns=list(REPORT_COLUMNS)), os.path.join(config.output_dir, REPORT_FILE))
    print(f"normalized return {normalized:.2f}" + ("" if epic is None else f", EPIC {epic:.4f}"))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _load(args)
    result = run_sweep(config)
    for name, error in result.failed.items():
        print(f"FAILED {name}: {error}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_FAILED


def cmd_heatmap(args: argparse.Namespace) -> int:
    config = _load(args)
    model = MavrlModel.load(args.checkpoint)
    mdp, _ = build_environment(config)
    inferred, _, _, _ = evaluate_model(model, mdp, with_epic=False)
    paths = export_heatmap(
        inferred,
        config.grid_size,
        config.output_dir,
        normalize=not args.no_normalize,
        image=args.image,
        layout=render_layout(mdp),
    )
    for path in paths.values():
        print(path)
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = _load(args)
    report = run_experiment(config)
    print(f"normalized return {report.normalized_return:.2f} over {config.n_seeds} seeds")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mavrl", description="Multi-modal variational reward learning on gridworlds")
    verbs = parser.add_subparsers(dest="verb", required=True)

    def verb(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        sub = verbs.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="INI experiment configuration")
        sub.add_argument("--output", help="output directory (overrides MAVRL_OUTPUT_DIR and the file)")
        sub.set_defaults(handler=handler)
        return sub

    sub = verb("simulate", cmd_simulate, "simulate feedback datasets, one file per seed")
    sub.add_argument("--seed", type=int, help="master seed")

    sub = verb("train", cmd_train, "train a model on a saved feedback dataset")
    sub.add_argument("--dataset", required=True)
    sub.add_argument("--seed", type=int, help="master seed")

    sub = verb("eval", cmd_eval, "evaluate a checkpoint")
    sub.add_argument("--checkpoint", required=True)

    sub = verb("sweep", cmd_sweep, "run every budget x modality cell of [sweep]")
    sub.add_argument("--workers", type=int)

    sub = verb("heatmap", cmd_heatmap, "export inferred reward grids")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--no-normalize", action="store_true", help="keep raw values instead of min-max scaling")
    sub.add_argument("--image", action="store_true", help="also render heatmap.png")

    sub = verb("run", cmd_run, "simulate, train and evaluate one configuration")
    sub.add_argument("--seed", type=int, help="master seed")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(
        level=os.environ.get(ENV_LOG_LEVEL, "INFO").upper(),
        format="%(asctime)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    try:
        limit_torch_threads()
        return args.handler(args)
    except ConfigurationError as e:
        logging.error(f"Configuration error: {e}")
        return EXIT_USAGE
    except (MavrlError, OSError) as e:
        logging.error(f"{args.verb} failed: {e}")
        return EXIT_FAILED
