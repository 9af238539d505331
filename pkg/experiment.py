#!/usr/bin/env python3
"""
Experiment orchestration: seeding, feedback simulation, training, evaluation
and sweeps over feedback budgets and modality combinations.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy
import torch

from config import ENV_TORCH_THREADS, Budget, ExperimentConfig, config_hash
from database import RunDatabase
from errors import ConfigurationError
from evaluation import (
    REPORT_COLUMNS,
    EvalReport,
    FixedPolicy,
    InferredReward,
    behavioral_cloning,
    epic_distance,
    evaluate_policy,
    export_heatmap,
    extract_inferred_reward,
    plan_on_inferred,
    robustness_sweep,
)
from feedback import (
    FeedbackDataset,
    calibrate_stop_sensitivity,
    collect_trajectories,
    sample_segments,
    simulate_demonstrations,
    simulate_preferences,
    simulate_ratings,
    simulate_stops,
)
from mavrl import MavrlModel, TrainConfig, train
from mdp import QTable, TabularMdp, build_grid_env, render_layout, value_iteration
from storage import read_csv_exact, write_csv_atomic, write_text_atomic

# fixed stream ids: adding a modality never shifts the random numbers of another
COMPONENTS = {"pool": 0, "preference": 1, "demonstration": 2, "rating": 3, "stop": 4, "train": 5}
TUNING_SEED_OFFSET = 10_000
LOSS_WEIGHT_CANDIDATES = (0.5, 1.0)
REPORT_FILE = "report.csv"
MANIFEST_FILE = "manifest.json"
COMBINED_FILE = "combined.csv"
LEDGER_FILE = "runs.db"
IMITATION_LABEL = "imitation"


def limit_torch_threads() -> int:
    """Torch intra-op threads from MAVRL_TORCH_THREADS, default 1"""
    value = os.environ.get(ENV_TORCH_THREADS, "1")
    try:
        threads = int(value)
    except ValueError:
        raise ConfigurationError(f"{ENV_TORCH_THREADS} must be an integer, got '{value}'")
    if threads < 1:
        raise ConfigurationError(f"{ENV_TORCH_THREADS} must be positive, got {threads}")
    torch.set_num_threads(threads)
    return threads


def derive_seed(master_seed: int, seed_index: int, component: str) -> int:
    sequence = np.random.SeedSequence(master_seed, spawn_key=(seed_index, COMPONENTS[component]))
    return int(sequence.generate_state(1)[0])


def component_rng(master_seed: int, seed_index: int, component: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, seed_index, component))


@dataclass
class SimulatedFeedback:
    dataset: FeedbackDataset
    stop_lambda: float
    rating_cutpoints: Optional[np.ndarray] = None


def build_environment(config: ExperimentConfig) -> Tuple[TabularMdp, QTable]:
    mdp = build_grid_env(config.env, config.grid_size, config.gamma)
    return mdp, value_iteration(mdp)


def simulate_feedback(mdp: TabularMdp, q: QTable, config: ExperimentConfig, seed_index: int) -> SimulatedFeedback:
    """Simulate the selected modalities for one seed, all cut from one shared trajectory pool"""
    sim = config.simulator
    budget = config.budget
    master = config.master_seed

    pool = collect_trajectories(
        mdp,
        q,
        sim.beta_traj,
        sim.pool_size,
        sim.pool_steps,
        component_rng(master, seed_index, "pool"),
        random_start=sim.pool_random_start,
    )
    dataset = FeedbackDataset(
        n_states=mdp.n_states,
        n_actions=mdp.n_actions,
        trajectories={t.traj_id: t for t in pool},
        rating_levels=sim.K,
    )
    stop_lambda = config.training.stop_lambda
    cutpoints = None

    if "P" in config.modalities:
        rng = component_rng(master, seed_index, "preference")
        segments = sample_segments(pool, sim.L, 2 * budget.preferences, rng)
        dataset.preferences = simulate_preferences(segments, mdp.reward, sim.beta_pref, budget.preferences, rng)
    if "D" in config.modalities:
        rng = component_rng(master, seed_index, "demonstration")
        dataset.demonstrations = simulate_demonstrations(
            mdp, q, sim.beta_demo, budget.demonstrations, sim.max_steps, rng
        )
    if "R" in config.modalities:
        rng = component_rng(master, seed_index, "rating")
        segments = sample_segments(pool, sim.L, budget.ratings, rng)
        dataset.ratings, cutpoints = simulate_ratings(segments, mdp.reward, sim.K)
    if "S" in config.modalities:
        rng = component_rng(master, seed_index, "stop")
        segments = sample_segments(pool, sim.L, budget.stops, rng)
        stop_lambda = calibrate_stop_sensitivity(segments, q, sim)
        dataset.stops = simulate_stops(segments, q, sim, rng, lam=stop_lambda)

    logging.info(f"Seed {seed_index}: simulated {dataset.counts()} on {mdp.name} (stop lambda {stop_lambda:.4f})")
    return SimulatedFeedback(dataset=dataset, stop_lambda=stop_lambda, rating_cutpoints=cutpoints)


def stop_lambda_for(dataset: FeedbackDataset, q: QTable, config: ExperimentConfig) -> float:
    """Recover the simulator's stop sensitivity from a saved dataset's stop segments"""
    if not dataset.stops:
        return config.training.stop_lambda
    return calibrate_stop_sensitivity([obs.segment for obs in dataset.stops], q, config.simulator)


def train_config_for(config: ExperimentConfig, stop_lambda: float, seed: int, **overrides) -> TrainConfig:
    """Training uses the simulator's temperatures and stop parameters"""
    sim = config.simulator
    return dataclasses.replace(
        config.training,
        gamma=config.gamma,
        beta_pref=sim.beta_pref,
        beta_demo=sim.beta_demo,
        stop_lambda=stop_lambda,
        stop_rho=sim.rho,
        seed=seed,
        **overrides,
    )


@dataclass
class SeedResult:
    seed: int
    inferred: InferredReward
    raw_return: float
    normalized_return: float
    epic: Optional[float]
    model: MavrlModel
    imitation: Optional[FixedPolicy] = None


def evaluate_model(model: MavrlModel, mdp: TabularMdp, with_epic: bool = True) -> Tuple[InferredReward, float, float, Optional[float]]:
    """(inferred reward, raw return, normalized return, EPIC to the true reward)"""
    inferred = extract_inferred_reward(model.encoder, mdp)
    raw, normalized = evaluate_policy(mdp, plan_on_inferred(mdp, inferred))
    epic = epic_distance(inferred.mean, mdp.reward, mdp) if with_epic else None
    return inferred, raw, normalized, epic


def imitation_baseline(
    config: ExperimentConfig,
    mdp: TabularMdp,
    q: QTable,
    seed_index: int,
    dataset: FeedbackDataset,
) -> Optional[FixedPolicy]:
    """Behavioral cloning on the seed's demonstrations.

    Cells without "D" but with robustness levels clone the demonstrations a
    "D" cell would have drawn from the same stream.
    """
    demos = dataset.demonstrations
    if not demos and config.evaluation.robustness_levels and config.budget.demonstrations > 0:
        sim = config.simulator
        demos = simulate_demonstrations(
            mdp,
            q,
            sim.beta_demo,
            config.budget.demonstrations,
            sim.max_steps,
            component_rng(config.master_seed, seed_index, "demonstration"),
        )
    if not demos:
        return None
    return FixedPolicy(behavioral_cloning(demos, mdp), label=IMITATION_LABEL)


def imitation_report(results: Sequence[SeedResult], mdp: TabularMdp, levels: Sequence[float]) -> Optional[EvalReport]:
    policies = [r.imitation for r in results]
    if not policies or any(p is None for p in policies):
        return None
    evaluated = [evaluate_policy(mdp, p.policy) for p in policies]
    report = EvalReport(
        normalized_returns=[normalized for _, normalized in evaluated],
        raw_returns=[raw for raw, _ in evaluated],
        epics=[],
    )
    if levels:
        report.robustness = robustness_sweep(policies, mdp, levels)
    return report


def run_seed(
    config: ExperimentConfig,
    mdp: TabularMdp,
    q: QTable,
    seed_index: int,
    loss_weights: Optional[Tuple[float, float]] = None,
) -> SeedResult:
    simulated = simulate_feedback(mdp, q, config, seed_index)
    seed = derive_seed(config.master_seed, seed_index, "train")
    overrides = {}
    if loss_weights is not None:
        overrides = {"lambda_kl": loss_weights[0], "lambda_td": loss_weights[1]}
    model = train(simulated.dataset, train_config_for(config, simulated.stop_lambda, seed, **overrides), mdp=mdp)
    inferred, raw, normalized, epic = evaluate_model(model, mdp, config.evaluation.epic)
    logging.info(f"Seed {seed_index}: normalized return {normalized:.2f}" + (f", EPIC {epic:.4f}" if epic is not None else ""))
    return SeedResult(
        seed=seed,
        inferred=inferred,
        raw_return=raw,
        normalized_return=normalized,
        epic=epic,
        model=model,
        imitation=imitation_baseline(config, mdp, q, seed_index, simulated.dataset),
    )


def select_loss_weights(
    config: ExperimentConfig,
    mdp: TabularMdp,
    q: QTable,
    candidates: Sequence[float] = LOSS_WEIGHT_CANDIDATES,
) -> Tuple[Tuple[float, float], Dict[str, float]]:
    """Pick (lambda_kl, lambda_td) by mean normalized return on tuning seeds disjoint from the evaluation seeds"""
    scores: Dict[str, float] = {}
    best: Optional[Tuple[float, float]] = None
    for lambda_kl in candidates:
        for lambda_td in candidates:
            returns = [
                run_seed(config, mdp, q, TUNING_SEED_OFFSET + i, (lambda_kl, lambda_td)).normalized_return
                for i in range(config.tuning_seeds)
            ]
            score = float(np.mean(returns))
            scores[f"{lambda_kl},{lambda_td}"] = score
            if best is None or score > scores[f"{best[0]},{best[1]}"]:
                best = (lambda_kl, lambda_td)
    logging.info(f"Selected loss weights lambda_kl={best[0]}, lambda_td={best[1]} from {scores}")
    return best, scores


def _versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
        "pandas": pd.__version__,
    }


def run_experiment(config: ExperimentConfig, output_dir: Optional[str] = None) -> EvalReport:
    """Simulate, train and evaluate every seed; writes report.csv and manifest.json"""
    output_dir = output_dir or config.output_dir
    os.makedirs(output_dir, exist_ok=True)
    mdp, q = build_environment(config)

    loss_weights = (config.training.lambda_kl, config.training.lambda_td)
    tuning_scores = None
    if config.tune_weights:
        loss_weights, tuning_scores = select_loss_weights(config, mdp, q)

    results: List[SeedResult] = []
    for seed_index in range(config.n_seeds):
        result = run_seed(config, mdp, q, seed_index, loss_weights)
        results.append(result)
        if config.evaluation.heatmaps:
            export_heatmap(
                result.inferred,
                config.grid_size,
                os.path.join(output_dir, f"seed_{seed_index}"),
                image=config.evaluation.image,
                layout=render_layout(mdp),
            )

    report = EvalReport(
        normalized_returns=[r.normalized_return for r in results],
        raw_returns=[r.raw_return for r in results],
        epics=[r.epic for r in results if r.epic is not None],
    )
    if config.evaluation.robustness_levels:
        report.robustness = robustness_sweep([r.inferred for r in results], mdp, config.evaluation.robustness_levels)

    rows = report.to_rows(mdp.name, config.budget.label, config.modalities, range(config.n_seeds))
    baseline = imitation_report(results, mdp, config.evaluation.robustness_levels)
    if baseline is not None:
        rows += baseline.to_rows(mdp.name, config.budget.label, IMITATION_LABEL, range(config.n_seeds))
        logging.info(f"{mdp.name} {IMITATION_LABEL} {config.budget.label}: normalized return {baseline.normalized_return:.2f}")
    write_csv_atomic(pd.DataFrame(rows, columns=list(REPORT_COLUMNS)), os.path.join(output_dir, REPORT_FILE))

    manifest = {
        "config_hash": config_hash(config),
        "env": mdp.name,
        "budget": config.budget.label,
        "modalities": config.modalities,
        "master_seed": config.master_seed,
        "train_seeds": [r.seed for r in results],
        "loss_weights": {"lambda_kl": loss_weights[0], "lambda_td": loss_weights[1]},
        "tuning_scores": tuning_scores,
        "versions": _versions(),
        "created_at": datetime.now().isoformat(),
    }
    write_text_atomic(os.path.join(output_dir, MANIFEST_FILE), json.dumps(manifest, indent=2) + "\n")
    logging.info(
        f"{mdp.name} {config.modalities} {config.budget.label}: normalized return "
        f"{report.normalized_return:.2f} over {config.n_seeds} seeds"
    )
    return report


def cell_name(budget: Budget, modalities: str) -> str:
    return f"{budget.label}_{modalities}"


def _run_cell(config: ExperimentConfig, output_dir: str) -> Optional[str]:
    """Worker entry point; returns an error message instead of raising"""
    try:
        limit_torch_threads()
        run_experiment(config, output_dir)
        return None
    except Exception as e:
        logging.error(f"Cell in {output_dir} failed: {e}")
        return f"{type(e).__name__}: {e}"


@dataclass
class SweepResult:
    combined: pd.DataFrame
    completed: List[str]
    skipped: List[str]
    failed: Dict[str, str]

    @property
    def ok(self) -> bool:
        return not self.failed


def run_sweep(config: ExperimentConfig, output_dir: Optional[str] = None, workers: Optional[int] = None) -> SweepResult:
    """Every (budget, modality subset) cell as an independent experiment.

    Cells already finished under the same configuration hash are skipped;
    failures are recorded in the ledger and the sweep carries on.
    """
    output_dir = output_dir or config.output_dir
    workers = workers or config.workers
    os.makedirs(output_dir, exist_ok=True)
    ledger = RunDatabase(os.path.join(output_dir, LEDGER_FILE))

    budgets = config.sweep.budgets or (config.budget,)
    subsets = config.sweep.modalities or (config.modalities,)
    cells: List[Tuple[str, Optional[ExperimentConfig], str]] = []
    failed: Dict[str, str] = {}
    for budget in budgets:
        for modalities in subsets:
            name = cell_name(budget, modalities)
            try:
                cells.append((name, config.with_cell(budget, modalities), os.path.join(output_dir, "cells", name)))
            except ConfigurationError as e:
                failed[name] = str(e)
                logging.error(f"Sweep cell {name} has an invalid configuration: {e}")

    pending, skipped = [], []
    for name, cell_config, cell_dir in cells:
        if ledger.is_done(name, config_hash(cell_config)) and os.path.exists(os.path.join(cell_dir, REPORT_FILE)):
            skipped.append(name)
        else:
            pending.append((name, cell_config, cell_dir))
    logging.info(f"Sweep: {len(cells)} cells, {len(skipped)} already done, {len(pending)} to run with {workers} workers")

    completed = []

    def record(name: str, cell_config: ExperimentConfig, error: Optional[str]):
        if error is None:
            ledger.finish_run(name, {"modalities": cell_config.modalities, "budget": cell_config.budget.label})
            completed.append(name)
        else:
            ledger.fail_run(name, error)
            failed[name] = error

    for name, cell_config, cell_dir in pending:
        ledger.start_run(name, config_hash(cell_config), cell_dir)
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(name, cell_config, pool.submit(_run_cell, cell_config, cell_dir)) for name, cell_config, cell_dir in pending]
            for name, cell_config, future in futures:
                try:
                    error = future.result()
                except Exception as e:
                    error = f"{type(e).__name__}: {e}"
                record(name, cell_config, error)
    else:
        for name, cell_config, cell_dir in pending:
            record(name, cell_config, _run_cell(cell_config, cell_dir))

    frames = [
        read_csv_exact(os.path.join(cell_dir, REPORT_FILE), dtype={"seed": str, "budget": str})
        for name, _, cell_dir in cells
        if name not in failed
    ]
    combined = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=list(REPORT_COLUMNS))
    write_csv_atomic(combined, os.path.join(output_dir, COMBINED_FILE))
    logging.info(f"Sweep finished: {len(completed)} run, {len(skipped)} skipped, {len(failed)} failed")
    return SweepResult(combined=combined, completed=completed, skipped=skipped, failed=failed)


def pivot_budget_table(combined: pd.DataFrame, metric: str = "normalized_return", statistic: str = "mean") -> pd.DataFrame:
    """Budget x modality-combination table of one aggregate statistic"""
    rows = combined[(combined["metric"] == metric) & (combined["seed"].astype(str) == statistic)]
    return rows.pivot_table(index="budget", columns="modalities", values="value", aggfunc="first", sort=False)
