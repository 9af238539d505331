#!/usr/bin/env python3
"""
Experiment configuration: INI files, environment overrides and the config hash.

Precedence is command-line flag > environment variable > file value > default.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import itertools
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv

from errors import ConfigurationError
from feedback import MODALITIES, SimulatorParams
from mavrl import TrainConfig
from mdp import DEFAULT_GAMMA, GRID_NAMES

DEFAULT_OUTPUT_DIR = "results"
ENV_OUTPUT_DIR = "MAVRL_OUTPUT_DIR"
ENV_WORKERS = "MAVRL_WORKERS"
ENV_LOG_LEVEL = "MAVRL_LOG_LEVEL"
ENV_TORCH_THREADS = "MAVRL_TORCH_THREADS"

# four singles, six pairs and all four
TABLE_COMBINATIONS = ("P", "D", "R", "S", "PD", "PR", "PS", "DR", "DS", "RS", "PDRS")


def normalize_modalities(letters: str) -> str:
    """Canonical P, D, R, S ordering of a modality subset such as 'sd' -> 'DS'"""
    letters = letters.strip().upper()
    unknown = set(letters) - set(MODALITIES)
    if not letters or unknown:
        raise ConfigurationError(f"modalities must be a nonempty subset of {''.join(MODALITIES)}, got '{letters}'")
    return "".join(m for m in MODALITIES if m in letters)


def all_modality_subsets() -> Tuple[str, ...]:
    """The 15 nonempty modality subsets, singles first"""
    subsets = []
    for size in range(1, len(MODALITIES) + 1):
        subsets.extend("".join(combo) for combo in itertools.combinations(MODALITIES, size))
    return tuple(subsets)


@dataclass(frozen=True)
class Budget:
    """Observation counts per modality: preference pairs, demonstrations, ratings, stops"""

    preferences: int = 64
    demonstrations: int = 1
    ratings: int = 64
    stops: int = 256

    def __post_init__(self):
        if min(self.as_tuple()) < 0:
            raise ConfigurationError(f"budgets must be non-negative, got {self.as_tuple()}")

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.preferences, self.demonstrations, self.ratings, self.stops)

    def count(self, modality: str) -> int:
        return self.as_tuple()[MODALITIES.index(modality)]

    @property
    def label(self) -> str:
        return "-".join(str(n) for n in self.as_tuple())

    @classmethod
    def parse(cls, text: str) -> "Budget":
        parts = text.replace("-", ",").split(",")
        if len(parts) != 4:
            raise ConfigurationError(f"budget '{text}' must be four integers n_p,n_d,n_r,n_s")
        try:
            return cls(*(int(p) for p in parts))
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"budget '{text}' must be four integers n_p,n_d,n_r,n_s") from e


@dataclass(frozen=True)
class EvalSettings:
    robustness_levels: Tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8)
    epic: bool = True
    heatmaps: bool = False
    image: bool = False

    def __post_init__(self):
        if any(not 0.0 <= p <= 1.0 for p in self.robustness_levels):
            raise ConfigurationError(f"robustness levels must lie in [0, 1], got {self.robustness_levels}")


@dataclass(frozen=True)
class SweepAxes:
    budgets: Tuple[Budget, ...] = ()
    modalities: Tuple[str, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "trap"
    grid_size: int = 10
    gamma: float = DEFAULT_GAMMA
    modalities: str = "PDRS"
    budget: Budget = field(default_factory=Budget)
    simulator: SimulatorParams = field(default_factory=SimulatorParams)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    sweep: SweepAxes = field(default_factory=SweepAxes)
    n_seeds: int = 10
    master_seed: int = 0
    tune_weights: bool = False
    tuning_seeds: int = 3
    output_dir: str = DEFAULT_OUTPUT_DIR
    workers: int = 1

    def __post_init__(self):
        if self.env not in GRID_NAMES:
            raise ConfigurationError(f"unknown env '{self.env}', expected one of {GRID_NAMES}")
        object.__setattr__(self, "modalities", normalize_modalities(self.modalities))
        for modality in self.modalities:
            if self.budget.count(modality) == 0:
                raise ConfigurationError(f"modality {modality} is selected but its budget is 0")
        if "R" in self.modalities and self.budget.ratings < self.simulator.K:
            raise ConfigurationError(f"{self.budget.ratings} ratings cannot fill {self.simulator.K} levels")
        if self.n_seeds < 1 or self.tuning_seeds < 1:
            raise ConfigurationError("n_seeds and tuning_seeds must be at least 1")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be at least 1, got {self.workers}")

    @property
    def env_name(self) -> str:
        return f"grid_{self.env}"

    def with_cell(self, budget: Budget, modalities: str) -> "ExperimentConfig":
        return dataclasses.replace(self, budget=budget, modalities=modalities, sweep=SweepAxes())


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON of everything that changes results"""
    data = dataclasses.asdict(config)
    for key in ("output_dir", "workers"):
        data.pop(key)
    for key in ("log_every", "progress"):
        data["training"].pop(key)
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# INI loading -----------------------------------------------------------------

_EXPERIMENT_KEYS = {
    "env": str, "grid_size": int, "gamma": float, "modalities": str, "n_seeds": int,
    "seed": int, "output_dir": str, "workers": int,
}
_BUDGET_KEYS = {"preferences": int, "demonstrations": int, "ratings": int, "stops": int}
_SIMULATOR_KEYS = {
    "beta_traj": ("beta_traj", float), "beta_pref": ("beta_pref", float), "beta_demo": ("beta_demo", float),
    "segment_length": ("L", int), "rating_levels": ("K", int), "stop_c": ("c", float),
    "stop_rho": ("rho", float), "ref_percentile": ("ref_percentile", float),
    "max_steps": ("max_steps", int), "pool_size": ("pool_size", int), "pool_steps": ("pool_steps", int),
    "pool_random_start": ("pool_random_start", bool),
}
_TRAINING_KEYS = {
    "lambda_kl": float, "lambda_td": float, "batch_size": int, "learning_rate": float, "steps": int,
    "hidden": int, "weight_decay": float, "clip_norm": float, "reward_type": str, "log_every": int,
    "progress": bool, "tune_weights": bool, "tuning_seeds": int,
}
_EVALUATION_KEYS = {"robustness_levels": str, "epic": bool, "heatmaps": bool, "image": bool}
_SWEEP_KEYS = {"budgets": str, "modalities": str}
_SECTIONS = {
    "experiment": _EXPERIMENT_KEYS, "budget": _BUDGET_KEYS, "simulator": _SIMULATOR_KEYS,
    "training": _TRAINING_KEYS, "evaluation": _EVALUATION_KEYS, "sweep": _SWEEP_KEYS,
}


def _read_section(parser: configparser.ConfigParser, section: str) -> Dict[str, Any]:
    if not parser.has_section(section):
        return {}
    known = _SECTIONS[section]
    values = {}
    for key in parser.options(section):
        if key not in known:
            raise ConfigurationError(f"unknown key '{key}' in [{section}]")
        kind = known[key][1] if isinstance(known[key], tuple) else known[key]
        try:
            if kind is bool:
                values[key] = parser.getboolean(section, key)
            else:
                values[key] = kind(parser.get(section, key).strip())
        except ValueError as e:
            raise ConfigurationError(f"[{section}] {key}: {e}") from e
    return values


def _parse_modality_list(text: str) -> Tuple[str, ...]:
    text = text.strip().lower()
    if text == "all":
        return all_modality_subsets()
    if text == "table":
        return TABLE_COMBINATIONS
    return tuple(normalize_modalities(part) for part in text.split(",") if part.strip())


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigurationError(f"{source}: {e}") from e
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigurationError(f"{source}: unknown sections {sorted(unknown)}")

    experiment = _read_section(parser, "experiment")
    training = _read_section(parser, "training")
    evaluation = _read_section(parser, "evaluation")
    sweep = _read_section(parser, "sweep")
    simulator = {_SIMULATOR_KEYS[k][0]: v for k, v in _read_section(parser, "simulator").items()}

    tune_weights = training.pop("tune_weights", False)
    tuning_seeds = training.pop("tuning_seeds", 3)
    if "robustness_levels" in evaluation:
        try:
            evaluation["robustness_levels"] = tuple(
                float(p) for p in evaluation["robustness_levels"].split(",") if p.strip()
            )
        except ValueError as e:
            raise ConfigurationError(f"[evaluation] robustness_levels: {e}") from e
    axes = SweepAxes(
        budgets=tuple(Budget.parse(b) for b in sweep.get("budgets", "").split(";") if b.strip()),
        modalities=_parse_modality_list(sweep["modalities"]) if "modalities" in sweep else (),
    )

    return ExperimentConfig(
        env=experiment.get("env", "trap").removeprefix("grid_"),
        grid_size=experiment.get("grid_size", 10),
        gamma=experiment.get("gamma", DEFAULT_GAMMA),
        modalities=experiment.get("modalities", "PDRS"),
        budget=Budget(**_read_section(parser, "budget")),
        simulator=SimulatorParams(**simulator),
        training=TrainConfig(**training),
        evaluation=EvalSettings(**evaluation),
        sweep=axes,
        n_seeds=experiment.get("n_seeds", 10),
        master_seed=experiment.get("seed", 0),
        tune_weights=tune_weights,
        tuning_seeds=tuning_seeds,
        output_dir=experiment.get("output_dir", DEFAULT_OUTPUT_DIR),
        workers=experiment.get("workers", 1),
    )


def apply_overrides(config: ExperimentConfig, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Environment values first, then explicit overrides (command-line flags) on top"""
    load_dotenv()
    changes: Dict[str, Any] = {}
    if os.environ.get(ENV_OUTPUT_DIR):
        changes["output_dir"] = os.environ[ENV_OUTPUT_DIR]
    if os.environ.get(ENV_WORKERS):
        try:
            changes["workers"] = int(os.environ[ENV_WORKERS])
        except ValueError as e:
            raise ConfigurationError(f"{ENV_WORKERS} must be an integer") from e
    changes.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if changes:
        logging.debug(f"Configuration overrides: {changes}")
    try:
        return dataclasses.replace(config, **changes)
    except TypeError as e:
        raise ConfigurationError(f"unknown override: {e}") from e


def load_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigurationError(f"config file {path} not found")
    with open(path) as handle:
        config = parse_config(handle.read(), source=path)
    config = apply_overrides(config, overrides)
    logging.info(f"Loaded configuration {path} (hash {config_hash(config)[:12]})")
    return config
