"""Genetic programming of difference-equation models for multivariate daily series."""

__version__ = "0.1.0"

from .data import Cohort, PatientSeries, load_long_csv, preprocess, split, synth_generate
from .engine import GpConfig, evolve
from .evaluation import EvalConfig, evaluate_cohort, test_rmse, wilcoxon_rank_sum
from .fitness import FitnessConfig, evaluate_fitness
from .model import ModelGenotype, StateSchema, parse, render
from .moo import dominated_hypervolume, non_dominated_sort, nsga2_run
from .simulator import ForecastSpec, ModelInstance, forecast, step

__all__ = [
    "Cohort",
    "EvalConfig",
    "FitnessConfig",
    "ForecastSpec",
    "GpConfig",
    "ModelGenotype",
    "ModelInstance",
    "PatientSeries",
    "StateSchema",
    "dominated_hypervolume",
    "evaluate_cohort",
    "evaluate_fitness",
    "evolve",
    "forecast",
    "load_long_csv",
    "non_dominated_sort",
    "nsga2_run",
    "parse",
    "preprocess",
    "render",
    "split",
    "step",
    "synth_generate",
    "test_rmse",
    "wilcoxon_rank_sum",
]
