"""Test-set evaluation: per-patient fitting, RMSE tables, baselines and rank-sum tests."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PatientSeries
from .fitness import CohortFitter, FitnessConfig
from .model import ModelGenotype, StateSchema
from .moo import ParetoFront
from .simulator import ForecastSpec, ModelInstance, SegmentTooShortError, rolling_forecast

RMSE_HEADER = ["algorithm", "sample", "target", "horizon", "median_rmse", "n_patients"]
COMPARISON_HEADER = [
    "algorithm_a",
    "algorithm_b",
    "sample",
    "target",
    "horizon",
    "statistic",
    "p_value",
]


# -- instance selection and scoring ----------------------------------------------


def select_member(validation_errors) -> int:
    """Index of the member with the smallest summed validation error (first on ties)."""
    sums = np.asarray(validation_errors, dtype=float).reshape(len(validation_errors), -1).sum(axis=1)
    if len(sums) == 0:
        raise ValueError("empty front")
    return int(np.argmin(sums))


def select_instance(
    genotype: ModelGenotype,
    fronts: ParetoFront | Sequence[ParetoFront],
    validation_errors,
    bounds=None,
) -> ModelInstance:
    """Front member minimizing the summed validation error, as a model instance.

    Several fronts (repeat runs) are pooled in order.
    """
    if isinstance(fronts, ParetoFront):
        fronts, validation_errors = [fronts], [validation_errors]
    params = np.vstack([f.params for f in fronts])
    errors = np.vstack([np.asarray(v, dtype=float) for v in validation_errors])
    best = select_member(errors)
    member_bounds = None if bounds is None else [tuple(bounds)] * genotype.k
    return ModelInstance(genotype, tuple(params[best]), member_bounds)


def rmse(predicted: np.ndarray, observed: np.ndarray) -> float:
    err = np.asarray(predicted, dtype=float) - np.asarray(observed, dtype=float)
    return float(np.sqrt(np.mean(err * err)))


def test_rmse(
    instance: ModelInstance,
    segment: np.ndarray,
    targets: Sequence[int],
    horizons: Sequence[int] = (1, 2, 3),
    clamp_states: bool = True,
) -> dict[tuple[int, int], float]:
    """Rolling-origin RMSE per (target, horizon) inside ``segment``."""
    segment = np.asarray(segment, dtype=float)
    out = {}
    for h in horizons:
        pred = rolling_forecast(instance, segment, h, clamp_states)
        for target in targets:
            out[(target, h)] = rmse(pred[:, target], segment[h:, target])
    return out


def persistence_forecast(series: np.ndarray, horizon: int) -> np.ndarray:
    """Predictions for days ``horizon..T-1``: each equals the observation ``horizon`` days earlier."""
    series = np.asarray(series, dtype=float)
    if horizon < 1 or horizon >= len(series):
        raise SegmentTooShortError(f"horizon {horizon} needs a series longer than {horizon} days")
    return series[: len(series) - horizon].copy()


def persistence_rmse(
    segment: np.ndarray, targets: Sequence[int], horizons: Sequence[int] = (1, 2, 3)
) -> dict[tuple[int, int], float]:
    segment = np.asarray(segment, dtype=float)
    return {
        (target, h): rmse(persistence_forecast(segment[:, target], h), segment[h:, target])
        for h in horizons
        for target in targets
    }


def ar1_rmse(
    history: np.ndarray,
    segment: np.ndarray,
    targets: Sequence[int],
    horizons: Sequence[int] = (1, 2, 3),
) -> dict[tuple[int, int], float]:
    """Lag-1 linear autoregression per target, least squares on ``history``, iterated ``h`` steps."""
    history = np.asarray(history, dtype=float)
    segment = np.asarray(segment, dtype=float)
    out = {}
    for target in targets:
        x, y = history[:-1, target], history[1:, target]
        design = np.column_stack([np.ones_like(x), x])
        (a, b), *_ = np.linalg.lstsq(design, y, rcond=None)
        for h in horizons:
            pred = persistence_forecast(segment[:, target], h)
            for _ in range(h):
                pred = np.clip(a + b * pred, 0.0, 1.0)
            out[(target, h)] = rmse(pred, segment[h:, target])
    return out


# -- tables and tests --------------------------------------------------------------


@dataclass
class RmseTable:
    """Median RMSE per (algorithm, sample, target, horizon), with the per-patient values kept."""

    raw: dict[tuple[str, str, str, int], list[float]] = field(default_factory=dict)

    @property
    def rows(self) -> dict[tuple[str, str, str, int], tuple[float, int]]:
        return {key: (median(values), len(values)) for key, values in sorted(self.raw.items())}

    def median(self, algorithm: str, sample: str, target: str, horizon: int) -> float:
        return median(self.raw[(algorithm, sample, target, horizon)])

    def write_csv(self, path: str | Path, meta: dict | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if meta is not None:
                fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
            writer = csv.writer(fh)
            writer.writerow(RMSE_HEADER)
            for (alg, sample, target, h), (value, n) in self.rows.items():
                writer.writerow([alg, sample, target, h, f"{value:.10g}", n])


def median(values: Sequence[float]) -> float:
    """Median; the mean of the two middle values for even counts."""
    if len(values) == 0:
        raise ValueError("median of an empty cell")
    return float(np.median(np.asarray(values, dtype=float)))


def median_table(per_patient: dict[tuple[str, str, str, int], Sequence[float]]) -> RmseTable:
    for key, values in per_patient.items():
        if len(values) == 0:
            raise ValueError(f"empty cell {key}")
    return RmseTable({key: list(values) for key, values in per_patient.items()})


@dataclass(frozen=True)
class RankSumResult:
    statistic: float  # Mann-Whitney U of the first sample
    p_value: float
    direction: str  # "less": first sample tends lower, "greater", or "none"
    exact: bool


def _ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_rank_sum(xs: Sequence[float], ys: Sequence[float], exact_limit: int = 12) -> RankSumResult:
    """Two-sided Wilcoxon rank-sum (Mann-Whitney) test.

    Exact p by enumerating rank assignments when the pooled size is at most
    ``exact_limit`` and there are no ties; otherwise the normal approximation
    with tie and continuity corrections.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    n1, n2 = len(x), len(y)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([x, y])
    ranks = _ranks(pooled)
    rank_sum = float(ranks[:n1].sum())
    u = rank_sum - n1 * (n1 + 1) / 2.0
    mean_u = n1 * n2 / 2.0
    direction = "less" if u < mean_u else "greater" if u > mean_u else "none"
    N = n1 + n2
    ties = len(np.unique(pooled)) < N
    if N <= exact_limit and not ties:
        observed = abs(rank_sum - n1 * (N + 1) / 2.0)
        extreme = total = 0
        for combo in itertools.combinations(range(1, N + 1), n1):
            total += 1
            if abs(sum(combo) - n1 * (N + 1) / 2.0) >= observed - 1e-9:
                extreme += 1
        return RankSumResult(u, extreme / total, direction, True)
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(counts**3 - counts)) / (N * (N - 1))
    var = n1 * n2 / 12.0 * ((N + 1) - tie_term)
    if var <= 0:
        return RankSumResult(u, 1.0, direction, False)
    z = max(abs(u - mean_u) - 0.5, 0.0) / math.sqrt(var)
    p = math.erfc(z / math.sqrt(2.0))
    return RankSumResult(u, min(p, 1.0), direction, False)


@dataclass(frozen=True)
class ComparisonResult:
    algorithm_a: str
    algorithm_b: str
    sample: str
    target: str
    horizon: int
    statistic: float
    p_value: float
    direction: str

    def to_dict(self) -> dict:
        return asdict(self)


def compare_algorithms(
    table: RmseTable, reference: str, others: Sequence[str] | None = None
) -> list[ComparisonResult]:
    """Rank-sum test of ``reference`` against every other algorithm in every shared cell."""
    algorithms = sorted({key[0] for key in table.raw})
    others = [a for a in (others or algorithms) if a != reference]
    results = []
    for (alg, sample, target, h), values in sorted(table.raw.items()):
        if alg != reference:
            continue
        for other in others:
            cell = table.raw.get((other, sample, target, h))
            if not cell:
                continue
            test = wilcoxon_rank_sum(values, cell)
            results.append(
                ComparisonResult(reference, other, sample, target, h, test.statistic, test.p_value, test.direction)
            )
    return results


def write_comparisons_csv(
    path: str | Path, comparisons: Sequence[ComparisonResult], meta: dict | None = None
) -> None:
    with open(path, "w", newline="") as fh:
        if meta is not None:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(COMPARISON_HEADER)
        for c in comparisons:
            writer.writerow(
                [c.algorithm_a, c.algorithm_b, c.sample, c.target, c.horizon, f"{c.statistic:.10g}", f"{c.p_value:.10g}"]
            )


# -- cohort evaluation ----------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    horizons: tuple[int, ...] = (1, 2, 3)
    nsga_pop: int = 20
    nsga_gen: int = 50
    repeats: int = 1
    param_bounds: tuple[float, float] = (0.0, 1.0)
    clamp_states: bool = True
    clamp_error: bool = True
    baselines: tuple[str, ...] = ("persistence",)
    label: str = "model"

    def fitness_config(self) -> FitnessConfig:
        return FitnessConfig(
            r_max=self.repeats,
            nsga_pop=self.nsga_pop,
            nsga_gen=self.nsga_gen,
            param_bounds=self.param_bounds,
            forecast=ForecastSpec(self.horizons, self.clamp_states, self.clamp_error),
        )


@dataclass
class PatientEvaluation:
    patient_id: str
    sample: str
    params: list[float]
    rmse: dict[str, dict[str, dict[int, float]]]  # algorithm -> target -> horizon -> value

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "sample": self.sample,
            "params": self.params,
            "rmse": {
                alg: {t: {str(h): v for h, v in hs.items()} for t, hs in by_target.items()}
                for alg, by_target in self.rmse.items()
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PatientEvaluation":
        rmse = {
            alg: {t: {int(h): float(v) for h, v in hs.items()} for t, hs in by_target.items()}
            for alg, by_target in data["rmse"].items()
        }
        return cls(data["patient_id"], data["sample"], list(data.get("params", [])), rmse)


@dataclass
class CohortEvaluation:
    table: RmseTable
    comparisons: list[ComparisonResult]
    patients: list[PatientEvaluation]


def table_from_patients(patients: Sequence[PatientEvaluation]) -> RmseTable:
    raw: dict[tuple[str, str, str, int], list[float]] = {}
    for p in patients:
        for alg, by_target in p.rmse.items():
            for target, by_h in by_target.items():
                for h, value in by_h.items():
                    raw.setdefault((alg, p.sample, target, h), []).append(value)
    return median_table(raw)


def evaluate_patients(
    genotype: ModelGenotype,
    patients: Sequence[PatientSeries],
    schema: StateSchema,
    sample: str,
    config: EvalConfig = EvalConfig(),
    seed: int = 0,
) -> list[PatientEvaluation]:
    """Fit on training, select on validation, score on test, for each patient."""
    if not patients:
        return []
    targets = schema.target_indices
    names = schema.names
    fits = CohortFitter(patients, targets, config.fitness_config()).fit(genotype, seed)
    out = []
    for patient, fit in zip(patients, fits):
        instance = select_instance(genotype, fit.runs, fit.validation_errors)
        scores = {config.label: test_rmse(instance, patient.test, targets, config.horizons, config.clamp_states)}
        if "persistence" in config.baselines:
            scores["persistence"] = persistence_rmse(patient.test, targets, config.horizons)
        if "ar1" in config.baselines:
            history = patient.values[: patient.split[1]]
            scores["ar1"] = ar1_rmse(history, patient.test, targets, config.horizons)
        rmse = {
            alg: {names[t]: {h: by_key[(t, h)] for h in config.horizons} for t in targets}
            for alg, by_key in scores.items()
        }
        out.append(PatientEvaluation(patient.patient_id, sample, list(instance.params), rmse))
    return out


def evaluate_cohort(
    genotype: ModelGenotype,
    in_cohort: Sequence[PatientSeries],
    schema: StateSchema,
    out_cohort: Sequence[PatientSeries] = (),
    config: EvalConfig = EvalConfig(),
    seed: int = 0,
) -> CohortEvaluation:
    patients = evaluate_patients(genotype, in_cohort, schema, "in", config, seed)
    patients += evaluate_patients(genotype, out_cohort, schema, "out", config, seed)
    table = table_from_patients(patients)
    return CohortEvaluation(table, compare_algorithms(table, config.label), patients)
