"""Fitness of a candidate genotype over a cohort.

Every patient gets ``r_max`` NSGA-II parameter fits on its training segment.
The resulting fronts feed four scores: descriptive (training hypervolume),
predictive (validation errors), parameter sensitivity and complexity, which
are combined by a weighted sum.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import PatientSeries
from .model import ModelGenotype
from .moo import Nsga2, ParetoFront, dominated_hypervolume
from .seeds import derive_rng
from .simulator import ForecastSpec, SegmentBatch

COMPLEXITY_MODES = ("penalizing", "literal")


@dataclass(frozen=True)
class FitnessConfig:
    r_max: int = 3
    nsga_pop: int = 5
    nsga_gen: int = 5
    weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    param_bounds: tuple[float, float] = (0.0, 1.0)
    forecast: ForecastSpec = field(default_factory=ForecastSpec)
    targets: tuple[int, ...] | None = None  # None: the schema's targets
    complexity_mode: str = "penalizing"
    corr_threshold: float = 0.35
    min_front_for_corr: int = 3

    def __post_init__(self):
        if self.complexity_mode not in COMPLEXITY_MODES:
            raise ValueError(f"complexity_mode must be one of {COMPLEXITY_MODES}")
        if len(self.weights) != 4 or any(w < 0 for w in self.weights):
            raise ValueError("need four non-negative weights")
        if self.r_max < 1 or self.nsga_pop < 1 or self.nsga_gen < 0:
            raise ValueError("r_max and nsga_pop must be >= 1, nsga_gen >= 0")
        lo, hi = self.param_bounds
        if not hi >= lo:
            raise ValueError("param_bounds must satisfy low <= high")


@dataclass
class PatientFitResult:
    patient_id: str
    runs: list[ParetoFront]
    validation_errors: list[np.ndarray]  # per run, (members, objectives)

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "runs": [f.to_dict() for f in self.runs],
            "validation_errors": [v.tolist() for v in self.validation_errors],
        }


@dataclass
class FitnessReport:
    descriptive: float
    predictive: float
    sensitivity: float
    complexity: float
    total: float
    mu_d: float
    sigma_d: float
    mu_ap: float
    sigma_ap: float
    k: int
    per_parameter_max_corr: list[float]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FitnessReport":
        return cls(**data)


class CohortFitter:
    """Per-patient parameter fitting for a fixed cohort.

    Every (patient, run) pair is an independent NSGA-II run whose generator is
    seeded from (seed, genotype, patient id, run index), so results do not
    depend on cohort composition or evaluation order. All runs advance in
    lockstep and each generation is scored in one batch.
    """

    def __init__(
        self,
        cohort: Sequence[PatientSeries],
        targets: Sequence[int],
        config: FitnessConfig = FitnessConfig(),
    ):
        self.cohort = list(cohort)
        if not self.cohort:
            raise ValueError("cohort is empty")
        self.targets = tuple(config.targets if config.targets is not None else targets)
        self.config = config
        spec = config.forecast
        self.train = SegmentBatch([p.train for p in self.cohort], self.targets, spec)
        self.validation = SegmentBatch([p.validation for p in self.cohort], self.targets, spec)

    def fit(self, genotype: ModelGenotype, seed: int = 0) -> list[PatientFitResult]:
        cfg = self.config
        B, R, P, k = len(self.cohort), cfg.r_max, cfg.nsga_pop, genotype.k
        if k == 0:
            empty = np.zeros((B, 1, 0))
            train = self.train.errors(genotype, empty)
            val = self.validation.errors(genotype, empty)
            return [
                PatientFitResult(
                    p.patient_id,
                    [ParetoFront(np.zeros((1, 0)), train[b].copy()) for _ in range(R)],
                    [val[b].copy() for _ in range(R)],
                )
                for b, p in enumerate(self.cohort)
            ]

        key = genotype.key()
        rngs = [derive_rng(seed, key, p.patient_id, r) for p in self.cohort for r in range(R)]
        algo = Nsga2(k, [cfg.param_bounds] * k, P, rngs)
        for _ in range(cfg.nsga_gen + 1):
            x = algo.ask().reshape(B, R * P, k)
            algo.tell(self.train.errors(genotype, x).reshape(B * R, P, -1))

        fronts = [[algo.front(b * R + r) for r in range(R)] for b in range(B)]
        sizes = [[len(f) for f in runs] for runs in fronts]
        width = max(sum(s) for s in sizes)
        stacked = np.zeros((B, width, k))
        for b, runs in enumerate(fronts):
            members = np.vstack([f.params for f in runs])
            stacked[b, : len(members)] = members
        val = self.validation.errors(genotype, stacked)
        results = []
        for b, (p, runs) in enumerate(zip(self.cohort, fronts)):
            offsets = np.cumsum([0] + sizes[b])
            val_errors = [val[b, offsets[r] : offsets[r + 1]].copy() for r in range(R)]
            results.append(PatientFitResult(p.patient_id, runs, val_errors))
        return results

    def evaluate(self, genotype: ModelGenotype, seed: int = 0) -> FitnessReport:
        return build_report(genotype, self.fit(genotype, seed), self.config)


def fit_patient(
    genotype: ModelGenotype,
    patient: PatientSeries,
    targets: Sequence[int],
    config: FitnessConfig = FitnessConfig(),
    seed: int = 0,
) -> PatientFitResult:
    """Fit the genotype's parameters to one patient ``r_max`` times."""
    return CohortFitter([patient], targets, config).fit(genotype, seed)[0]


def descriptive_score(results: Sequence[PatientFitResult]) -> tuple[float, float, float]:
    """``mu_d * (1 - sigma_d)`` over per-patient mean training hypervolumes."""
    per_patient = [
        float(np.mean([dominated_hypervolume(front.errors) for front in res.runs]))
        for res in results
    ]
    mu = float(np.mean(per_patient))
    sigma = float(np.std(per_patient))
    return mu * (1.0 - sigma), mu, sigma


def predictive_score(results: Sequence[PatientFitResult]) -> tuple[float, float, float]:
    """``(1 - mu_ap) * (1 - sigma_ap)`` over every pooled validation error component."""
    pooled = np.concatenate([v.ravel() for res in results for v in res.validation_errors])
    mu = float(pooled.mean())
    sigma = float(pooled.std())
    return (1.0 - mu) * (1.0 - sigma), mu, sigma


def abs_correlations(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """|Pearson r| between every column of ``x`` and of ``y``; zero-variance columns give 0."""
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    sx = np.sqrt((xc * xc).sum(axis=0))
    sy = np.sqrt((yc * yc).sum(axis=0))
    flat_x = np.ptp(x, axis=0) == 0
    flat_y = np.ptp(y, axis=0) == 0
    denom = np.outer(np.where(flat_x, 1.0, sx), np.where(flat_y, 1.0, sy))
    r = np.abs(xc.T @ yc) / denom
    r[flat_x, :] = 0.0
    r[:, flat_y] = 0.0
    return np.minimum(r, 1.0)


def sensitivity_score(
    k: int,
    results: Sequence[PatientFitResult],
    threshold: float = 0.35,
    min_front: int = 3,
) -> tuple[float, list[float]]:
    """Share of parameters whose largest |correlation| with a training error exceeds ``threshold``.

    Correlations are taken per (patient, run, objective) across front members;
    fronts smaller than ``min_front`` contribute 0. A parameter-free model scores 1.
    """
    if k == 0:
        return 1.0, []
    best = np.zeros(k)
    for res in results:
        for front in res.runs:
            if len(front) < min_front:
                continue
            best = np.maximum(best, abs_correlations(front.params, front.errors).max(axis=1))
    useful = int(np.sum(best > threshold))
    return useful / k, best.tolist()


def complexity_score(k: int, lambda_max: int, mode: str = "penalizing") -> float:
    if not 0 <= k <= lambda_max:
        raise ValueError("need 0 <= k <= lambda_max")
    if mode == "literal":
        return k / lambda_max
    if mode == "penalizing":
        return 1.0 - k / lambda_max
    raise ValueError(f"unknown complexity mode {mode!r}")


def total_fitness(
    descriptive: float,
    predictive: float,
    sensitivity: float,
    complexity: float,
    weights: Sequence[float] = (0.25, 0.25, 0.25, 0.25),
) -> float:
    w1, w2, w3, w4 = weights
    return w1 * descriptive + w2 * predictive + w3 * sensitivity + w4 * complexity


def build_report(
    genotype: ModelGenotype, results: Sequence[PatientFitResult], config: FitnessConfig
) -> FitnessReport:
    desc, mu_d, sigma_d = descriptive_score(results)
    pred, mu_ap, sigma_ap = predictive_score(results)
    sens, corr = sensitivity_score(
        genotype.k, results, config.corr_threshold, config.min_front_for_corr
    )
    comp = complexity_score(genotype.k, genotype.lambda_max, config.complexity_mode)
    return FitnessReport(
        descriptive=desc,
        predictive=pred,
        sensitivity=sens,
        complexity=comp,
        total=total_fitness(desc, pred, sens, comp, config.weights),
        mu_d=mu_d,
        sigma_d=sigma_d,
        mu_ap=mu_ap,
        sigma_ap=sigma_ap,
        k=genotype.k,
        per_parameter_max_corr=corr,
    )


def evaluate_fitness(
    genotype: ModelGenotype,
    cohort: Sequence[PatientSeries],
    targets: Sequence[int],
    config: FitnessConfig = FitnessConfig(),
    seed: int = 0,
) -> FitnessReport:
    return CohortFitter(cohort, targets, config).evaluate(genotype, seed)
