"""Genetic programming loop over model genotypes."""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import PatientSeries
from .fitness import CohortFitter, FitnessConfig, FitnessReport
from .model import (
    ModelGenotype,
    StateSchema,
    iter_nodes,
    random_genotype,
    random_tree,
    replace_at,
    tree_depth,
)
from .seeds import derive_rng

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GpConfig:
    pop_gp: int = 100
    gen_gp: int = 50
    p_op: float = 0.5
    t_s: int = 3
    p_r: float = 0.1
    phi: int = 3
    d_max: int = 6
    lambda_max: int = 7
    seed: int = 0
    fitness: FitnessConfig = field(default_factory=FitnessConfig)
    max_reselect: int = 10
    init_resample: int = 20
    workers: int = 1

    def __post_init__(self):
        for name in ("p_op", "p_r"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        if self.p_r + 0.3 > 1.0 + 1e-12:
            raise ConfigError("p_r must leave room for the largest mutation probability (p_r <= 0.7)")
        if self.t_s < 1:
            raise ConfigError("tournament size t_s must be >= 1")
        if self.pop_gp < 2:
            raise ConfigError("pop_gp must be >= 2")
        if self.gen_gp < 0:
            raise ConfigError("gen_gp must be >= 0")
        if self.phi < 1 or self.d_max < 1 or self.lambda_max < 1:
            raise ConfigError("phi, d_max and lambda_max must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GenerationRecord:
    generation: int
    best: float
    median: float
    p25: float
    p75: float
    best_id: str
    evaluated: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvolutionResult:
    best: ModelGenotype
    report: FitnessReport
    trace: list[GenerationRecord]


def genotype_id(genotype: ModelGenotype) -> str:
    return hashlib.sha256(genotype.key().encode()).hexdigest()[:12]


# -- variation -----------------------------------------------------------------


def mutation_probability(f: float, f_max: float) -> float:
    """``0.1 + 0.2 * (1 - f / f_max)``: fitter parents mutate less."""
    if f_max <= 0:
        return 0.3
    ratio = min(max(f / f_max, 0.0), 1.0)
    # same as 0.1 + 0.2 * (1 - ratio), but exact at ratio 0, 0.5 and 1
    return (1.0 + 2.0 * (1.0 - ratio)) / 10.0


def tournament_select(fitness: Sequence[float], t_s: int, rng: np.random.Generator) -> int:
    """Index of the fittest of ``t_s`` members drawn with replacement; ties broken at random."""
    if len(fitness) == 0:
        raise ValueError("empty population")
    picks = rng.integers(len(fitness), size=t_s)
    scores = np.asarray(fitness, dtype=float)[picks]
    winners = picks[scores == scores.max()]
    if len(winners) == 1:
        return int(winners[0])
    return int(winners[rng.integers(len(winners))])


def mutate(genotype: ModelGenotype, config: GpConfig, rng: np.random.Generator) -> ModelGenotype:
    """Replace one uniformly chosen node of one uniformly chosen tree by a fresh random subtree."""
    i = int(rng.integers(genotype.m))
    tree = genotype.trees[i]
    nodes = list(iter_nodes(tree))
    path, _ = nodes[rng.integers(len(nodes))]
    budget = max(config.d_max - len(path), 1)
    new = random_tree(budget, genotype.m, config.p_op, rng, genotype.lambda_max)
    trees = list(genotype.trees)
    trees[i] = replace_at(tree, path, new)
    return ModelGenotype(tuple(trees), genotype.state_names, genotype.lambda_max)


def merge_trees(a, b, rng: np.random.Generator):
    """Graft a random subtree of ``b`` onto a random point of ``a``."""
    pa, _ = _random_node(a, rng)
    _, sub = _random_node(b, rng)
    return replace_at(a, pa, sub)


def _random_node(tree, rng):
    nodes = list(iter_nodes(tree))
    return nodes[rng.integers(len(nodes))]


def crossover(
    parent_a: ModelGenotype,
    parent_b: ModelGenotype,
    config: GpConfig,
    rng: np.random.Generator,
) -> ModelGenotype | None:
    """Vector-level or tree-level crossover with equal probability.

    Vector level takes each position's tree from either parent. Tree level
    merges the two trees at every position, retrying a merge up to ``phi``
    times when it exceeds ``d_max``. Returns ``None`` when a merge never fits.
    """
    if parent_a.state_names != parent_b.state_names:
        raise ValueError("parents are built over different schemas")
    if rng.random() < 0.5:
        pick = rng.random(parent_a.m) < 0.5
        trees = tuple(b if take_b else a for a, b, take_b in zip(parent_a.trees, parent_b.trees, pick))
    else:
        trees = []
        for a, b in zip(parent_a.trees, parent_b.trees):
            for _ in range(config.phi):
                child = merge_trees(a, b, rng)
                if tree_depth(child) <= config.d_max:
                    trees.append(child)
                    break
            else:
                return None
    return ModelGenotype(tuple(trees), parent_a.state_names, parent_a.lambda_max)


# -- fitness evaluation ----------------------------------------------------------

_worker_fitter: CohortFitter | None = None


def _init_worker(cohort, targets, fitness_config):
    global _worker_fitter
    _worker_fitter = CohortFitter(cohort, targets, fitness_config)


def _worker_evaluate(args):
    genotype, seed = args
    return _worker_fitter.evaluate(genotype, seed)


class FitnessCache:
    """Fitness per genotype structure; a genotype is evaluated at most once per run."""

    def __init__(
        self,
        cohort: Sequence[PatientSeries],
        targets: Sequence[int],
        config: FitnessConfig,
        seed: int,
        workers: int = 1,
    ):
        self.fitter = CohortFitter(cohort, targets, config)
        self.seed = seed
        self.reports: dict[str, FitnessReport] = {}
        self._pool = None
        if workers > 1:
            self._pool = ProcessPoolExecutor(
                workers,
                initializer=_init_worker,
                initargs=(list(cohort), tuple(targets), config),
            )

    def evaluate(self, genotypes: Sequence[ModelGenotype]) -> tuple[list[FitnessReport], int]:
        pending: dict[str, ModelGenotype] = {}
        for g in genotypes:
            key = g.key()
            if key not in self.reports and key not in pending:
                pending[key] = g
        if pending:
            todo = list(pending.values())
            if self._pool is not None:
                reports = list(self._pool.map(_worker_evaluate, [(g, self.seed) for g in todo]))
            else:
                reports = [self.fitter.evaluate(g, self.seed) for g in todo]
            self.reports.update(zip(pending, reports))
        return [self.reports[g.key()] for g in genotypes], len(pending)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


# -- main loop -------------------------------------------------------------------


def initial_population(schema: StateSchema, config: GpConfig) -> list[ModelGenotype]:
    rng = derive_rng(config.seed, "init")
    population: list[ModelGenotype] = []
    seen: set[str] = set()
    for _ in range(config.pop_gp):
        for _attempt in range(config.init_resample + 1):
            g = random_genotype(schema, config.d_max, config.p_op, rng, config.lambda_max)
            if g.key() not in seen:
                break
        seen.add(g.key())
        population.append(g)
    return population


def _make_child(population, fitness, config: GpConfig, rng) -> ModelGenotype:
    f_max = max(fitness)
    first = tournament_select(fitness, config.t_s, rng)
    u = rng.random()
    if u < config.p_r:
        return population[first]
    if u < config.p_r + mutation_probability(fitness[first], f_max):
        return mutate(population[first], config, rng)
    for _ in range(config.max_reselect):
        second = tournament_select(fitness, config.t_s, rng)
        child = crossover(population[first], population[second], config, rng)
        if child is not None:
            return child
        first = tournament_select(fitness, config.t_s, rng)
    return population[first]


def _record(generation, population, fitness, evaluated) -> GenerationRecord:
    f = np.asarray(fitness)
    best = int(np.argmax(f))
    return GenerationRecord(
        generation=generation,
        best=float(f[best]),
        median=float(np.median(f)),
        p25=float(np.percentile(f, 25)),
        p75=float(np.percentile(f, 75)),
        best_id=genotype_id(population[best]),
        evaluated=evaluated,
    )


def evolve(
    config: GpConfig,
    cohort: Sequence[PatientSeries],
    schema: StateSchema,
    on_generation: Callable[[GenerationRecord], None] | None = None,
) -> EvolutionResult:
    """Evolve genotypes for ``schema`` on the cohort's training and validation segments.

    Slot ``s`` of generation ``g`` draws from a generator seeded by
    (seed, g, s) and fitness seeds depend only on the genotype, so a run is
    reproducible from ``config.seed`` regardless of ``workers``.
    """
    if not cohort:
        raise ValueError("cohort is empty")
    if any(p.values.shape[1] != schema.m for p in cohort):
        raise ValueError("cohort width does not match the schema")
    targets = schema.target_indices
    cache = FitnessCache(cohort, targets, config.fitness, config.seed, config.workers)
    trace: list[GenerationRecord] = []
    try:
        population = initial_population(schema, config)
        reports, evaluated = cache.evaluate(population)
        fitness = [r.total for r in reports]
        trace.append(_record(0, population, fitness, evaluated))
        _report_progress(trace[-1], on_generation)
        for gen in range(1, config.gen_gp + 1):
            elite = int(np.argmax(fitness))
            children = [population[elite]]
            for slot in range(1, config.pop_gp):
                rng = derive_rng(config.seed, "gen", gen, slot)
                children.append(_make_child(population, fitness, config, rng))
            population = children
            reports, evaluated = cache.evaluate(population)
            fitness = [r.total for r in reports]
            trace.append(_record(gen, population, fitness, evaluated))
            _report_progress(trace[-1], on_generation)
    finally:
        cache.close()
    best = int(np.argmax(fitness))
    return EvolutionResult(population[best], reports[best], trace)


def _report_progress(record: GenerationRecord, callback) -> None:
    log.info(
        "generation %d: best %.4f median %.4f (%d new evaluations)",
        record.generation,
        record.best,
        record.median,
        record.evaluated,
    )
    if callback is not None:
        callback(record)
