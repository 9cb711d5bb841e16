"""Multi-objective machinery: Pareto sorting, crowding, NSGA-II and exact hypervolume.

All objectives are minimized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class ParetoFront:
    """Mutually non-dominated ``(params, errors)`` pairs stored row-wise."""

    params: np.ndarray  # (n, k)
    errors: np.ndarray  # (n, c)

    def __len__(self) -> int:
        return len(self.errors)

    @property
    def members(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.params, self.errors))

    def to_dict(self) -> dict:
        return {"params": self.params.tolist(), "errors": self.errors.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "ParetoFront":
        errors = np.asarray(data["errors"], dtype=float)
        params = np.asarray(data["params"], dtype=float).reshape(len(errors), -1)
        return cls(params, errors)


class EvaluationError(RuntimeError):
    def __init__(self, params, cause: BaseException):
        self.params = np.asarray(params)
        super().__init__(f"evaluation failed for parameters {self.params.tolist()}: {cause!r}")


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    a = np.asarray(a)
    b = np.asarray(b)
    return bool(np.all(a <= b) and np.any(a < b))


def _domination_matrix(points: np.ndarray) -> np.ndarray:
    le = np.all(points[:, None, :] <= points[None, :, :], axis=2)
    lt = np.any(points[:, None, :] < points[None, :, :], axis=2)
    return le & lt  # [i, j]: i dominates j


def non_dominated_sort(points) -> list[list[int]]:
    """Partition point indices into successive Pareto fronts (front 0 is non-dominated)."""
    points = np.asarray(points, dtype=float)
    if points.size == 0:
        return []
    points = points.reshape(len(points), -1)
    dom = _domination_matrix(points)
    counts = dom.sum(axis=0)
    fronts = []
    current = np.flatnonzero(counts == 0)
    while current.size:
        fronts.append(current.tolist())
        counts = counts - dom[current].sum(axis=0)
        counts[current] = -1
        current = np.flatnonzero(counts == 0)
    return fronts


def crowding_distance(points) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    n = len(points)
    if n == 0:
        return np.zeros(0)
    points = points.reshape(n, -1)
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for col in points.T:
        order = np.argsort(col, kind="stable")
        lo, hi = col[order[0]], col[order[-1]]
        dist[order[0]] = dist[order[-1]] = np.inf
        span = hi - lo
        if span > 0:
            dist[order[1:-1]] += (col[order[2:]] - col[order[:-2]]) / span
    return dist


# -- hypervolume ---------------------------------------------------------------


def _nondominated_rows(points: np.ndarray) -> np.ndarray:
    if len(points) <= 1:
        return points
    dom = _domination_matrix(points)
    keep = ~dom.any(axis=0)
    points = points[keep]
    # duplicates do not dominate each other; drop them to keep slices small
    return np.unique(points, axis=0)


def _hv2d(points: np.ndarray, ref: np.ndarray) -> float:
    order = np.lexsort((points[:, 1], points[:, 0]))
    volume = 0.0
    best_y = ref[1]
    for x, y in points[order]:
        if y < best_y:
            volume += (ref[0] - x) * (best_y - y)
            best_y = y
    return volume


def _hv(points: np.ndarray, ref: np.ndarray) -> float:
    d = points.shape[1]
    if len(points) == 0:
        return 0.0
    if d == 1:
        return float(ref[0] - points[:, 0].min())
    if d == 2:
        return _hv2d(points, ref)
    order = np.argsort(points[:, -1], kind="stable")
    points = points[order]
    volume = 0.0
    for i in range(len(points)):
        upper = points[i + 1, -1] if i + 1 < len(points) else ref[-1]
        height = upper - points[i, -1]
        if height > 0:
            slab = _nondominated_rows(points[: i + 1, :-1])
            volume += _hv(slab, ref[:-1]) * height
    return volume


def dominated_hypervolume(errors, reference=None) -> float:
    """Exact Lebesgue measure of the region dominated by ``errors`` and bounded by ``reference``.

    Uses a sweep for two objectives and recursive slicing for three or four.
    The reference defaults to the all-ones point.
    """
    if isinstance(errors, ParetoFront):
        errors = errors.errors
    points = np.asarray(errors, dtype=float)
    if points.size == 0:
        return 0.0
    points = points.reshape(len(points), -1)
    c = points.shape[1]
    if c > 4:
        raise ValueError("exact hypervolume supports at most 4 objectives")
    ref = np.ones(c) if reference is None else np.asarray(reference, dtype=float)
    if ref.shape != (c,):
        raise ValueError("reference point dimension mismatch")
    points = points[np.all(points < ref, axis=1)]
    if len(points) == 0:
        return 0.0
    if c == 2:
        return float(_hv2d(points, ref))
    return float(_hv(_nondominated_rows(points), ref))


# -- NSGA-II -------------------------------------------------------------------


def _sbx_core(a, b, low, high, do_pair, do_var, u, swap, eta):
    mask = do_pair[..., None] & do_var & (np.abs(a - b) > 1e-14)
    y1 = np.minimum(a, b)
    y2 = np.maximum(a, b)
    span = np.where(mask, y2 - y1, 1.0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):

        def spread(beta):
            alpha = 2.0 - beta ** -(eta + 1.0)
            return np.where(
                u <= 1.0 / alpha,
                (u * alpha) ** (1.0 / (eta + 1.0)),
                (1.0 / (2.0 - u * alpha)) ** (1.0 / (eta + 1.0)),
            )

        bq1 = spread(1.0 + 2.0 * (y1 - low) / span)
        bq2 = spread(1.0 + 2.0 * (high - y2) / span)
        child1 = np.clip(0.5 * ((y1 + y2) - bq1 * (y2 - y1)), low, high)
        child2 = np.clip(0.5 * ((y1 + y2) + bq2 * (y2 - y1)), low, high)
    first = np.where(swap, child2, child1)
    second = np.where(swap, child1, child2)
    return np.where(mask, first, a), np.where(mask, second, b)


def _pm_core(x, low, high, mask, u, eta):
    span = high - low
    safe = np.where(span > 0, span, 1.0)
    d1 = (x - low) / safe
    d2 = (high - x) / safe
    power = 1.0 / (eta + 1.0)
    with np.errstate(invalid="ignore"):
        lower = (2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1) ** (eta + 1.0)) ** power - 1.0
        upper = 1.0 - (2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2) ** (eta + 1.0)) ** power
    delta = np.where(u < 0.5, lower, upper)
    mutated = np.clip(x + delta * span, low, high)
    return np.where(mask & (span > 0), mutated, x)


def _sbx_draws(rng, n, dim, prob):
    return (
        rng.random(n) < prob,
        rng.random((n, dim)) < 0.5,
        rng.random((n, dim)),
        rng.random((n, dim)) < 0.5,
    )


def _pm_draws(rng, n, dim, prob):
    return rng.random((n, dim)) < prob, rng.random((n, dim))


def sbx_crossover(parents_a, parents_b, low, high, rng, eta=15.0, prob=0.9):
    """Bounded simulated binary crossover, one child pair per parent pair."""
    a = np.array(parents_a, dtype=float)
    b = np.array(parents_b, dtype=float)
    n, dim = a.shape
    if dim == 0:
        return a, b
    return _sbx_core(a, b, low, high, *_sbx_draws(rng, n, dim, prob), eta)


def polynomial_mutation(x, low, high, rng, eta=20.0, prob=None):
    """Bounded polynomial mutation; each variable mutates with probability ``prob`` (default 1/dim)."""
    x = np.array(x, dtype=float)
    n, dim = x.shape
    if dim == 0:
        return x
    prob = 1.0 / dim if prob is None else prob
    return _pm_core(x, low, high, *_pm_draws(rng, n, dim, prob), eta)


def batch_rank(obj: np.ndarray) -> np.ndarray:
    """Front index of every point, for a stack of independent point sets ``(R, N, c)``."""
    le = np.all(obj[:, :, None, :] <= obj[:, None, :, :], axis=3)
    lt = np.any(obj[:, :, None, :] < obj[:, None, :, :], axis=3)
    dom = (le & lt).astype(np.int64)
    counts = dom.sum(axis=1)
    rank = np.full(counts.shape, -1)
    r = 0
    while True:
        current = (counts == 0) & (rank < 0)
        if not current.any():
            return rank
        rank[current] = r
        counts = counts - np.einsum("rij,ri->rj", dom, current.astype(np.int64))
        r += 1


def batch_crowding(obj: np.ndarray, rank: np.ndarray) -> np.ndarray:
    """Crowding distance of every point within its own front, for ``(R, N, c)`` stacks."""
    R, N, c = obj.shape
    dist = np.zeros((R, N))
    idx = np.arange(N)
    for m in range(c):
        v = obj[:, :, m]
        order = np.lexsort((v, rank), axis=-1)
        rs = np.take_along_axis(rank, order, axis=1)
        vs = np.take_along_axis(v, order, axis=1)
        start = np.ones((R, N), dtype=bool)
        start[:, 1:] = rs[:, 1:] != rs[:, :-1]
        end = np.ones((R, N), dtype=bool)
        end[:, :-1] = rs[:, :-1] != rs[:, 1:]
        first = np.maximum.accumulate(np.where(start, idx, 0), axis=1)
        last = np.minimum.accumulate(np.where(end, idx, N)[:, ::-1], axis=1)[:, ::-1]
        span = np.take_along_axis(vs, last, axis=1) - np.take_along_axis(vs, first, axis=1)
        nxt = np.concatenate([vs[:, 1:], vs[:, -1:]], axis=1)
        prv = np.concatenate([vs[:, :1], vs[:, :-1]], axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            gap = np.where(span > 0, (nxt - prv) / np.where(span > 0, span, 1.0), 0.0)
        contrib = np.where(start | end, np.inf, gap)
        scattered = np.empty((R, N))
        np.put_along_axis(scattered, order, contrib, axis=1)
        dist += scattered
    return dist


class Nsga2:
    """``R`` independent NSGA-II runs stepped in lockstep through ``ask``/``tell``.

    Each run owns its random generator, so a run's trajectory does not depend
    on which other runs share the batch. ``ask`` returns an ``(R, P, dim)``
    array to evaluate (the initial population first, then offspring) and
    ``tell`` takes the matching ``(R, P, c)`` objectives.
    """

    def __init__(
        self,
        dim: int,
        bounds: Sequence[tuple[float, float]] | None,
        pop_size: int,
        rngs: Sequence[np.random.Generator] | np.random.Generator,
        eta_c: float = 15.0,
        eta_m: float = 20.0,
        p_crossover: float = 0.9,
        p_mutation: float | None = None,
    ):
        if pop_size < 1:
            raise ValueError("pop_size must be >= 1")
        if dim < 1:
            raise ValueError("NSGA-II needs at least one decision variable")
        bounds = [(0.0, 1.0)] * dim if bounds is None else list(bounds)
        if len(bounds) != dim:
            raise ValueError("one (low, high) bound per dimension required")
        self.dim = dim
        self.low = np.array([b[0] for b in bounds], dtype=float)
        self.high = np.array([b[1] for b in bounds], dtype=float)
        if np.any(self.high < self.low):
            raise ValueError("bounds must satisfy low <= high")
        self.pop_size = pop_size
        self.rngs = [rngs] if isinstance(rngs, np.random.Generator) else list(rngs)
        self.eta_c = eta_c
        self.eta_m = eta_m
        self.p_crossover = p_crossover
        self.p_mutation = 1.0 / dim if p_mutation is None else p_mutation
        self.pop: np.ndarray | None = None
        self.obj: np.ndarray | None = None
        self._pending: np.ndarray | None = None
        self.generation = 0

    @property
    def n_runs(self) -> int:
        return len(self.rngs)

    def ask(self) -> np.ndarray:
        if self.pop is None:
            u = np.stack([rng.random((self.pop_size, self.dim)) for rng in self.rngs])
            self._pending = self.low + u * (self.high - self.low)
        else:
            self._pending = self._offspring()
        return self._pending

    def tell(self, objectives) -> None:
        if self._pending is None:
            raise RuntimeError("tell() without a preceding ask()")
        obj = np.asarray(objectives, dtype=float).reshape(self.n_runs, self.pop_size, -1)
        if self.pop is None:
            self.pop, self.obj = self._pending, obj
        else:
            self._survive(
                np.concatenate([self.pop, self._pending], axis=1),
                np.concatenate([self.obj, obj], axis=1),
            )
            self.generation += 1
        self._pending = None
        self.rank = batch_rank(self.obj)
        self.crowd = batch_crowding(self.obj, self.rank)

    def _offspring(self) -> np.ndarray:
        R, P, dim = self.n_runs, self.pop_size, self.dim
        n_pairs = (P + 1) // 2
        n = 2 * n_pairs
        # one draw per run per generation, carved into the pieces below
        sizes = [n, n, n, n_pairs, n_pairs * dim, n_pairs * dim, n_pairs * dim, P * dim, P * dim]
        u = np.stack([rng.random(sum(sizes)) for rng in self.rngs])
        parts = np.split(u, np.cumsum(sizes)[:-1], axis=1)
        i = np.minimum((parts[0] * P).astype(np.int64), P - 1)
        j = np.minimum((parts[1] * P).astype(np.int64), P - 1)
        coin = parts[2] < 0.5
        ri, rj = np.take_along_axis(self.rank, i, 1), np.take_along_axis(self.rank, j, 1)
        ci, cj = np.take_along_axis(self.crowd, i, 1), np.take_along_axis(self.crowd, j, 1)
        pick_i = (ri < rj) | ((ri == rj) & ((ci > cj) | ((ci == cj) & coin)))
        mates = np.where(pick_i, i, j)
        parents = np.take_along_axis(self.pop, mates[:, :, None], axis=1)
        c1, c2 = _sbx_core(
            parents[:, :n_pairs],
            parents[:, n_pairs:],
            self.low,
            self.high,
            parts[3] < self.p_crossover,
            parts[4].reshape(R, n_pairs, dim) < 0.5,
            parts[5].reshape(R, n_pairs, dim),
            parts[6].reshape(R, n_pairs, dim) < 0.5,
            self.eta_c,
        )
        children = np.concatenate([c1, c2], axis=1)[:, :P]
        mask = parts[7].reshape(R, P, dim) < self.p_mutation
        return _pm_core(children, self.low, self.high, mask, parts[8].reshape(R, P, dim), self.eta_m)

    def _survive(self, pop: np.ndarray, obj: np.ndarray) -> None:
        rank = batch_rank(obj)
        crowd = batch_crowding(obj, rank)
        order = np.lexsort((-crowd, rank), axis=-1)[:, : self.pop_size]
        self.pop = np.take_along_axis(pop, order[:, :, None], axis=1)
        self.obj = np.take_along_axis(obj, order[:, :, None], axis=1)

    def front(self, run: int = 0) -> ParetoFront:
        first = np.flatnonzero(self.rank[run] == 0)
        return ParetoFront(self.pop[run, first].copy(), self.obj[run, first].copy())


def nsga2_run(
    evaluate: Callable,
    dim: int,
    bounds: Sequence[tuple[float, float]] | None = None,
    pop_size: int = 20,
    generations: int = 50,
    seed=None,
    vectorized: bool = False,
    **operator_options,
) -> ParetoFront:
    """Run NSGA-II and return the final non-dominated set.

    ``evaluate`` maps one parameter vector to its objective vector, or with
    ``vectorized=True`` a ``(P, dim)`` matrix to a ``(P, c)`` matrix.
    A parameter-free problem (``dim == 0``) is evaluated once.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def run_batch(x: np.ndarray) -> np.ndarray:
        if vectorized:
            try:
                return np.asarray(evaluate(x), dtype=float).reshape(len(x), -1)
            except Exception as exc:
                raise EvaluationError(x, exc) from exc
        rows = []
        for row in x:
            try:
                rows.append(np.asarray(evaluate(row), dtype=float).ravel())
            except Exception as exc:
                raise EvaluationError(row, exc) from exc
        return np.vstack(rows)

    if dim == 0:
        empty = np.zeros((1, 0))
        return ParetoFront(empty, run_batch(empty))
    algo = Nsga2(dim, bounds, pop_size, rng, **operator_options)
    for _ in range(generations + 1):
        algo.tell(run_batch(algo.ask()[0])[None])
    return algo.front()
