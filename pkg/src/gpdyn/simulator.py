"""Stepping model instances through time and scoring their forecasts.

Day ``t`` of a segment is a row of an ``(days, m)`` array with values in
[0, 1]. Forecasts are rolling-origin: the model is seeded with the observed
state at every origin day and stepped ``h`` days ahead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .model import BinaryOp, ModelGenotype, ParamRef, StateRef, Tree, state_refs


class SegmentTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class ForecastSpec:
    horizons: tuple[int, ...] = (1, 2, 3)
    clamp_states: bool = True
    clamp_error: bool = True
    protocol: str = "rolling"  # or "free_run": seed once at day 0

    def __post_init__(self):
        object.__setattr__(self, "horizons", tuple(sorted(set(int(h) for h in self.horizons))))
        if not self.horizons or self.horizons[0] < 1:
            raise ValueError("horizons must be a non-empty set of positive integers")
        if self.protocol not in ("rolling", "free_run"):
            raise ValueError(f"unknown forecast protocol {self.protocol!r}")

    @property
    def max_horizon(self) -> int:
        return self.horizons[-1]


@dataclass(frozen=True)
class ModelInstance:
    genotype: ModelGenotype
    params: tuple[float, ...] = ()
    bounds: tuple[tuple[float, float], ...] | None = field(default=None)

    def __post_init__(self):
        params = tuple(float(p) for p in np.atleast_1d(np.asarray(self.params, dtype=float)))
        object.__setattr__(self, "params", params)
        if len(params) != self.genotype.k:
            raise ValueError(
                f"model uses {self.genotype.k} parameter(s) but {len(params)} value(s) given"
            )
        if self.bounds is not None:
            bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
            object.__setattr__(self, "bounds", bounds)
            if len(bounds) != len(params):
                raise ValueError("one (low, high) bound per parameter required")
            for value, (lo, hi) in zip(params, bounds):
                if not lo <= value <= hi:
                    raise ValueError(f"parameter value {value} outside bounds [{lo}, {hi}]")

    def named_params(self) -> dict[str, float]:
        return {f"g{i + 1}": v for i, v in zip(self.genotype.param_indices, self.params)}


# -- compilation -------------------------------------------------------------


def _tree_source(tree: Tree, param_pos: dict[int, int]) -> str:
    if isinstance(tree, StateRef):
        return f"s[{tree.index}]"
    if isinstance(tree, ParamRef):
        return f"g[{param_pos[tree.index]}]"
    return f"({_tree_source(tree.left, param_pos)} {tree.op} {_tree_source(tree.right, param_pos)})"


class CompiledModel:
    """Genotype turned into one Python callable per tree.

    Each callable takes ``s`` (sequence indexed by state) and ``g`` (parameter
    values in canonical order) and works elementwise on numpy arrays, so many
    origins and many parameter vectors are evaluated in one call.
    """

    def __init__(self, genotype: ModelGenotype):
        self.genotype = genotype
        param_pos = {p: i for i, p in enumerate(genotype.param_indices)}
        self.sources = [_tree_source(t, param_pos) for t in genotype.trees]
        self.funcs = [eval(f"lambda s, g: {src}", {}) for src in self.sources]  # noqa: S307
        self.deps = [frozenset(state_refs(t)) for t in genotype.trees]

    def needed_states(self, targets: Sequence[int], horizons: Sequence[int]) -> list[tuple[int, ...]]:
        """States that must be computed at steps 1..H to score ``targets`` at ``horizons``."""
        horizons = set(horizons)
        H = max(horizons)
        needed: list[frozenset[int]] = [frozenset()] * (H + 1)
        needed[H] = frozenset(targets)
        for j in range(H, 1, -1):
            deps = set().union(*(self.deps[i] for i in needed[j])) if needed[j] else set()
            own = set(targets) if (j - 1) in horizons else set()
            needed[j - 1] = frozenset(deps | own)
        return [tuple(sorted(n)) for n in needed]


@lru_cache(maxsize=4096)
def compile_genotype(genotype: ModelGenotype) -> CompiledModel:
    return CompiledModel(genotype)


def _clip(x):
    return np.clip(x, 0.0, 1.0)


# -- single-instance operations ----------------------------------------------


def step(instance: ModelInstance, state: Sequence[float], clamp_states: bool = True) -> np.ndarray:
    """Advance the full state vector by one day."""
    model = compile_genotype(instance.genotype)
    s = [float(v) for v in state]
    if len(s) != model.genotype.m:
        raise ValueError(f"expected {model.genotype.m} state values, got {len(s)}")
    g = instance.params
    out = np.array([f(s, g) for f in model.funcs], dtype=float)
    return _clip(out) if clamp_states else out


def forecast(
    instance: ModelInstance,
    segment: np.ndarray,
    origin: int,
    h: int,
    clamp_states: bool = True,
) -> np.ndarray:
    """State predicted at ``origin + h``, seeded with the observation at ``origin``."""
    segment = np.asarray(segment, dtype=float)
    if h < 0 or origin < 0 or origin + h >= len(segment):
        raise IndexError(f"origin {origin} + horizon {h} outside segment of {len(segment)} days")
    state = segment[origin]
    for _ in range(h):
        state = step(instance, state, clamp_states)
    return state


def rolling_forecast(
    instance: ModelInstance, segment: np.ndarray, h: int, clamp_states: bool = True
) -> np.ndarray:
    """Predictions for days ``h..T-1``, each seeded with the observation ``h`` days earlier."""
    segment = np.asarray(segment, dtype=float)
    if h < 1 or h >= len(segment):
        raise SegmentTooShortError(f"segment of {len(segment)} days too short for horizon {h}")
    model = compile_genotype(instance.genotype)
    s = [segment[: len(segment) - h, i] for i in range(segment.shape[1])]
    g = instance.params
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(h):
            s = [np.broadcast_to(f(s, g), s[0].shape) for f in model.funcs]
            if clamp_states:
                s = [_clip(v) for v in s]
    return np.column_stack(s)


def objective_errors(
    instance: ModelInstance,
    segment: np.ndarray,
    targets: Sequence[int],
    spec: ForecastSpec = ForecastSpec(),
) -> np.ndarray:
    """Per-target mean squared forecast error, pooled over origins and horizons."""
    params = np.asarray(instance.params, dtype=float).reshape(1, -1)
    return batch_errors(instance.genotype, segment, targets, params, spec)[0]


# -- batched scoring -----------------------------------------------------------


class SegmentBatch:
    """Several segments laid side by side so that one pass scores all of them.

    Rolling-origin layout: block ``b`` holds one column per origin day of
    segment ``b``. Each block gets its own ``Q`` parameter vectors; errors come
    back as ``(B, Q, c)``.
    """

    def __init__(self, segments: Sequence[np.ndarray], targets: Sequence[int], spec: ForecastSpec):
        self.segments = [np.asarray(seg, dtype=float) for seg in segments]
        if not self.segments:
            raise ValueError("need at least one segment")
        self.targets = tuple(targets)
        self.spec = spec
        lengths = np.array([len(seg) for seg in self.segments])
        self.lengths = lengths
        m = self.segments[0].shape[1]
        if spec.protocol == "rolling":
            H = spec.max_horizon
            short = lengths <= H
            if short.any():
                raise SegmentTooShortError(
                    f"segment of {lengths[short].min()} days too short for horizon {H}"
                )
            self.widths = lengths - 1
            self.starts = np.concatenate([[0], np.cumsum(self.widths)[:-1]])
            self.initial = [
                np.concatenate([seg[: T - 1, i] for seg, T in zip(self.segments, lengths)])
                for i in range(m)
            ]
            self.observed = {}
            self.mask = {}
            for h in spec.horizons:
                self.mask[h] = np.concatenate(
                    [np.r_[np.ones(T - h, bool), np.zeros(h - 1, bool)] for T in lengths]
                )
                self.observed[h] = [
                    np.concatenate([np.r_[seg[h:, i], np.zeros(h - 1)] for seg in self.segments])
                    for i in self.targets
                ]
            self.counts = np.array([sum(T - h for h in spec.horizons) for T in lengths], float)
        else:
            if lengths.min() < 2:
                raise SegmentTooShortError("free-run scoring needs at least two days")
            self.widths = np.ones(len(lengths), dtype=int)
            self.starts = np.arange(len(lengths))
            self.initial = [np.array([seg[0, i] for seg in self.segments]) for i in range(m)]
            self.counts = (lengths - 1).astype(float)

    def errors(self, genotype: ModelGenotype, params) -> np.ndarray:
        params = np.asarray(params, dtype=float)
        B = len(self.segments)
        if params.ndim == 2:
            params = params[None]
        if params.shape[0] != B or params.shape[2] != genotype.k:
            raise ValueError(
                f"expected parameters of shape ({B}, Q, {genotype.k}), got {params.shape}"
            )
        model = compile_genotype(genotype)
        Q = params.shape[1]
        # one (Q, columns) array per parameter, each block carrying its own values
        g = [np.repeat(params[:, :, j].T, self.widths, axis=1) for j in range(genotype.k)]
        if self.spec.protocol == "rolling":
            sse = self._rolling(model, g, Q)
        else:
            sse = self._free_run(model, g, Q)
        err = sse / self.counts[:, None, None]
        err = np.where(np.isfinite(err), err, np.inf)
        if self.spec.clamp_error:
            err = np.minimum(err, 1.0)
        return err

    def _rolling(self, model: CompiledModel, g, Q):
        spec = self.spec
        needed = model.needed_states(self.targets, spec.horizons)
        s: list = list(self.initial)
        width = int(self.widths.sum())
        sse = np.zeros((len(self.targets), Q, len(self.segments)))
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(1, spec.max_horizon + 1):
                new = [None] * model.genotype.m
                for i in needed[j]:
                    value = model.funcs[i](s, g)
                    new[i] = _clip(value) if spec.clamp_states else value
                s = new
                if j in self.mask:
                    mask = self.mask[j]
                    for c, i in enumerate(self.targets):
                        diff = np.where(mask, s[i] - self.observed[j][c], 0.0)
                        diff = np.broadcast_to(diff, (Q, width))
                        sse[c] += np.add.reduceat(diff * diff, self.starts, axis=1)
        return sse.transpose(2, 1, 0)

    def _free_run(self, model: CompiledModel, g, Q):
        B = len(self.segments)
        s: list = list(self.initial)
        sse = np.zeros((B, Q, len(self.targets)))
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(1, int(self.lengths.max())):
                s = [f(s, g) for f in model.funcs]
                if self.spec.clamp_states:
                    s = [_clip(v) for v in s]
                live = self.lengths > t
                for c, i in enumerate(self.targets):
                    obs = np.array([seg[t, i] if t < len(seg) else 0.0 for seg in self.segments])
                    diff = np.broadcast_to(np.where(live, s[i] - obs, 0.0), (Q, B))
                    sse[:, :, c] += (diff * diff).T
        return sse


def batch_errors(
    genotype: ModelGenotype,
    segment: np.ndarray,
    targets: Sequence[int],
    params: np.ndarray,
    spec: ForecastSpec = ForecastSpec(),
) -> np.ndarray:
    """Objective errors for ``P`` parameter vectors on one segment; returns ``(P, len(targets))``."""
    params = np.asarray(params, dtype=float).reshape(len(params), -1)
    if params.shape[1] != genotype.k:
        raise ValueError(f"model uses {genotype.k} parameter(s), got {params.shape[1]} column(s)")
    return SegmentBatch([segment], targets, spec).errors(genotype, params[None])[0]
