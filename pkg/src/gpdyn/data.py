"""Cohort ingestion, daily preprocessing, temporal splits and synthetic cohorts."""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import ModelGenotype, StateSchema
from .simulator import ModelInstance, compile_genotype

log = logging.getLogger(__name__)

OBSERVED, AGGREGATED, INTERPOLATED, EDGE_FILLED = "o", "a", "i", "e"
CSV_HEADER = ["patient_id", "date", "variable", "value"]


class DataError(ValueError):
    pass


class CsvFormatError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SplitError(DataError):
    pass


@dataclass(frozen=True)
class ObservationRecord:
    patient_id: str
    date: dt.date
    variable: str
    value: float


@dataclass(frozen=True)
class PatientSeries:
    patient_id: str
    start: dt.date
    values: np.ndarray  # (days, m), normalized to [0, 1]
    provenance: tuple[str, ...] = ()  # one string per day, one code per state
    split: tuple[int, int] | None = None  # (train_end, val_end)
    ground_truth: tuple[float, ...] | None = field(default=None, compare=False)

    @property
    def n_days(self) -> int:
        return len(self.values)

    @property
    def days(self) -> list[dt.date]:
        return [self.start + dt.timedelta(days=i) for i in range(self.n_days)]

    def _bounds(self) -> tuple[int, int]:
        if self.split is None:
            raise SplitError(f"patient {self.patient_id} has not been split")
        return self.split

    @property
    def train(self) -> np.ndarray:
        return self.values[: self._bounds()[0]]

    @property
    def validation(self) -> np.ndarray:
        a, b = self._bounds()
        return self.values[a:b]

    @property
    def test(self) -> np.ndarray:
        return self.values[self._bounds()[1] :]

    def to_dict(self) -> dict:
        data = {
            "patient_id": self.patient_id,
            "start": self.start.isoformat(),
            "values": self.values.tolist(),
            "provenance": list(self.provenance),
            "split": list(self.split) if self.split is not None else None,
        }
        if self.ground_truth is not None:
            data["ground_truth"] = list(self.ground_truth)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "PatientSeries":
        split = data.get("split")
        gt = data.get("ground_truth")
        return cls(
            patient_id=str(data["patient_id"]),
            start=dt.date.fromisoformat(data["start"]),
            values=np.asarray(data["values"], dtype=float),
            provenance=tuple(data.get("provenance") or ()),
            split=tuple(split) if split is not None else None,
            ground_truth=tuple(gt) if gt is not None else None,
        )


@dataclass
class Cohort:
    schema: StateSchema
    patients: list[PatientSeries]
    meta: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        data = {
            "meta": self.meta,
            "schema": self.schema.to_dict(),
            "patients": [p.to_dict() for p in self.patients],
        }
        Path(path).write_text(json.dumps(data, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Cohort":
        data = json.loads(Path(path).read_text())
        return cls(
            StateSchema.from_dict(data["schema"]),
            [PatientSeries.from_dict(p) for p in data["patients"]],
            data.get("meta", {}),
        )


def load_long_csv(
    path: str | Path,
    schema: StateSchema | None = None,
    strict_unknown: bool = False,
) -> list[ObservationRecord]:
    """Read ``patient_id,date,variable,value`` rows with ISO dates.

    With a schema, values outside the variable's raw scale raise and unknown
    variables are skipped with a warning (or raise with ``strict_unknown``).
    """
    records = []
    unknown: dict[str, int] = defaultdict(int)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise CsvFormatError(f"expected header {','.join(CSV_HEADER)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise CsvFormatError(f"expected 4 fields, got {len(row)}", lineno)
            pid, date_text, variable, value_text = (c.strip() for c in row)
            try:
                date = dt.date.fromisoformat(date_text)
            except ValueError:
                raise CsvFormatError(f"unparsable date {date_text!r}", lineno) from None
            try:
                value = float(value_text)
            except ValueError:
                raise CsvFormatError(f"unparsable value {value_text!r}", lineno) from None
            if not np.isfinite(value):
                raise CsvFormatError(f"non-finite value {value_text!r}", lineno)
            if schema is not None:
                if variable not in schema.names:
                    if strict_unknown:
                        raise CsvFormatError(f"unknown variable {variable!r}", lineno)
                    unknown[variable] += 1
                    continue
                lo, hi = schema.raw_scale[schema.names.index(variable)]
                if not lo <= value <= hi:
                    raise CsvFormatError(
                        f"value {value} of {variable!r} outside raw scale [{lo}, {hi}]", lineno
                    )
            records.append(ObservationRecord(pid, date, variable, value))
    for variable, count in sorted(unknown.items()):
        log.warning("skipped %d row(s) with unknown variable %r", count, variable)
    return records


def normalize(value: float, low: float, high: float) -> float:
    return (value - low) / (high - low)


def _fill_column(observed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Linear interpolation between bracketing observations, nearest value at the edges."""
    days = np.arange(len(observed))
    have = ~np.isnan(observed)
    idx = days[have]
    filled = np.interp(days, idx, observed[have])  # np.interp holds edge values constant
    kind = np.full(len(observed), INTERPOLATED)
    kind[have] = OBSERVED
    kind[(days < idx[0]) | (days > idx[-1])] = EDGE_FILLED
    return filled, kind


def preprocess(
    records: Iterable[ObservationRecord],
    schema: StateSchema,
    min_days: int = 40,
) -> list[PatientSeries]:
    """Normalize, average per day and interpolate into one daily series per patient.

    Patients are returned in order of first appearance. A patient is dropped
    when it has fewer than ``min_days`` distinct observed days or no
    observation at all for some state.
    """
    by_patient: dict[str, dict[tuple[dt.date, int], list[float]]] = {}
    for rec in records:
        if rec.variable not in schema.names:
            continue
        i = schema.names.index(rec.variable)
        lo, hi = schema.raw_scale[i]
        cells = by_patient.setdefault(rec.patient_id, defaultdict(list))
        cells[(rec.date, i)].append(normalize(rec.value, lo, hi))

    result = []
    for pid, cells in by_patient.items():
        dates = {d for d, _ in cells}
        if len(dates) < min_days:
            log.info("dropping patient %s: %d observed day(s) < %d", pid, len(dates), min_days)
            continue
        start, end = min(dates), max(dates)
        n = (end - start).days + 1
        values = np.full((n, schema.m), np.nan)
        codes = np.full((n, schema.m), OBSERVED)
        for (date, i), answers in cells.items():
            t = (date - start).days
            values[t, i] = float(np.mean(answers))
            codes[t, i] = AGGREGATED if len(answers) > 1 else OBSERVED
        missing = [schema.names[i] for i in range(schema.m) if np.all(np.isnan(values[:, i]))]
        if missing:
            log.warning("dropping patient %s: no observations for %s", pid, ", ".join(missing))
            continue
        for i in range(schema.m):
            filled, kind = _fill_column(values[:, i])
            gaps = np.isnan(values[:, i])
            codes[gaps, i] = kind[gaps]
            values[:, i] = filled
        provenance = tuple("".join(row) for row in codes)
        result.append(PatientSeries(pid, start, np.clip(values, 0.0, 1.0), provenance))
    return result


def split_sizes(n_days: int, fractions: Sequence[float] = (0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise SplitError("fractions must be three positive numbers summing to 1")
    n_train = int(np.floor(fractions[0] * n_days + 1e-9))
    n_val = int(np.floor(fractions[1] * n_days + 1e-9))
    return n_train, n_val, n_days - n_train - n_val


def split(
    series: PatientSeries,
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    max_horizon: int = 3,
) -> PatientSeries:
    """Time-ordered train/validation/test split, floors for the first two, remainder to test."""
    sizes = split_sizes(series.n_days, fractions)
    for name, size in zip(("training", "validation", "test"), sizes):
        if size < max_horizon + 1:
            raise SplitError(
                f"patient {series.patient_id}: {name} segment has {size} day(s), "
                f"needs at least {max_horizon + 1}"
            )
    return replace(series, split=(sizes[0], sizes[0] + sizes[1]))


def cohort_stats(patients: Sequence[PatientSeries]) -> dict:
    lengths = np.array([p.n_days for p in patients], dtype=float)
    return {
        "patients": len(patients),
        "mean_days": float(lengths.mean()) if len(lengths) else 0.0,
        "std_days": float(lengths.std()) if len(lengths) else 0.0,
    }


def uniform_params(low: float = 0.1, high: float = 0.9) -> Callable:
    def sample(rng: np.random.Generator, k: int) -> np.ndarray:
        return rng.uniform(low, high, size=k)

    return sample


def simulate(instance: ModelInstance, initial: np.ndarray, days: int) -> np.ndarray:
    """Noise-free clamped trajectory of ``days`` rows starting at ``initial``."""
    model = compile_genotype(instance.genotype)
    g = instance.params
    out = np.empty((days, len(initial)))
    state = [float(v) for v in initial]
    out[0] = state
    for t in range(1, days):
        state = [min(max(float(f(state, g)), 0.0), 1.0) for f in model.funcs]
        out[t] = state
    return out


def synth_generate(
    genotype: ModelGenotype,
    n_patients: int,
    days: int,
    noise_sigma: float,
    seed: int,
    param_sampler: Callable | None = None,
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    max_horizon: int = 3,
    start: dt.date = dt.date(2024, 1, 1),
) -> list[PatientSeries]:
    """Synthetic cohort from a ground-truth model.

    Per patient: parameters from ``param_sampler(rng, k)`` (uniform [0.1, 0.9]
    by default), initial state uniform in [0.2, 0.8], clamped simulation,
    Gaussian observation noise, clamp to [0, 1], then the temporal split.
    The true parameters are kept on each series as ``ground_truth``.
    """
    sampler = param_sampler or uniform_params()
    children = np.random.SeedSequence(seed).spawn(n_patients)
    width = len(str(max(n_patients - 1, 0)))
    cohort = []
    for p, child in enumerate(children):
        rng = np.random.default_rng(child)
        params = np.asarray(sampler(rng, genotype.k), dtype=float)
        initial = rng.uniform(0.2, 0.8, size=genotype.m)
        clean = simulate(ModelInstance(genotype, params), initial, days)
        noisy = clean + rng.normal(0.0, noise_sigma, size=clean.shape) if noise_sigma > 0 else clean
        series = PatientSeries(
            patient_id=f"p{p:0{width}d}",
            start=start,
            values=np.clip(noisy, 0.0, 1.0),
            provenance=(OBSERVED * genotype.m,) * days,
            ground_truth=tuple(params.tolist()),
        )
        cohort.append(split(series, fractions, max_horizon))
    return cohort
